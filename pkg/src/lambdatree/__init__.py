"""Lambda-coalescents and the metric measure trees they induce."""

__version__ = "0.1.0"
