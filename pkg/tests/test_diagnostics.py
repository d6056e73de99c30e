import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lambdatree.diagnostics import (StudyConfig, compactness_report, local_compactness_probe,
                                    rooted_restriction, run_replicates, thin_point_probe,
                                    xi_scaling_study)
from lambdatree.measure import parse_measure
from lambdatree.mmspace import (UltrametricSpace, block_count, delta_restriction, leaf_order_sample,
                                xi_epsilon)
from lambdatree.simulate import SimConfig, simulate

SMALL = dict(n_grid=(20, 40, 80), replicates=12, seed=7, delta_grid=(0.4, 0.8),
             thin_delta_grid=(0.001, 0.02, 0.1))


def small(**kw):
    return StudyConfig(**{**SMALL, **kw})


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(n_grid=(100,)), dict(n_grid=(400, 100)),
                                    dict(n_grid=(1, 10)), dict(eps_grid=()),
                                    dict(delta_grid=(0.0, 0.4)), dict(replicates=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small(**kw)

    def test_local_pairs_need_eta_below_delta(self):
        cfg = small(delta_grid=(0.05, 0.4), eta_grid=(0.05, 0.1))
        assert cfg.local_pairs == [(0.4, 0.05), (0.4, 0.1)]


class TestRootedRestriction:
    @settings(max_examples=30)
    @given(st.integers(2, 120), st.integers(0, 2**32), st.floats(0.01, 2.0))
    def test_matches_generic_restriction(self, n, seed, delta):
        hist = simulate(parse_measure("bs"), SimConfig(n, seed=seed))
        tree = UltrametricSpace.from_history(hist)
        m = max(2, n // 2)
        fast = rooted_restriction(tree, m, delta)
        slow = delta_restriction(leaf_order_sample(tree, m), delta)
        assert fast.indices == slow.indices
        assert np.array_equal(fast.matrix, slow.matrix)
        for eta in (0.02, 0.1):
            assert xi_epsilon(fast, eta) == xi_epsilon(slow, eta)


class TestStudies:
    def test_replicates_deterministic_across_jobs(self):
        cfg = small()
        one = run_replicates(parse_measure("bs"), cfg, jobs=1)
        two = run_replicates(parse_measure("bs"), cfg, jobs=2)
        assert one == two
        assert [r["replicate"] for r in one] == list(range(cfg.replicates))

    def test_domination_and_monotonicity(self):
        for spec in ("kingman", "bs", "beta:1,1.5"):
            cfg = small()
            reps = run_replicates(parse_measure(spec), cfg)
            xi = xi_scaling_study(spec, cfg, reps)
            assert xi["domination_violations"] == []
            for r in reps:
                seq = [r["xi"][(n, 0.1)] for n in cfg.n_grid]
                # more leaves can only reveal more blocks on the same path
                assert seq == sorted(seq)
                assert seq[-1] == r["N"][0.1]

    def test_thin_fraction_zero_below_one_over_n(self):
        cfg = small()
        probe = thin_point_probe("bs", cfg)
        for c in probe["cells"]:
            if c["delta"] < 1 / c["n"]:
                assert c["max"] == 0.0
            assert 0.0 <= c["min"] <= c["max"] <= 1.0

    def test_local_probe_cells(self):
        cfg = small()
        out = local_compactness_probe("kingman", cfg)
        assert len(out["cells"]) == len(cfg.local_pairs) * len(cfg.n_grid)
        assert set(out["trend"]) == {f"{d!r},{e!r}" for d, e in cfg.local_pairs}
        assert all(c["min"] >= 1 for c in out["cells"])

    def test_block_count_bounds_xi_on_full_tree(self):
        tree = UltrametricSpace.from_history(simulate(parse_measure("bs"), SimConfig(300, seed=2)))
        for eps in (0.05, 0.1, 0.3):
            assert xi_epsilon(tree.with_uniform_mass_on_first(50), eps) <= block_count(tree, eps)


class TestReport:
    def test_serialization_deterministic(self):
        cfg = small()
        a = compactness_report("kingman", cfg)
        b = compactness_report("kingman", cfg, jobs=2)
        assert a.to_json() == b.to_json()
        assert a.to_csv() == b.to_csv()
        data = json.loads(a.to_json())
        assert data["analytic_class"] == "ComesDownFromInfinity"
        rows = list(csv.DictReader(io.StringIO(a.to_csv())))
        assert {r["statistic"] for r in rows} == {"xi", "N", "thin_fraction", "local_xi"}
        assert all(r["seed"] == "7" and r["replicates"] == "12" for r in rows)

    def test_dust_warning(self):
        r = compactness_report("power:1", small(replicates=4))
        assert r.analytic_class == "HasDust"
        assert any("dust" in w for w in r.warnings)
        assert r.consistent

    def test_bs_grows_on_small_grid(self):
        r = compactness_report("bs", small(n_grid=(50, 200, 800), replicates=20))
        stab = r.xi_study["stabilization"][0.1]
        assert stab["medians_strictly_increasing"]
        assert r.analytic_class == "DustFreeStaysInfinite"
