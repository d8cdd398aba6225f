from dataclasses import replace

import numpy as np
import pytest

from servicetime.synth import SimConfig, TypeSpec, simulate, verify_phenomena


@pytest.fixture(scope="module")
def default_sim():
    return simulate()


def test_uncongested_limit():
    spec = TypeSpec("Only", "D", 3.0, weekly_amplitude=0.0, template="bags", shock_sd=0.0)
    out = simulate(SimConfig(types=[spec], capacity={"D": 1e6}, horizon_days=60, region_shock_sd=0.0))
    done = np.isfinite(out.wait)
    assert np.all(out.wait[done] < 1e-4)
    st = np.array([r.service_time_days for r in out.requests if r.service_time_days is not None])
    np.testing.assert_allclose(st, out.processing[done], atol=1e-4)


def test_same_seed_byte_identical(tmp_path):
    cfg = SimConfig(horizon_days=40, seed=11)
    simulate(cfg).to_csv(tmp_path / "a.csv")
    simulate(cfg).to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_truth.csv").read_bytes() == (tmp_path / "b_truth.csv").read_bytes()


def test_conservation_decomposition_fifo(default_sim):
    out = default_sim
    done = sum(r.completed_at is not None for r in out.requests)
    assert done + out.pending == out.arrivals == len(out.requests)
    for r, w, p in zip(out.requests, out.wait, out.processing):
        if r.service_time_days is not None:
            assert r.service_time_days == pytest.approx(w + p, abs=1e-6)
    for dep in set(out.department):
        starts = [s for s, d in zip(out.dispatch, out.department) if d == dep and s is not None]
        assert all(a <= b for a, b in zip(starts, starts[1:]))


def test_more_type_b_demand_slows_type_a():
    base = SimConfig(horizon_days=150)
    types = list(base.types)
    types[1] = replace(types[1], base_rate=2 * types[1].base_rate)  # shares a department with types[0]

    def mean_a(cfg):
        out = simulate(cfg)
        return np.mean([r.service_time_days for r in out.requests
                        if r.request_type == cfg.types[0].label and r.service_time_days is not None])

    assert mean_a(replace(base, types=types)) > mean_a(base)


def test_default_phenomena(default_sim):
    rep = verify_phenomena(default_sim)
    assert rep.passed, rep.failures
    assert rep.cross_type_correlation > 0.3


def test_no_spillover_control():
    rep = verify_phenomena(simulate(SimConfig(spillover=0.0)))
    assert abs(rep.spatial_correlation) < 0.1


def test_separate_departments_collapse(default_sim):
    shared = verify_phenomena(default_sim).cross_type_correlation
    separate = verify_phenomena(simulate(SimConfig().separate_departments())).cross_type_correlation
    assert separate < 0.3 < shared


def test_constant_workload_variance_is_queue_variance():
    types = [replace(t, template="bags", mean_items=1.0) for t in SimConfig().types]
    out = simulate(SimConfig(types=types, travel_per_region=0.0, horizon_days=150))
    for spec in types:
        sel = [k for k, r in enumerate(out.requests)
               if r.request_type == spec.label and r.service_time_days is not None]
        st = np.array([out.requests[k].service_time_days for k in sel])
        assert st.var() == pytest.approx(out.wait[sel].var(), rel=1e-3, abs=1e-6)


def test_short_horizon_reported_not_raised():
    rep = verify_phenomena(simulate(SimConfig(horizon_days=30)))
    assert any("horizon" in f for f in rep.failures)


def test_capacity_must_be_positive():
    with pytest.raises(ValueError):
        SimConfig(capacity={"PW - Solid Waste": 0.0, "PW - Sanitation": 1.0})
