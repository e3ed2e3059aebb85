import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import linear_sum_assignment

from capshare import simulate
from capshare.clustering import classify
from capshare.errors import ConfigError, DataError


@pytest.mark.parametrize("shape", sorted(simulate.OMEGA_SHAPES))
def test_omega_shapes_integrate_to_zero(shape):
    f = simulate.omega_curve(shape, 1.0)
    val, _ = quad(lambda t: float(f(t)), 0, 1, epsabs=1e-14)
    assert abs(val) < 1e-12


def test_delta_library():
    tau = np.array([0.0, 0.5, 1.0])
    np.testing.assert_allclose(simulate.delta_curve("rising")(tau), [0.1, 0.2, 0.3])
    np.testing.assert_allclose(simulate.delta_curve("dip")(tau), [0.3, 0.15, 0.3], atol=1e-15)
    np.testing.assert_allclose(simulate.delta_curve("stable")(tau), 0.2)
    np.testing.assert_allclose(simulate.delta_curve("const:0.35")(tau), 0.35)
    with pytest.raises(ConfigError):
        simulate.delta_curve("wavy")


def test_spec_validation():
    with pytest.raises(ConfigError):
        simulate.DgpSpec(n_groups=2)
    with pytest.raises(ConfigError):
        simulate.DgpSpec(noise_sd=-1.0)
    with pytest.raises(ConfigError):
        simulate.DgpSpec(n_groups=2, proportions=(0.5, 0.6), delta_shapes=("stable",) * 2,
                         omega_shapes=("sin",) * 2, cs_levels=(0.4, 0.4), mu_levels=(0.1, 0.1))


@given(st.integers(1, 200))
def test_group_sizes_sum(N):
    spec = simulate.grouped_spec(3.0, n_countries=max(N, 3))
    sizes = spec.group_sizes()
    assert sizes.sum() == max(N, 3) and np.all(np.abs(sizes - np.array(spec.proportions) * max(N, 3)) < 1)


def test_text_roundtrip():
    spec = simulate.grouped_spec(2.5, seed=4)
    lines = dict(line.split(" = ", 1) for line in spec.to_text().splitlines())
    assert simulate.DgpSpec.from_mapping(lines) == spec
    with pytest.raises(ConfigError):
        simulate.DgpSpec.from_mapping({"bogus": "1"})
    with pytest.raises(ConfigError):
        simulate.DgpSpec.from_mapping({"n_countries": "many"})


def test_noiseless_identity():
    spec = simulate.DgpSpec(delta_shapes=("const:0.3",), omega_amplitude=0.0, noise_sd=0.0,
                            mu_sd=0.0, seed=2)
    ds, truth = simulate.generate(spec)
    f = ds.frame
    mu = f["country"].map(truth.mu).to_numpy()
    np.testing.assert_allclose(f["top5"], 0.3 * f["capital_share"] + mu, atol=1e-15)
    np.testing.assert_array_equal(f["capital_share"], truth.true_cs)


def test_measurement_error_scale():
    spec = simulate.DgpSpec(n_countries=100, n_years=40, measurement_sd=0.02, seed=3)
    ds, truth = simulate.generate(spec)
    e = ds.frame["capital_share"].to_numpy() - truth.true_cs
    n = e.size
    assert abs(e.mean()) < 3 * 0.02 / math.sqrt(n)
    assert abs(e.std() - 0.02) < 3 * 0.02 / math.sqrt(2 * n)


def test_determinism():
    spec = simulate.grouped_spec(3.0, seed=9)
    a, ta = simulate.generate(spec)
    b, tb = simulate.generate(spec)
    pd.testing.assert_frame_equal(a.frame, b.frame)
    np.testing.assert_array_equal(ta.true_cs, tb.true_cs)


def test_out_of_range_raises():
    with pytest.raises(DataError, match="admissible"):
        simulate.generate(simulate.DgpSpec(noise_sd=0.5, seed=1))


def test_missing_rate_unbalanced():
    ds, _ = simulate.generate(simulate.DgpSpec(missing_rate=0.2, seed=1))
    assert 0.7 * 2400 < ds.n_obs < 0.9 * 2400


def test_grouped_spec_clusters_recoverable():
    ds, truth = simulate.generate(simulate.grouped_spec(3.0, seed=5))
    fit, _ = classify(ds, 5, G=3, n_init=20)
    table = pd.crosstab(fit.labels, truth.labels.to_numpy()).to_numpy()
    r, c = linear_sum_assignment(-table)
    assert table[r, c].sum() / ds.n_countries >= 0.95


def test_replicate_single_run_matches_direct():
    spec = simulate.DgpSpec(n_countries=12, n_years=15, seed=3)
    study = simulate.replicate_study(spec, lambda d, t: simulate.tvc_pipeline(d, t, psi=(1.0, 1.0)), R=1)
    seed = simulate.replication_seeds(3, 1)[0]
    ds, truth = simulate.generate(simulate.DgpSpec(n_countries=12, n_years=15, seed=seed))
    direct = simulate.tvc_pipeline(ds, truth, psi=(1.0, 1.0))
    assert study.replications["average_effect"].iloc[0] == direct.average_effect[1]
    assert study.failure_rate == 0.0


def test_replicate_records_failures():
    spec = simulate.DgpSpec(n_countries=12, n_years=15)

    def flaky(ds, truth):
        raise RuntimeError("boom")

    study = simulate.replicate_study(spec, flaky, R=3)
    assert study.failure_rate == 1.0 and len(study.failures) == 3 and study.summary.empty


def test_replicate_seed_independent_of_workers():
    spec = simulate.DgpSpec(n_countries=10, n_years=12, seed=7)
    pipe = simulate.tvc_pipeline
    a = simulate.replicate_study(spec, pipe, R=2)
    b = simulate.replicate_study(spec, pipe, R=2, workers=2)
    pd.testing.assert_frame_equal(a.replications, b.replications)


def test_noiseless_rmise_small():
    spec = simulate.grouped_spec(3.0, noise_sd=0.0, seed=1)
    study = simulate.replicate_study(spec, simulate.tvc_pipeline, R=1)
    assert (study.summary["rmise"] < 1e-3).all()


@pytest.mark.slow
def test_rmise_shrinks_with_N():
    wins = 0
    pairs = 50
    for k in range(pairs):
        small = simulate.replicate_study(simulate.DgpSpec(n_countries=20, n_years=20, delta_shapes=("dip",)),
                                         simulate.tvc_pipeline, R=1, seed=k)
        big = simulate.replicate_study(simulate.DgpSpec(n_countries=40, n_years=20, delta_shapes=("dip",)),
                                       simulate.tvc_pipeline, R=1, seed=k)
        if len(small.summary) and len(big.summary):
            wins += big.summary["rmise"].iloc[0] < small.summary["rmise"].iloc[0]
    assert wins >= 0.7 * pairs


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_top_share_ordering(seed):
    ds, _ = simulate.generate(simulate.DgpSpec(n_countries=5, n_years=5, seed=seed))
    f = ds.frame
    assert ((f["top1"] < f["top5"]) & (f["top5"] < f["top10"]) & (f["top10"] < 1)).all()
