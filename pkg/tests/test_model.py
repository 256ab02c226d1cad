import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pivem.graph import EventGraph
from pivem.model import (ModelState, check_bounds, integrate_intensity, integrate_intervals,
                         intensity, load_checkpoint, log_likelihood, log_likelihood_grad,
                         piecewise_approximation_error, position, precompute_coefficients,
                         save_checkpoint, segment_integral)
from pivem.prior import PriorState
from oracles import (central_difference, loop_intensity, loop_position, naive_log_likelihood,
                     quad_integral, random_graph, random_model)


def model_1d(x0, v, horizon=1.0, beta=None):
    v = np.asarray(v, float)
    n = 1 if np.ndim(x0) == 1 else len(x0)
    x0 = np.asarray(x0, float).reshape(n, -1)
    return ModelState(np.zeros(n) if beta is None else beta, x0,
                      v.reshape(v.shape[0], n, -1), horizon)


# -- positions

def test_static_position():
    rng = np.random.default_rng(0)
    m = random_model(rng)
    m = ModelState(m.beta, m.x0, np.zeros_like(m.v))
    for t in (0, 0.3, 1.0):
        assert np.array_equal(position(m, 1, t), m.x0[1])


def test_linear_motion():
    m = model_1d([0.0, 0.0], [[1.0, 0.0]])
    assert np.allclose(position(m, 0, 0.5), [0.5, 0.0])


def test_two_bin_hand_value():
    m = model_1d([0.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]])
    assert np.allclose(position(m, 0, 0.75), [0.25, 0.0])


def test_position_at_horizon_is_last_bin_end():
    rng = np.random.default_rng(2)
    m = random_model(rng, b=4)
    assert np.allclose(position(m, 2, 1.0), m.x0[2] + 0.25 * m.v[:, 2].sum(0), atol=1e-14)


def test_position_out_of_range():
    m = random_model(np.random.default_rng(0))
    with pytest.raises(ValueError):
        position(m, 0, 1.01)
    with pytest.raises(ValueError):
        position(m, 0, -0.01)


@pytest.mark.parametrize("seed", range(5))
def test_continuity_at_boundaries(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, b=6)
    starts = m.bin_starts()
    w = m.bin_width
    for b in range(1, m.num_bins):
        right = position(m, 0, b * w)
        left = starts[b - 1, 0] + w * m.v[b - 1, 0]
        assert np.allclose(right, left, atol=1e-12, rtol=0)


def test_position_matches_bin_walk():
    rng = np.random.default_rng(3)
    m = random_model(rng, b=5)
    for t in rng.uniform(0, 1, 30):
        assert np.allclose(position(m, 1, t), loop_position(m, 1, t), atol=1e-13)


# -- intensity

def test_intensity_unit():
    m = ModelState.zeros(2, 2, 3)
    assert intensity(m, 0, 1, 0.4) == 1.0


def test_intensity_half():
    m = ModelState(np.zeros(2), [[0.0, 0.0], [np.sqrt(np.log(2)), 0.0]], np.zeros((1, 2, 2)))
    assert intensity(m, 0, 1, 0.2) == pytest.approx(0.5, rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_intensity_symmetric_and_compositional(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    for t in rng.uniform(0, 1, 10):
        assert intensity(m, 0, 2, t) == intensity(m, 2, 0, t)
        assert intensity(m, 0, 2, t) == pytest.approx(loop_intensity(m, 0, 2, t), rel=1e-13)


def test_intensity_same_node():
    with pytest.raises(ValueError):
        intensity(ModelState.zeros(2, 2, 1), 1, 1, 0.5)


# -- integrals

def test_integral_constant_unit():
    assert integrate_intensity(ModelState.zeros(2, 2, 4), 0, 1, 0.0, 1.0) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_integral_vs_quadrature(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=3, b=int(rng.integers(1, 6)), vscale=rng.choice([0.1, 1.0, 3.0]))
    lo, hi = np.sort(rng.uniform(0, 1, 2))
    got = integrate_intensity(m, 0, 1, lo, hi)
    assert got == pytest.approx(quad_integral(m, 0, 1, lo, hi), rel=1e-9)


def test_integral_additive():
    rng = np.random.default_rng(1)
    m = random_model(rng, b=4)
    whole = integrate_intensity(m, 0, 3, 0.1, 0.9)
    parts = integrate_intensity(m, 0, 3, 0.1, 0.37) + integrate_intensity(m, 0, 3, 0.37, 0.9)
    assert whole == pytest.approx(parts, abs=1e-12)


def test_integral_reversed_interval():
    with pytest.raises(ValueError):
        integrate_intensity(ModelState.zeros(2, 2, 1), 0, 1, 0.5, 0.4)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([0.0, 1e-12, 1e-9, 1e-6, 1e-3, 0.5, 4.0]),
       st.floats(-2, 2), st.floats(0, 1), st.floats(0, 1))
def test_segment_integral_positive_and_accurate(dx, beta, speed, angle, a, b):
    s0, s1 = min(a, b), max(a, b)
    dxv = np.array([dx, 0.3])
    dvv = speed * np.array([np.cos(angle), np.sin(angle)])
    got = float(segment_integral(np.array(beta), dxv, dvv, np.array(s0), np.array(s1)))
    from scipy.integrate import quad
    ref = quad(lambda s: np.exp(beta - np.sum((dxv + dvv * s) ** 2)), s0, s1,
               epsabs=0, epsrel=1e-13)[0]
    assert got >= 0
    assert got == pytest.approx(ref, rel=1e-7, abs=1e-300)


def test_segment_moments_match_quadrature():
    from scipy.integrate import quad
    rng = np.random.default_rng(5)
    for _ in range(20):
        dx, dv = rng.normal(size=2), rng.normal(size=2) * rng.choice([1e-4, 1.0])
        out = segment_integral(np.array(0.2), dx, dv, np.array(0.0), np.array(0.7), moments=True)
        for k in range(3):
            ref = quad(lambda s: s ** k * np.exp(0.2 - np.sum((dx + dv * s) ** 2)), 0, 0.7,
                       epsabs=0, epsrel=1e-13)[0]
            assert float(out[k]) == pytest.approx(ref, rel=1e-9)


def test_integrate_intervals_matches_scalar():
    rng = np.random.default_rng(4)
    m = random_model(rng, n=5, b=3)
    src, dst = np.array([0, 1, 2]), np.array([4, 3, 0])
    lo, hi = np.array([0.0, 0.2, 0.5]), np.array([1.0, 0.3, 0.5])
    vec = integrate_intervals(m, src, dst, lo, hi)
    for k in range(3):
        assert vec[k] == pytest.approx(integrate_intensity(m, src[k], dst[k], lo[k], hi[k]), rel=1e-14)
    assert vec[2] == 0.0


def test_extrapolation_continues_last_velocity():
    m = model_1d([[0.0], [1.0]], [[[0.0], [0.0]], [[0.5], [0.0]]])
    # beyond T the dyad keeps closing the gap at speed 0.5
    got = integrate_intervals(m, [0], [1], [1.0], [1.5], extrapolate=True)[0]
    from scipy.integrate import quad
    ref = quad(lambda t: np.exp(-(1.0 - 0.25 - 0.5 * (t - 1.0)) ** 2), 1.0, 1.5, epsrel=1e-13)[0]
    assert got == pytest.approx(ref, rel=1e-10)
    with pytest.raises(ValueError):
        integrate_intervals(m, [0], [1], [1.0], [1.5])


# -- coefficients and likelihood

def test_coefficients_hand_value():
    g = EventGraph.from_events(2, [0], [1], [0.25], horizon=1.0)
    c = precompute_coefficients(g, 2)
    cnt, a1, a2 = c.lookup(np.array([0]), np.array([1]))
    assert cnt[0].tolist() == [1, 0]
    assert a1[0, 0] == pytest.approx(0.25) and a2[0, 0] == pytest.approx(0.0625)


def test_coefficients_empty():
    g = EventGraph.from_events(3, [], [], [], horizon=1.0)
    c = precompute_coefficients(g, 3)
    assert len(c.keys) == 0 and c.total_events == 0


def test_coefficients_bin_start_events():
    g = EventGraph.from_events(2, [0, 0], [1, 1], [0.5, 0.5], horizon=1.0)
    cnt, a1, a2 = precompute_coefficients(g, 2).lookup(np.array([0]), np.array([1]))
    assert cnt[0, 1] == 2 and a1[0, 1] == 0 and a2[0, 1] == 0


@pytest.mark.parametrize("seed", range(5))
def test_coefficient_invariants(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 6, 80)
    c = precompute_coefficients(g, 4)
    assert np.all(c.alpha2 >= 0)
    assert np.all(c.alpha1 ** 2 <= c.counts * c.alpha2 * (1 + 1e-12) + 1e-15)
    assert c.counts.sum() == g.num_events


def test_likelihood_survival_only():
    rng = np.random.default_rng(0)
    m = random_model(rng, n=2)
    g = EventGraph.from_events(2, [], [], [], horizon=1.0)
    ll = log_likelihood(m, precompute_coefficients(g, m.num_bins), [(0, 1)])
    assert ll == pytest.approx(-integrate_intensity(m, 0, 1, 0, 1), rel=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_likelihood_matches_naive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    m = random_model(rng, n=n, b=int(rng.integers(1, 6)))
    g = random_graph(rng, n, int(rng.integers(0, 120)))
    ll = log_likelihood(m, precompute_coefficients(g, m.num_bins))
    assert ll == pytest.approx(naive_log_likelihood(m, g), rel=1e-10)


def test_likelihood_bias_shift():
    rng = np.random.default_rng(1)
    m = random_model(rng, n=4)
    m = ModelState(m.beta, m.x0, np.zeros_like(m.v))
    g = random_graph(rng, 4, 50)
    coeffs = precompute_coefficients(g, m.num_bins)
    c = 1.7
    shifted = ModelState(m.beta + np.log(c), m.x0, m.v)
    ll0, ll1 = log_likelihood(m, coeffs), log_likelihood(shifted, coeffs)
    # event term moves by 2 log c per event, integral scales by c^2
    integral = sum(integrate_intensity(m, i, j, 0, 1) for i in range(4) for j in range(i + 1, 4))
    assert ll1 - ll0 == pytest.approx(g.num_events * 2 * np.log(c) - (c * c - 1) * integral, rel=1e-11)


def test_likelihood_dyad_validation():
    m = ModelState.zeros(3, 2, 1)
    coeffs = precompute_coefficients(EventGraph.from_events(3, [0], [1], [0.5], horizon=1.0), 1)
    with pytest.raises(ValueError):
        log_likelihood(m, coeffs, [(0, 5)])
    with pytest.raises(ValueError):
        log_likelihood(m, precompute_coefficients(
            EventGraph.from_events(3, [0], [1], [0.5], horizon=1.0), 2))


@pytest.mark.parametrize("seed", range(4))
def test_likelihood_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=4, b=3)
    g = random_graph(rng, 4, 60)
    coeffs = precompute_coefficients(g, 3)
    dyads = [(0, 1), (1, 3), (2, 3)]
    _, grads = log_likelihood_grad(m, coeffs, dyads)
    fd = {
        "beta": central_difference(lambda b: log_likelihood(ModelState(b, m.x0, m.v), coeffs, dyads), m.beta),
        "x0": central_difference(lambda x: log_likelihood(ModelState(m.beta, x, m.v), coeffs, dyads), m.x0),
        "v": central_difference(lambda v: log_likelihood(ModelState(m.beta, m.x0, v), coeffs, dyads), m.v),
    }
    for k in fd:
        err = np.max(np.abs(grads[k] - fd[k])) / max(np.max(np.abs(fd[k])), 1e-12)
        assert err < 1e-6, k


def test_gradient_zero_for_absent_node():
    rng = np.random.default_rng(0)
    m = random_model(rng, n=4)
    coeffs = precompute_coefficients(random_graph(rng, 4, 30), m.num_bins)
    _, grads = log_likelihood_grad(m, coeffs, [(0, 1), (1, 2)])
    assert grads["beta"][3] == 0.0
    assert np.all(grads["v"][:, 3] == 0.0)


# -- bounds

def test_bound_constant_distance_analytic():
    d2 = 0.8
    m = ModelState(np.zeros(2), [[0.0, 0.0], [np.sqrt(d2), 0.0]], np.zeros((3, 2, 2)))
    rep = check_bounds(m)
    p0 = np.exp(-np.exp(-d2))
    assert rep.lower[0] == pytest.approx(np.log(1 / -np.log(p0)), rel=1e-12)
    assert rep.lower[0] == pytest.approx(d2, rel=1e-12)
    assert rep.mean_sq_dist[0] == pytest.approx(d2, rel=1e-12)
    assert rep.num_violations == 0


def test_bound_far_dyad_skipped():
    m = ModelState(np.full(2, -400.0), [[0.0], [30.0]], np.zeros((1, 2, 1)))
    rep = check_bounds(m)
    assert rep.skipped[0] and np.isnan(rep.lower[0])
    assert rep.num_violations == 0


@pytest.mark.parametrize("seed", range(10))
def test_bound_sandwich_random(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=6, b=5, vscale=2.0)
    lo, hi = np.sort(rng.uniform(0, 1, 2))
    rep = check_bounds(m, interval=(lo, hi + 1e-3) if hi + 1e-3 <= 1 else (lo, 1.0))
    ok = ~rep.skipped
    assert np.all(rep.lower[ok] <= rep.mean_sq_dist[ok] * (1 + 1e-9) + 1e-12)
    assert np.all(rep.mean_sq_dist[ok] <= rep.upper[ok] * (1 + 1e-9) + 1e-12)
    assert rep.num_violations == 0


def test_bound_counts_events():
    g = EventGraph.from_events(3, [0, 0, 1], [1, 1, 2], [0.1, 0.2, 0.9], horizon=1.0)
    rep = check_bounds(ModelState.zeros(3, 2, 2), g, interval=(0.0, 0.5))
    assert rep.counts.tolist() == [2, 0, 0]


# -- piecewise approximation

def test_linear_curve_exact():
    t = np.linspace(0, 1, 101)
    assert piecewise_approximation_error(t, 3 * t - 1, 1) < 1e-14
    assert piecewise_approximation_error(t, 3 * t - 1, 7) < 1e-14


def test_sine_error_decreases():
    t = np.linspace(0, 1, 2 ** 12 + 1)
    errs = [piecewise_approximation_error(t, np.sin(2 * np.pi * t), b) for b in (4, 8, 16)]
    assert errs[0] > errs[1] > errs[2]


def test_approximation_needs_samples():
    with pytest.raises(ValueError):
        piecewise_approximation_error(np.linspace(0, 1, 4), np.zeros(4), 4)


# -- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = random_model(rng, n=3, b=4)
    prior = PriorState(2.0, 0.3, 0.2, 1.5, rng.normal(size=(3, 2)))
    save_checkpoint(tmp_path / "c.json", m, prior, {"lambda": 2.0})
    m2, p2, extra = load_checkpoint(tmp_path / "c.json")
    assert np.array_equal(m.v, m2.v) and np.array_equal(m.x0, m2.x0)
    assert np.array_equal(m.beta, m2.beta) and m2.horizon == m.horizon
    assert np.array_equal(p2.q_raw, prior.q_raw) and p2.lam == 2.0
    assert extra == {"lambda": 2.0}


def test_checkpoint_schema_checked(tmp_path):
    (tmp_path / "c.json").write_text('{"schema_version": 99}')
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(tmp_path / "c.json")


def test_model_state_validation():
    with pytest.raises(ValueError):
        ModelState(np.zeros(2), np.zeros((2, 2)), np.zeros((1, 3, 2)))
    with pytest.raises(ValueError):
        ModelState(np.array([np.nan, 0]), np.zeros((2, 2)), np.zeros((1, 2, 2)))
