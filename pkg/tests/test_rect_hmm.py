import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import erfc

from actatlas.errors import AtlasError
from actatlas.rect_hmm import (RectHmm, censored_moments, forward_backward,
                               hmm_em_fit, init_hmm, layer_log_emissions,
                               rg_log_emission, viterbi)
from actatlas.synth import SynthSpec, sample_store
from conftest import brute_force_chain, hungarian_match


def _random_model(rng, ks, ds):
    t1 = rng.dirichlet(np.ones(ks[0]))
    log_trans = []
    for l in range(len(ks) - 1):
        t = rng.dirichlet(np.ones(ks[l + 1]), size=ks[l]).T  # (K^{l+1}, K^l)
        log_trans.append(np.log(t))
    mus = [rng.normal(size=(k, d)) for k, d in zip(ks, ds)]
    sigmas = [rng.uniform(0.5, 1.5, size=(k, d)) for k, d in zip(ks, ds)]
    m = RectHmm(np.log(t1), log_trans, mus, sigmas,
                [f"l{i}" for i in range(len(ks))])
    m.validate()
    return m


def _random_obs(rng, model):
    return [np.maximum(rng.normal(size=d), 0.0) for d in
            [mu.shape[1] for mu in model.mus]]


# -- emission density ------------------------------------------------------


def test_emission_zero_is_censored_mass():
    # mu = 0: half the Gaussian mass is below zero
    assert rg_log_emission(0.0, 1.0, 0.0) == pytest.approx(np.log(0.5), abs=1e-12)
    # mu = -3, sigma = 1: Phi(3) via the complementary error function
    expected = np.log(0.5 * erfc(-3.0 / np.sqrt(2.0)))
    assert rg_log_emission(-3.0, 1.0, 0.0) == pytest.approx(expected, abs=1e-12)
    assert rg_log_emission(-3.0, 1.0, 0.0) == pytest.approx(-0.001350, abs=1e-6)


def test_emission_positive_is_gaussian_logpdf():
    # x = mu: the mode, log pdf = -log(sigma * sqrt(2 pi))
    assert rg_log_emission(1.0, 1.0, 1.0) == pytest.approx(
        -0.5 * np.log(2 * np.pi), abs=1e-12)
    assert rg_log_emission(1.0, 1.0, 1.0) == pytest.approx(-0.918939, abs=1e-6)


def test_emission_rejects_negative_observation():
    with pytest.raises(AtlasError, match="negative"):
        rg_log_emission(0.0, 1.0, -0.1)
    with pytest.raises(AtlasError, match="negative"):
        layer_log_emissions(
            _random_model(np.random.default_rng(0), [2], [3]), 0,
            np.array([[0.1, -0.2, 0.0]]))


def test_normalization_by_quadrature():
    # Phi(-mu/sigma) + integral over (0, inf) of the Gaussian pdf == 1
    rng = np.random.default_rng(42)
    for _ in range(100):
        mu = rng.uniform(-3, 3)
        sigma = rng.uniform(0.2, 3.0)
        mass0 = np.exp(rg_log_emission(mu, sigma, 0.0))
        dens, _ = quad(lambda x: np.exp(rg_log_emission(mu, sigma, x)),
                       1e-12, np.inf)
        assert abs(mass0 + dens - 1.0) < 1e-6


def test_censored_moments_match_monte_carlo():
    mu, sigma = 1.0, 2.0
    rng = np.random.default_rng(0)
    y = rng.normal(mu, sigma, size=10**6)
    y = y[y <= 0]
    m1, m2 = censored_moments(mu, sigma)
    se1 = y.std() / np.sqrt(len(y))
    se2 = (y**2).std() / np.sqrt(len(y))
    assert abs(m1 - y.mean()) < 3 * se1
    assert abs(m2 - (y**2).mean()) < 3 * se2


def test_censored_moments_deep_tail_finite():
    m1, m2 = censored_moments(np.array([30.0]), np.array([1.0]))
    assert np.all(np.isfinite(m1)) and np.all(np.isfinite(m2))
    assert m1[0] < 0  # conditioned on y <= 0


# -- inference vs exhaustive enumeration -----------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_forward_backward_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    ks = list(rng.integers(2, 5, size=rng.integers(2, 4)))
    ds = list(rng.integers(1, 4, size=len(ks)))
    model = _random_model(rng, ks, ds)
    xs = _random_obs(rng, model)
    ll_bf, path_bf, joint_bf = brute_force_chain(model, xs)
    gammas, xis, ll = forward_backward(model, xs)
    assert ll == pytest.approx(ll_bf, abs=1e-9)
    for g in gammas:
        assert g.sum() == pytest.approx(1.0, abs=1e-9)
    for xi in xis:
        assert xi.sum() == pytest.approx(1.0, abs=1e-9)
    # pairwise posteriors marginalize to the layer posteriors
    for l, xi in enumerate(xis):
        np.testing.assert_allclose(xi.sum(axis=0), gammas[l], atol=1e-9)
        np.testing.assert_allclose(xi.sum(axis=1), gammas[l + 1], atol=1e-9)
    vp = viterbi(model, xs)
    assert vp.states == path_bf
    assert vp.log_joint == pytest.approx(joint_bf, abs=1e-9)
    assert vp.log_joint <= ll + 1e-9
    assert vp.log_posterior == pytest.approx(joint_bf - ll_bf, abs=1e-9)


def test_viterbi_tie_break_lowest_index():
    # two symmetric states with identical emissions: path (0, 0) wins
    model = RectHmm(np.log([0.5, 0.5]),
                    [np.log(np.full((2, 2), 0.5))],
                    [np.zeros((2, 1)), np.zeros((2, 1))],
                    [np.ones((2, 1)), np.ones((2, 1))],
                    ["a", "b"])
    assert viterbi(model, [np.array([0.3]), np.array([0.7])]).states == (0, 0)


def test_single_layer_chain():
    rng = np.random.default_rng(3)
    model = _random_model(rng, [3], [2])
    xs = _random_obs(rng, model)
    ll_bf, path_bf, _ = brute_force_chain(model, xs)
    _, xis, ll = forward_backward(model, xs)
    assert xis == []
    assert ll == pytest.approx(ll_bf, abs=1e-12)
    assert viterbi(model, xs).states == path_bf


# -- EM --------------------------------------------------------------------


def test_hmm_em_monotone_and_k1_degenerate(tmp_path):
    spec = SynthSpec("rect-hmm", seed=5, n_examples=400,
                     layer_sizes=(2, 2), layer_dims=(3, 3), separation=2.0)
    store, _ = sample_store(spec, tmp_path / "s")
    xs = [store.layer("fc1"), store.layer("fc2")]
    model = init_hmm(xs, [2, 2], seed=0)
    model, nll = hmm_em_fit(model, xs, epochs=10)
    assert np.all(np.diff(nll) <= 1e-6)
    # K = 1 everywhere: transitions stay degenerate at probability 1
    m1 = init_hmm(xs, [1, 1], seed=0)
    m1, _ = hmm_em_fit(m1, xs, epochs=3)
    assert m1.log_t1[0] == pytest.approx(0.0, abs=1e-12)
    assert m1.log_trans[0][0, 0] == pytest.approx(0.0, abs=1e-12)


def test_hmm_em_recovery(tmp_path):
    spec = SynthSpec("rect-hmm", seed=7, n_examples=5000,
                     layer_sizes=(2, 2), layer_dims=(3, 3), separation=4.0)
    store, truth = sample_store(spec, tmp_path / "s")
    xs = [store.layer("fc1"), store.layer("fc2")]
    model = init_hmm(xs, [2, 2], seed=1)
    model, nll = hmm_em_fit(model, xs, epochs=60)
    assert np.all(np.diff(nll) <= 1e-6)
    true = truth["hmm"]
    perms = [hungarian_match(model.mus[l], true.mus[l]) for l in range(2)]
    for l in range(2):
        err = np.max(np.abs(model.mus[l][perms[l]] - true.mus[l]))
        assert err < 0.1, f"layer {l} mean error {err}"
    est_t = np.exp(model.log_trans[0])[np.ix_(perms[1], perms[0])]
    assert np.max(np.abs(est_t - np.exp(true.log_trans[0]))) < 0.05
    est_t1 = np.exp(model.log_t1)[perms[0]]
    assert np.max(np.abs(est_t1 - np.exp(true.log_t1))) < 0.05


def test_hmm_online_mode_runs(tmp_path):
    spec = SynthSpec("rect-hmm", seed=9, n_examples=600,
                     layer_sizes=(2, 2), layer_dims=(2, 2), separation=3.0)
    store, _ = sample_store(spec, tmp_path / "s")
    xs = [store.layer("fc1"), store.layer("fc2")]
    m0 = init_hmm(xs, [2, 2], seed=0)
    mo, nll = hmm_em_fit(m0, xs, epochs=8, mode="online", minibatch=64)
    mo.validate()
    assert nll[-1] < nll[0]


def test_negative_inputs_clamped_with_warning():
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=(50, 2))]  # contains negatives
    model = _random_model(rng, [2], [2])
    with pytest.warns(UserWarning, match="clamped"):
        hmm_em_fit(model, xs, epochs=1)
