import json
import math

import numpy as np
import pytest
from scipy.special import log_expit

from cornermark.model import (MarkingBinGrid, PreparedSequence, TransitionWeights,
                              forward_backward, log_transition_matrices, sequence_loglik)
from cornermark.training import (BetaStats, EmConfig, ModelFormatError, SufficientStats,
                                 batch_train, e_step, em_fit, initialize, load_model,
                                 m_step_beta, m_step_gamma, m_step_pi, m_step_zones,
                                 params_equal, q_gradients, q_transition, q_transition_parts,
                                 save_model)

PEN = (100.0, 100.0, 1000.0)


def random_xi(rng, R, K, sparsity=0.3):
    """Posterior-like transition counts with the man -> zonal block empty."""
    N = K + 1
    xi = rng.dirichlet(np.ones(N * N) * 0.5, size=R).reshape(R, N, N)
    xi[:, :K, K] = 0.0
    xi *= rng.random((R, N, N)) > sparsity
    return xi / np.maximum(xi.sum(axis=(1, 2), keepdims=True), 1e-300)


def random_stats(rng, R=40, K=None):
    K = K or int(rng.integers(2, 6))
    Xm = np.concatenate([np.ones((R, K, 1)), rng.normal(size=(R, K, 7))], axis=-1)
    Xs = np.concatenate([np.ones((R, K, 1)), rng.normal(size=(R, K, 7))], axis=-1)
    Xz = np.concatenate([np.ones((R, 1)), rng.normal(size=(R, 5))], axis=-1)
    xi = random_xi(rng, R, K)
    return BetaStats.from_posteriors(Xm, Xz, Xs, xi), (Xm, Xz, Xs, xi)


def literal_q(beta, Xm, Xz, Xs, xi, penalties=PEN):
    """Expected complete-data log-likelihood summed over every (i, n) entry."""
    la = log_transition_matrices(beta, Xm, Xz, Xs)
    mask = xi > 0
    q = float(np.sum(xi[mask] * la[mask]))
    lm, lz, ls = penalties
    return q - 0.5 * (lm * beta.m @ beta.m + lz * beta.z @ beta.z + ls * beta.s @ beta.s)


def test_reduced_q_equals_full_expectation(rng):
    for _ in range(30):
        bs, raw = random_stats(rng)
        beta = TransitionWeights.from_flat(rng.normal(0, 1.0, 22))
        assert q_transition(beta, bs, PEN) == pytest.approx(literal_q(beta, *raw), rel=1e-10, abs=1e-9)


def test_reduced_q_with_large_scores(rng):
    bs, raw = random_stats(rng, K=5)
    beta = TransitionWeights.from_flat(rng.normal(0, 15.0, 22))
    assert q_transition(beta, bs, PEN) == pytest.approx(literal_q(beta, *raw), rel=1e-9)


def fd_gradient(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_gradients_match_finite_differences(rng):
    for _ in range(25):
        bs, _ = random_stats(rng, R=30)
        x = rng.normal(0, 0.5, 22)
        g = q_gradients(TransitionWeights.from_flat(x), bs, PEN).flat()
        fd = fd_gradient(lambda v: q_transition(TransitionWeights.from_flat(v), bs, PEN), x)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(fd).max()))


def test_penalty_only_q(rng):
    bs, _ = random_stats(rng, K=3)
    empty = BetaStats(bs.Xm, bs.Xz, bs.Xs, *(np.zeros_like(getattr(bs, f)) for f in
                      ("man_a", "man_b", "zonal_a", "zonal_b", "switch_c", "switch_w", "switch_wN")))
    beta = TransitionWeights.from_flat(rng.normal(size=22))
    q = q_transition(beta, empty, PEN)
    assert q == pytest.approx(-0.5 * (100 * beta.m @ beta.m + 100 * beta.z @ beta.z + 1000 * beta.s @ beta.s))
    g = q_gradients(beta, empty, PEN)
    np.testing.assert_allclose(g.m, -100 * beta.m)
    np.testing.assert_allclose(g.s, -1000 * beta.s)
    new = m_step_beta(empty, beta, EmConfig())
    assert np.abs(new.flat()).max() < 1e-6


def test_zero_weights_evaluate_data_terms_at_half(rng):
    bs, raw = random_stats(rng, K=4)
    parts = q_transition_parts(TransitionWeights.zeros(), bs)
    xi = raw[3]
    K = 4
    expect_m = math.log(0.5) * xi[:, :K, :K].trace(axis1=1, axis2=2).sum() + \
        math.log(0.5) * (xi[:, :K, :K].sum() - xi[:, :K, :K].trace(axis1=1, axis2=2).sum())
    assert parts["m"][0] == pytest.approx(expect_m)
    assert q_transition(TransitionWeights.zeros(), bs, PEN) == pytest.approx(literal_q(TransitionWeights.zeros(), *raw))


def test_beta_step_improves_q_and_is_stationary_at_optimum(rng):
    bs, _ = random_stats(rng, R=200, K=4)
    b0 = TransitionWeights.from_flat(rng.normal(0, 0.1, 22))
    cfg = EmConfig(lambda_m=1.0, lambda_z=1.0, lambda_s=1.0)
    pen = cfg.penalties
    b1 = m_step_beta(bs, b0, cfg)
    assert q_transition(b1, bs, pen) >= q_transition(b0, bs, pen)
    np.testing.assert_allclose(q_gradients(b1, bs, pen).flat(), 0.0, atol=1e-4)
    b2 = m_step_beta(bs, b1, cfg)
    np.testing.assert_allclose(b2.flat(), b1.flat(), atol=1e-6)


def test_beta_step_matches_grid_search_on_zonal_slice(rng):
    R = 400
    x = rng.normal(size=R)
    p_stay = 1 / (1 + np.exp(-(1.5 - 2.0 * x)))
    Xz = np.zeros((R, 6))
    Xz[:, 0], Xz[:, 1] = 1.0, x
    a = p_stay                      # expected self-transition mass
    b = np.ones(R)
    K = 2
    bs = BetaStats(np.zeros((0, K, 8)), Xz, np.zeros((0, K, 8)), np.zeros((0, K)), np.zeros((0, K)),
                   a, b, np.zeros((0, K)), np.zeros((0, K)), np.zeros(0))
    cfg = EmConfig(lambda_z=1.0)
    fit = m_step_beta(bs, TransitionWeights.zeros(), cfg).z
    assert fit[0] > 0 and fit[1] < 0
    assert np.all(fit[2:] == 0)

    def qz(b0, b1):
        eta = b0 + b1 * x
        return np.sum(a * log_expit(eta) + (b - a) * log_expit(-eta)) - 0.5 * (b0 ** 2 + b1 ** 2)

    g0 = np.linspace(fit[0] - 0.05, fit[0] + 0.05, 101)
    g1 = np.linspace(fit[1] - 0.05, fit[1] + 0.05, 101)
    best = max(qz(u, v) for u in g0 for v in g1)
    assert qz(fit[0], fit[1]) >= best - 1e-6


# ---------------------------------------------------------------- closed forms

def zone_stats(records, K=2, B=1):
    st = SufficientStats(K, B)
    st.zone = np.array([r[0] for r in records])
    st.pair_loglik = np.array([r[1] for r in records], float)
    g = [np.asarray(r[2], float) for r in records]
    D = [np.asarray(r[3], float) for r in records]
    st.g0 = np.array([gi[0] for gi in g])
    st.g0D = np.array([gi[0] * Di[0] for gi, Di in zip(g, D)])
    st.gsum = np.array([gi.sum() for gi in g])
    st.gD = np.array([gi @ Di for gi, Di in zip(g, D)])
    st.gDD = np.array([np.einsum("t,td,te->de", gi, Di, Di) for gi, Di in zip(g, D)])
    return st


def test_zone_means_degenerate_and_symmetric(small_truth):
    p = small_truth
    x = np.array([-6.0, 2.0])
    st = zone_stats([(0, -1.0, [1.0, 1.0], [x, x]), (1, -1.0, [0.0, 0.0], [x, x])], K=3)
    means, covs = m_step_zones(st, p)
    np.testing.assert_allclose(means[0], x)
    np.testing.assert_array_equal(means[1], p.zone_means[1])     # no mass: unchanged
    np.testing.assert_allclose(covs[0], 1e-4 * np.eye(2))         # floored

    a, b = np.array([-8.0, 1.0]), np.array([-4.0, 3.0])
    st = zone_stats([(2, -5.0, [1.0], [a]), (2, -9.0, [1.0], [b])], K=3)
    np.testing.assert_allclose(m_step_zones(st, p)[0][2], (a + b) / 2)


def test_zone_update_formula(rng, small_truth):
    p = small_truth
    recs = [(int(rng.integers(3)), float(rng.normal(-50, 5)), rng.random(6), rng.normal(-5, 2, (6, 2)))
            for _ in range(12)]
    st = zone_stats(recs, K=3)
    for first, inv in ((False, False), (True, False), (False, True)):
        cfg = EmConfig(zone_means_first_frame=first, inverse_likelihood_weighting=inv)
        means, covs = m_step_zones(st, p, cfg)
        for z in range(3):
            rows = [r for r in recs if r[0] == z]
            if not rows:
                continue
            ll = np.array([r[1] for r in rows])
            w = np.exp(-ll - (-ll).max()) if inv else np.ones(len(rows))
            if first:
                mu = sum(wi * r[2][0] * r[3][0] for wi, r in zip(w, rows)) / sum(wi * r[2][0] for wi, r in zip(w, rows))
            else:
                mu = sum(wi * r[2] @ r[3] for wi, r in zip(w, rows)) / sum(wi * r[2].sum() for wi, r in zip(w, rows))
            S = sum(wi * np.einsum("t,td,te->de", r[2], r[3] - mu, r[3] - mu) for wi, r in zip(w, rows))
            S /= sum(wi * r[2].sum() for wi, r in zip(w, rows))
            np.testing.assert_allclose(means[z], mu, atol=1e-12)
            np.testing.assert_allclose(covs[z], S, atol=1e-12)


def gamma_stats(O, D, w, goal, grid):
    st = SufficientStats(1, grid.n_bins)
    bins = grid.bin_index(O)
    Op, Dp = O - goal, D - goal
    st.bin_w = np.bincount(bins, w, grid.n_bins)
    st.bin_oo = np.bincount(bins, w * np.sum(Op * Op, 1), grid.n_bins)
    st.bin_od = np.bincount(bins, w * np.sum(Op * Dp, 1), grid.n_bins)
    st.bin_dd = np.bincount(bins, w * np.sum(Dp * Dp, 1), grid.n_bins)
    return st


def test_gamma_endpoints(rng):
    grid = MarkingBinGrid.default()
    goal = np.array([-11.0, 0.0])
    O = rng.uniform([-10, -8], [0, 8], (200, 2))
    w = rng.random(200)
    cfg = EmConfig(gamma_o_bounds=(0.0, 1.0))
    on = m_step_gamma(gamma_stats(O, O, w, goal, grid), grid, cfg)
    used = np.bincount(grid.bin_index(O), minlength=grid.n_bins) > 0
    np.testing.assert_allclose(on.gamma_o.ravel()[used], 1.0, atol=1e-12)
    at_goal = m_step_gamma(gamma_stats(O, np.tile(goal, (200, 1)), w, goal, grid), grid, cfg)
    np.testing.assert_allclose(at_goal.gamma_o.ravel()[used], 0.0, atol=1e-12)
    np.testing.assert_allclose(on.gamma_g, 1.0 - on.gamma_o)


def test_gamma_beats_grid_search(rng):
    grid = MarkingBinGrid.default()
    goal = np.array([-11.0, 0.0])
    O = rng.uniform([-10, -8], [0, 8], (300, 2))
    D = goal + rng.uniform(0.3, 1.1, (300, 1)) * (O - goal) + rng.normal(0, 0.5, (300, 2))
    w = rng.random(300)
    st = gamma_stats(O, D, w, goal, grid)
    cfg = EmConfig()
    fit = m_step_gamma(st, grid, cfg)
    bins = grid.bin_index(O)
    lo, hi = cfg.gamma_o_bounds
    for b, nb in enumerate(grid.neighbourhood(1)):
        sel = np.isin(bins, nb)
        if not sel.any():
            continue

        def sse(g):
            r = D[sel] - goal - g * (O[sel] - goal)
            return float(np.sum(w[sel] * np.sum(r * r, 1)))

        g_hat = fit.gamma_o.ravel()[b]
        grid_best = min(sse(g) for g in np.linspace(lo, hi, 1000))
        assert sse(g_hat) <= grid_best + 1e-9
        assert fit.sigma2.ravel()[b] == pytest.approx(max(sse(g_hat) / (2 * w[sel].sum()), 1e-4))


def test_pi_update():
    st = SufficientStats(2, 1)
    st.pi_counts = np.array([3.0, 0.0, 1.0])
    pi = m_step_pi(st)
    assert pi.sum() == pytest.approx(1.0, abs=1e-15)
    assert pi[1] > 0


# ---------------------------------------------------------------- E-step and EM

def test_single_defender_stats_match_forward_backward(small_truth, small_synth):
    ds, _ = small_synth
    seq = ds[0]
    st = e_step(small_truth, ds.__class__((seq,)))
    post = [forward_backward(small_truth, seq, j) for j in range(seq.n_defenders)]
    np.testing.assert_allclose(st.pi_counts, sum(p.gamma[0] for p in post), atol=1e-12)
    assert st.loglik == pytest.approx(sequence_loglik(small_truth, seq), abs=1e-9)
    K = small_truth.K
    np.testing.assert_allclose(st.gsum, [p.gamma[:, K].sum() for p in post], atol=1e-12)


def test_total_loglik_is_sum_over_sequences(small_truth, small_synth):
    ds, _ = small_synth
    st = e_step(small_truth, ds)
    assert st.loglik == pytest.approx(sum(sequence_loglik(small_truth, s) for s in ds), abs=1e-9)
    assert st.n_frames == ds.total_frames


def test_zero_iterations_return_initialisation(small_synth):
    ds, _ = small_synth
    res = em_fit(ds, EmConfig(iterations=0), seed=3)
    init = initialize(3, 3, EmConfig(), "SYN", "inswing")
    np.testing.assert_array_equal(res.params.zone_means, init.zone_means)
    np.testing.assert_array_equal(res.params.beta.flat(), init.beta.flat())
    assert len(res.ll_trace) == 1


def test_initialisation_constants():
    p = initialize(0, 10)
    assert np.all((p.zone_means[:, 0] >= -10.5) & (p.zone_means[:, 0] <= -0.5))
    assert np.all(np.abs(p.zone_means[:, 1]) <= 9.16)
    np.testing.assert_array_equal(p.zone_covs, np.tile(2 * np.eye(2), (10, 1, 1)))
    assert np.all(p.grid.gamma_o == 0.8)
    np.testing.assert_allclose(p.pi, 1 / 11)


def test_em_objective_monotone_and_deterministic(small_synth):
    ds, _ = small_synth
    cfg = EmConfig(iterations=6)
    a = em_fit(ds, cfg, seed=1)
    assert np.all(np.diff(a.objective_trace) >= -1e-6)
    assert a.ll_trace[-1] > a.ll_trace[0]
    b = em_fit(ds, cfg, seed=1)
    assert params_equal(a.params, b.params)
    assert a.objective_trace == b.objective_trace


def test_batch_of_one_equals_single_fit(small_synth):
    ds, _ = small_synth
    cfg = EmConfig(iterations=2, batch_size=1, seed=4)
    bundle = batch_train(ds, cfg)
    single = em_fit(ds, cfg, seed=4)
    assert params_equal(bundle.params, single.params)
    assert bundle.best_seed == 4


def test_batch_keeps_highest_likelihood(small_synth):
    ds, _ = small_synth
    bundle = batch_train(ds, EmConfig(iterations=2, batch_size=3))
    best = int(np.argmax(bundle.final_logliks))
    assert bundle.best_seed == bundle.seeds[best]


def test_config_validation():
    with pytest.raises(ValueError):
        EmConfig(iterations=-1)
    with pytest.raises(ValueError, match="unknown"):
        EmConfig.from_dict({"iterations": 3, "learning_rate": 1})
    assert EmConfig.from_dict(EmConfig().to_dict()) == EmConfig()


# ---------------------------------------------------------------- model files

def test_model_round_trip(tmp_path, small_truth):
    path = tmp_path / "m.json"
    save_model(small_truth, path, EmConfig(), [1.0, 2.0])
    back = load_model(path)
    assert params_equal(back, small_truth)
    assert back.standardizer == small_truth.standardizer


def test_model_version_and_truncation(tmp_path, small_truth):
    path = tmp_path / "m.json"
    save_model(small_truth, path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    bad = tmp_path / "v.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="version"):
        load_model(bad)
    cut = tmp_path / "cut.json"
    cut.write_text(path.read_text()[:200])
    with pytest.raises(ModelFormatError):
        load_model(cut)
    doc["version"] = 1
    del doc["beta"]
    bad.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError):
        load_model(bad)


def test_prepared_sequence_reuse(small_truth, small_synth):
    ds, _ = small_synth
    preps = [PreparedSequence(s, small_truth.standardizer) for s in ds]
    assert e_step(small_truth, preps).loglik == pytest.approx(e_step(small_truth, ds).loglik, abs=1e-9)
