import itertools

import numpy as np
import pytest

from melanchor import clustering as cl


def test_kmeanspp_k_equals_n_is_permutation():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3))
    centers = cl.kmeanspp_init(X, 6, rng)
    rows = {tuple(r) for r in X}
    assert {tuple(r) for r in centers} == rows


def test_kmeanspp_k1_is_a_row():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10, 2))
    c = cl.kmeanspp_init(X, 1, rng)
    assert any(np.array_equal(c[0], r) for r in X)


def test_kmeanspp_skips_duplicates():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(4, 2))
    X = np.vstack([base, base])   # every row duplicated
    centers = cl.kmeanspp_init(X, 4, rng)
    uniq = {tuple(r) for r in centers}
    assert len(uniq) == 4


def test_kmeanspp_n_less_than_k_raises():
    with pytest.raises(ValueError):
        cl.kmeanspp_init(np.zeros((2, 2)), 3, np.random.default_rng(0))


def _brute_force_two_means(X):
    best = (np.inf, None)
    n = len(X)
    for bits in itertools.product([0, 1], repeat=n):
        bits = np.array(bits)
        if bits.sum() in (0, n):
            continue
        total = 0.0
        for b in (0, 1):
            pts = X[bits == b]
            total += ((pts - pts.mean(axis=0)) ** 2).sum()
        if total < best[0]:
            best = (total, bits)
    return best


def test_lloyd_matches_brute_force_partition():
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    model = cl.lloyd_fit(X, 2, iters=20, seed=0)
    assert sorted(model.centers.ravel().tolist()) == [0.5, 10.5]
    best_inertia, _ = _brute_force_two_means(X)
    assert abs(cl.inertia(X, model) - best_inertia) < 1e-12


def test_lloyd_identical_rows():
    X = np.ones((10, 2)) * 3.0
    model = cl.lloyd_fit(X, 2, iters=5, seed=0)
    assert cl.inertia(X, model) == 0.0


def test_lloyd_zero_iters_is_init():
    rng_x = np.random.default_rng(3)
    X = rng_x.normal(size=(20, 2))
    model = cl.lloyd_fit(X, 3, iters=0, seed=9)
    init = cl.kmeanspp_init(X, 3, np.random.default_rng(9))
    assert np.array_equal(model.centers, init)


@pytest.mark.parametrize("seed", range(5))
def test_lloyd_inertia_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(100, 3))
    vals = [cl.inertia(X, cl.lloyd_fit(X, 5, iters=i, seed=seed)) for i in range(6)]
    for a, b in zip(vals, vals[1:]):
        assert b <= a + 1e-9


def test_hard_labels_centers_map_to_selves():
    centers = np.random.default_rng(0).normal(size=(6, 3))
    model = cl.KmeansModel(centers)
    assert np.array_equal(cl.hard_labels(model, centers), np.arange(6))


def test_hard_labels_tie_breaks_low_index():
    centers = np.zeros((6, 1))
    centers[2] = -1.0
    centers[5] = 1.0
    centers[0] = 10.0
    centers[1] = 10.0
    centers[3] = 10.0
    centers[4] = 10.0
    model = cl.KmeansModel(centers)
    assert cl.hard_labels(model, np.array([[0.0]]))[0] == 2


def test_hard_labels_matches_brute_force():
    rng = np.random.default_rng(4)
    centers = rng.normal(size=(8, 4))
    X = rng.normal(size=(50, 4))
    model = cl.KmeansModel(centers)
    ids = cl.hard_labels(model, X)
    for i, x in enumerate(X):
        d = ((centers - x) ** 2).sum(axis=1)
        assert ids[i] == d.argmin()


# -- GMM -------------------------------------------------------------------

def _toy_gmm():
    return cl.GmmModel(
        log_pi=np.log([0.5, 0.5]),
        mu=np.array([[0.0], [2.0]]),
        log_var=np.zeros((2, 1)),
    )


def test_posterior_single_component():
    m = cl.GmmModel(np.array([0.0]), np.array([[1.0, 2.0]]), np.zeros((1, 2)))
    q = cl.gmm_posterior(m, np.array([5.0, -3.0]))
    assert np.allclose(q, [1.0])


def test_posterior_identical_components_symmetry():
    m = cl.GmmModel(np.log([0.5, 0.5]), np.zeros((2, 3)), np.zeros((2, 3)))
    q = cl.gmm_posterior(m, np.array([1.0, -2.0, 0.5]))
    assert np.allclose(q, [0.5, 0.5], atol=1e-12)


def test_posterior_density_ratio_case():
    # K=2, D=1, equal weights, mu=(0,2), unit var, m=0 -> 1/(1+e^-2)
    q = cl.gmm_posterior(_toy_gmm(), np.array([0.0]))
    assert abs(q[0] - 1.0 / (1.0 + np.exp(-2.0))) < 1e-12
    assert abs(q[0] - 0.88080) < 1e-5


def test_posterior_rows_normalized_log_space():
    lp = cl.gmm_log_posterior(_toy_gmm(), np.array([[0.0], [50.0], [-50.0]]))
    lse = np.logaddexp.reduce(lp, axis=1)
    assert np.abs(lse).max() < 1e-9
    # 50 sigma outlier still yields a valid distribution
    assert np.exp(lp).sum(axis=1).min() > 0.999999


def test_posterior_dim_mismatch():
    with pytest.raises(ValueError):
        cl.gmm_log_posterior(_toy_gmm(), np.array([0.0, 1.0]))


def test_chunked_identity_when_unchunked():
    rng = np.random.default_rng(0)
    m = cl.GmmModel(np.log(np.ones(4) / 4), rng.normal(size=(4, 3)),
                    rng.normal(size=(4, 3)) * 0.1)
    X = rng.normal(size=(17, 3))
    direct = cl.gmm_posterior(m, X)
    q = cl.chunked_soft_assign(m, X, batch_size=17, chunk_k=4).q
    assert np.abs(q - direct).max() < 1e-15


def test_chunked_invariant_to_chunking():
    rng = np.random.default_rng(1)
    m = cl.GmmModel(np.log(np.ones(8) / 8), rng.normal(size=(8, 5)),
                    rng.normal(size=(8, 5)) * 0.2)
    X = rng.normal(size=(64, 5))
    direct = cl.gmm_posterior(m, X)
    for _ in range(20):
        bs = int(rng.integers(1, 65))
        ck = int(rng.integers(1, 9))
        q = cl.chunked_soft_assign(m, X, bs, ck).q
        assert np.abs(q - direct).max() < 1e-10


def test_chunked_empty_input():
    m = _toy_gmm()
    q = cl.chunked_soft_assign(m, np.empty((0, 1)), 4, 1).q
    assert q.shape == (0, 2)


def test_gmm_fit_single_gaussian_recovers_mean():
    rng = np.random.default_rng(0)
    X = rng.normal(loc=3.0, scale=1.0, size=(5000, 2))
    model, _ = cl.gmm_fit_minibatch(X, K=1, epochs=100, seed=0)
    se = X.std(axis=0) / np.sqrt(len(X))
    assert np.all(np.abs(model.mu[0] - X.mean(axis=0)) < 3 * se + 0.05)


def test_gmm_fit_two_blobs():
    rng = np.random.default_rng(1)
    a = rng.normal(loc=[-4.0, 0.0], size=(5000, 2))
    b = rng.normal(loc=[4.0, 1.0], size=(5000, 2))
    X = np.vstack([a, b])
    model, report = cl.gmm_fit_minibatch(X, K=2, epochs=40, seed=1)
    order = np.argsort(model.mu[:, 0])
    assert np.abs(model.mu[order[0]] - [-4.0, 0.0]).max() < 0.1
    assert np.abs(model.mu[order[1]] - [4.0, 1.0]).max() < 0.1
    assert report.final_held_out_ll > -5.0


def test_gmm_fit_lr_zero_noop():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 2))
    m1, _ = cl.gmm_fit_minibatch(X, K=3, epochs=3, lr_start=0.0, lr_end=0.0, seed=5)
    m2, _ = cl.gmm_fit_minibatch(X, K=3, epochs=0, seed=5)
    assert np.array_equal(m1.mu, m2.mu)
    assert np.array_equal(m1.log_var, m2.log_var)
    assert np.array_equal(m1.log_pi, m2.log_pi)


def test_frozen_model_rejects_mutation():
    m = _toy_gmm().freeze()
    with pytest.raises(cl.FrozenModelError):
        m.mu = np.zeros((2, 1))
    with pytest.raises((ValueError, RuntimeError)):
        m.mu[0, 0] = 5.0


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    m = cl.GmmModel(np.log(np.ones(4) / 4), rng.normal(size=(4, 6)),
                    rng.normal(size=(4, 6)))
    p = tmp_path / "gmm.bin"
    cl.save_targets(p, m, metadata={"seed": 3, "epochs": 7})
    back = cl.load_targets(p)
    assert np.array_equal(back.mu, m.mu)
    assert np.array_equal(back.log_pi, m.log_pi)
    assert np.array_equal(back.log_var, m.log_var)
    assert back.frozen
    import json
    meta = json.loads((tmp_path / "gmm.bin.json").read_text())
    assert meta["epochs"] == 7

    km = cl.KmeansModel(rng.normal(size=(5, 2)))
    p2 = tmp_path / "km.bin"
    cl.save_targets(p2, km)
    back2 = cl.load_targets(p2)
    assert np.array_equal(back2.centers, km.centers)


def test_save_refit_bit_identical(tmp_path):
    rng = np.random.default_rng(4)
    X = rng.normal(size=(400, 3))
    m1, _ = cl.gmm_fit_minibatch(X, K=2, epochs=2, seed=11)
    m2, _ = cl.gmm_fit_minibatch(X, K=2, epochs=2, seed=11)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    cl.save_targets(p1, m1)
    cl.save_targets(p2, m2)
    assert p1.read_bytes() == p2.read_bytes()
