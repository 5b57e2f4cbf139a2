"""Frozen soft-clustering targets: diagonal GMM and the hard k-means baseline.

The GMM is fitted once by stochastic gradient ascent on minibatch
log-likelihood, then frozen; training consumes only its log-space
posteriors. K-means (k-means++ init, Lloyd updates) mirrors the
hard-target baseline.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-4
_LOG_2PI = np.log(2.0 * np.pi)

_MAGIC = b"MELANCH1"
_KIND_GMM = 0
_KIND_KMEANS = 1


class FrozenModelError(RuntimeError):
    pass


class GmmModel:
    """K-component diagonal-covariance Gaussian mixture."""

    _param_fields = ("log_pi", "mu", "log_var")

    def __init__(self, log_pi, mu, log_var):
        self.frozen = False
        self.log_pi = np.asarray(log_pi, dtype=np.float64)
        self.mu = np.asarray(mu, dtype=np.float64)
        self.log_var = np.asarray(log_var, dtype=np.float64)
        assert self.mu.shape == self.log_var.shape
        assert self.log_pi.shape == (self.mu.shape[0],)

    def __setattr__(self, name, value):
        if name in self._param_fields and getattr(self, "frozen", False):
            raise FrozenModelError(f"GmmModel is frozen; cannot set {name}")
        super().__setattr__(name, value)

    @property
    def K(self):
        return self.mu.shape[0]

    @property
    def D(self):
        return self.mu.shape[1]

    def freeze(self):
        self.frozen = True
        self.log_pi.setflags(write=False)
        self.mu.setflags(write=False)
        self.log_var.setflags(write=False)
        return self


@dataclass
class KmeansModel:
    centers: np.ndarray   # K x D

    @property
    def K(self):
        return self.centers.shape[0]

    @property
    def D(self):
        return self.centers.shape[1]


@dataclass
class PosteriorSeq:
    q: np.ndarray         # T x K, row-stochastic

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)


# -- k-means ---------------------------------------------------------------

def kmeanspp_init(X, K, rng):
    """k-means++ seeding: next center sampled prop. to squared distance."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < K:
        raise ValueError(f"need at least K={K} rows, got {n}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    centers = np.empty((K, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centers
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[k] = X[idx]
        d2 = np.minimum(d2, ((X - centers[k]) ** 2).sum(axis=1))
    return centers


def _assign(X, centers):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1), d2


def lloyd_fit(X, K, iters=20, seed=0):
    """Lloyd's algorithm from a k-means++ init.

    Empty clusters are re-seeded at the point farthest from its assigned
    center; iteration stops early when assignments stabilize.
    """
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = kmeanspp_init(X, K, rng)
    prev = None
    for _ in range(iters):
        ids, d2 = _assign(X, centers)
        if prev is not None and np.array_equal(ids, prev):
            break
        prev = ids
        for k in range(K):
            members = X[ids == k]
            if members.shape[0] == 0:
                far = int(d2[np.arange(X.shape[0]), ids].argmax())
                centers[k] = X[far]
                ids[far] = k
                d2[far, :] = np.inf   # keep a second empty cluster from stealing it
            else:
                centers[k] = members.mean(axis=0)
    return KmeansModel(centers)


def inertia(X, model):
    _, d2 = _assign(np.asarray(X, dtype=np.float64), model.centers)
    return float(d2.min(axis=1).sum())


def hard_labels(model, X):
    """Nearest-center ids; ties break to the lowest index (argmin rule)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.D:
        raise ValueError(f"dim mismatch: X has {X.shape[1]}, model has {model.D}")
    ids, _ = _assign(X, model.centers)
    return ids


# -- GMM -------------------------------------------------------------------

def _component_log_density(model_or_params, X, k0=None, k1=None):
    """log N(x; mu_k, diag sigma_k^2) for each row and component slice."""
    mu, log_var = model_or_params
    if k0 is not None:
        mu = mu[k0:k1]
        log_var = log_var[k0:k1]
    var = np.exp(log_var)
    diff = X[:, None, :] - mu[None, :, :]
    mahal = (diff * diff / var[None, :, :]).sum(axis=2)
    const = -0.5 * mu.shape[1] * _LOG_2PI - 0.5 * log_var.sum(axis=1)
    return const[None, :] - 0.5 * mahal


def _log_joint(model, X):
    return model.log_pi[None, :] + _component_log_density((model.mu, model.log_var), X)


def gmm_log_posterior(model, m):
    """Normalized log-posteriors, computed entirely in log space.

    Accepts a single D-vector or an N x D matrix.
    """
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 1
    X = m[None, :] if single else m
    if X.shape[1] != model.D:
        raise ValueError(f"dim mismatch: input has {X.shape[1]}, model has {model.D}")
    lj = _log_joint(model, X)
    lse = np.logaddexp.reduce(lj, axis=1, keepdims=True)
    lp = lj - lse
    return lp[0] if single else lp


def gmm_posterior(model, m):
    return np.exp(gmm_log_posterior(model, m))


def chunked_soft_assign(model, X, batch_size, chunk_k):
    """Posteriors computed over data batches and component chunks.

    Matches the direct computation within 1e-10 regardless of chunking.
    """
    if batch_size < 1 or chunk_k < 1:
        raise ValueError("batch_size and chunk_k must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        return PosteriorSeq(np.empty((0, model.K)))
    q = np.empty((n, model.K))
    for n0 in range(0, n, batch_size):
        xb = X[n0:n0 + batch_size]
        logp = np.empty((xb.shape[0], model.K))
        for k0 in range(0, model.K, chunk_k):
            k1 = min(k0 + chunk_k, model.K)
            logp[:, k0:k1] = _component_log_density((model.mu, model.log_var), xb, k0, k1)
        lj = model.log_pi[None, :] + logp
        lj -= np.logaddexp.reduce(lj, axis=1, keepdims=True)
        q[n0:n0 + batch_size] = np.exp(lj)
    return PosteriorSeq(q)


def held_out_ll(model_params, X):
    log_pi, mu, log_var = model_params
    lj = log_pi[None, :] + _component_log_density((mu, log_var), X)
    return float(np.logaddexp.reduce(lj, axis=1).mean())


@dataclass
class GmmFitReport:
    epochs: int
    seed: int
    held_out_ll: list
    var_floor_hits: int
    final_held_out_ll: float


def gmm_fit_minibatch(X, K, epochs=10, lr_start=1e-2, lr_end=1e-4,
                      batch=256, seed=0, var_floor=VAR_FLOOR, holdout_frac=0.1):
    """Fit by gradient ascent on minibatch log-likelihood, cosine lr decay.

    Weights are parameterized as softmax of free logits; variances in log
    space with a floor. Held-out average log-likelihood is monitored and a
    sustained decrease logs a warning.
    """
    X = np.asarray(X, dtype=np.float64)
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    n_hold = max(1, int(n * holdout_frac)) if n > 10 else 0
    perm = rng.permutation(n)
    hold, train = X[perm[:n_hold]], X[perm[n_hold:]]

    mu = kmeanspp_init(train, K, rng)
    ids, _ = _assign(train, mu)
    log_var = np.empty((K, X.shape[1]))
    global_var = np.maximum(train.var(axis=0), var_floor)
    for k in range(K):
        members = train[ids == k]
        v = members.var(axis=0) if members.shape[0] > 1 else global_var
        log_var[k] = np.log(np.maximum(v, var_floor))
    w = np.zeros(K)   # free logits for the mixture weights

    n_train = train.shape[0]
    steps_per_epoch = max(1, n_train // batch)
    total_steps = epochs * steps_per_epoch
    floor_hits = 0
    ll_history = []
    step = 0
    log_floor = np.log(var_floor)
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        for b in range(steps_per_epoch):
            xb = train[order[b * batch:(b + 1) * batch]]
            if xb.shape[0] == 0:
                continue
            lr = lr_end + 0.5 * (lr_start - lr_end) * (
                1.0 + np.cos(np.pi * step / max(1, total_steps - 1)))
            log_pi = w - np.logaddexp.reduce(w)
            lj = log_pi[None, :] + _component_log_density((mu, log_var), xb)
            lse = np.logaddexp.reduce(lj, axis=1, keepdims=True)
            r = np.exp(lj - lse)                       # responsibilities
            bsz = xb.shape[0]
            pi = np.exp(log_pi)
            gw = r.mean(axis=0) - pi                  # d(mean LL)/d(logits)
            var = np.exp(log_var)
            diff = xb[:, None, :] - mu[None, :, :]
            gmu = (r[:, :, None] * diff / var[None, :, :]).sum(axis=0) / bsz
            glv = (r[:, :, None] * 0.5 * (diff * diff / var[None, :, :] - 1.0)
                   ).sum(axis=0) / bsz
            if lr > 0.0:
                w = w + lr * gw
                mu = mu + lr * gmu
                log_var = log_var + lr * glv
                under = log_var < log_floor
                if under.any():
                    floor_hits += int(under.sum())
                    log_var = np.maximum(log_var, log_floor)
            step += 1
        if n_hold:
            log_pi = w - np.logaddexp.reduce(w)
            ll_history.append(held_out_ll((log_pi, mu, log_var), hold))
            if len(ll_history) >= 3 and ll_history[-1] < ll_history[-2] < ll_history[-3]:
                log.warning("held-out log-likelihood decreasing for 2 epochs "
                            "(%.4f -> %.4f -> %.4f)",
                            ll_history[-3], ll_history[-2], ll_history[-1])
    log_pi = w - np.logaddexp.reduce(w)
    model = GmmModel(log_pi, mu, log_var)
    report = GmmFitReport(epochs, seed, ll_history, floor_hits,
                          ll_history[-1] if ll_history else float("nan"))
    return model, report


# -- persistence -----------------------------------------------------------

def save_targets(path, model, metadata=None):
    """Binary parameter file (magic, version, K, D, float64 LE arrays)
    plus a JSON metadata sidecar at <path>.json."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        if isinstance(model, GmmModel):
            f.write(struct.pack("<BBII", 1, _KIND_GMM, model.K, model.D))
            f.write(model.log_pi.astype("<f8").tobytes())
            f.write(model.mu.astype("<f8").tobytes())
            f.write(model.log_var.astype("<f8").tobytes())
        elif isinstance(model, KmeansModel):
            f.write(struct.pack("<BBII", 1, _KIND_KMEANS, model.K, model.D))
            f.write(model.centers.astype("<f8").tobytes())
        else:
            raise TypeError(f"cannot save {type(model).__name__}")
    if metadata is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(metadata, f, indent=2)


def load_targets(path):
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, kind, K, D = struct.unpack("<BBII", f.read(10))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        if kind == _KIND_GMM:
            log_pi = np.frombuffer(f.read(8 * K), dtype="<f8").copy()
            mu = np.frombuffer(f.read(8 * K * D), dtype="<f8").reshape(K, D).copy()
            log_var = np.frombuffer(f.read(8 * K * D), dtype="<f8").reshape(K, D).copy()
            return GmmModel(log_pi, mu, log_var).freeze()
        if kind == _KIND_KMEANS:
            centers = np.frombuffer(f.read(8 * K * D), dtype="<f8").reshape(K, D).copy()
            return KmeansModel(centers)
        raise ValueError(f"{path}: unknown model kind {kind}")
