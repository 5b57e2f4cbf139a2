"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    per_param: dict = field(default_factory=dict)

    def ok(self, tol):
        return self.max_rel_err < tol


def grad_check(build_loss, params, eps=1e-5, tol=1e-4, atol=1e-8,
               max_elems_per_param=None, rng=None):
    """Compare analytic grads of build_loss(params) to central differences.

    build_loss must construct a scalar loss deterministically from the
    current parameter values; it is re-run for every perturbed element.
    max_elems_per_param subsamples large parameters (deterministic given rng).
    """
    loss_a = build_loss(params)
    loss_b = build_loss(params)
    if loss_a.value != loss_b.value:
        raise RuntimeError("build_loss is not deterministic: two builds disagree")

    params.zero_grads()
    loss = build_loss(params)
    loss.backward()
    analytic = {k: (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
                for k, p in params.items()}

    report = GradCheckReport(0.0, "", ())
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        flat = p.value.reshape(-1)
        n = flat.size
        if max_elems_per_param is not None and n > max_elems_per_param:
            idxs = np.sort(rng.choice(n, size=max_elems_per_param, replace=False))
        else:
            idxs = np.arange(n)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = build_loss(params).item()
            flat[i] = orig - eps
            fm = build_loss(params).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            denom = max(1e-8, abs(a) + abs(numeric))
            rel = abs(a - numeric) / denom
            # below atol the central difference is truncation-noise limited
            if abs(a - numeric) <= atol:
                rel = 0.0
            if rel > worst:
                worst = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = name
                report.worst_index = np.unravel_index(i, p.value.shape)
        report.per_param[name] = worst
    return report
