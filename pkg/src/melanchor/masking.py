"""Block-wise temporal masking over latent frames."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MaskSpec:
    span_min: int = 10
    span_max: int = 25
    ratio_min: float = 0.40
    ratio_max: float = 0.65
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.ratio_min <= self.ratio_max <= 1.0):
            raise ValueError("ratios must satisfy 0 < min <= max <= 1")
        if not (1 <= self.span_min <= self.span_max):
            raise ValueError("spans must satisfy 1 <= min <= max")


@dataclass
class MaskVector:
    keep: np.ndarray                   # bool, True = kept, False = masked
    spans: list = field(default_factory=list)   # (start, pre-trim length) draws

    @property
    def masked_idx(self):
        return np.nonzero(~self.keep)[0]

    @property
    def n_masked(self):
        return int((~self.keep).sum())

    @property
    def fraction(self):
        return self.n_masked / self.keep.size


def sample_block_mask(t, spec, rng):
    """Union spans of length U{span_min..span_max} until a target fraction
    r ~ U[ratio_min, ratio_max] is reached; the last span is trimmed so the
    final fraction never exceeds ratio_max.

    Degenerate rule for t < span_min: one span of ceil(r * t) frames.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    r = rng.uniform(spec.ratio_min, spec.ratio_max)
    masked = np.zeros(t, dtype=bool)
    spans = []
    if t < spec.span_min:
        length = min(t, int(np.ceil(r * t)))
        start = int(rng.integers(t - length + 1))
        masked[start:start + length] = True
        spans.append((start, length))
        return MaskVector(~masked, spans)
    cap = int(np.floor(spec.ratio_max * t))
    cap = max(cap, 1)
    while masked.sum() < r * t:
        length = int(rng.integers(spec.span_min, spec.span_max + 1))
        start = int(rng.integers(t))
        spans.append((start, length))
        end = min(t, start + length)
        newly = np.nonzero(~masked[start:end])[0] + start
        masked[start:end] = True
        excess = int(masked.sum()) - cap
        if excess > 0:
            # trim this span's newly masked tail back down to the ceiling
            masked[newly[len(newly) - excess:]] = False
            break
    return MaskVector(~masked, spans)


def apply_mask(z, keep, t_mask):
    """Kept rows pass through; masked rows are replaced by t_mask.

    z is a (T, C) tensor, t_mask a (C,) tensor; gradient reaches t_mask
    only through masked rows. keep is a boolean vector (True = kept).
    """
    from . import tensor as tc

    keep = np.asarray(keep, dtype=bool)
    if keep.shape[0] != z.shape[0]:
        raise tc.ShapeError(f"mask length {keep.shape[0]} vs latents {z.shape[0]}")
    if t_mask.shape != (z.shape[1],):
        raise tc.ShapeError(f"t_mask shape {t_mask.shape} vs latent dim {z.shape[1]}")
    km = keep.astype(z.value.dtype)[:, None]
    return tc.add(tc.mul(z, km), tc.mul(tc.reshape(t_mask, (1, -1)), 1.0 - km))
