"""Denoising augmentation: energy-matched noise mixing, cross-utterance
mixing, and the recent-utterance buffer supplying both source types."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .audio import WaveBuffer

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    snr_range_db: tuple = (-5.0, 20.0)
    mix_ratio_range_db: tuple = (-5.0, 5.0)
    noise_prob: float = 0.25
    mix_prob: float = 0.25
    max_overlap: float = 0.5
    buffer_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for p in (self.noise_prob, self.mix_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if not 0.0 < self.max_overlap <= 1.0:
            raise ValueError(f"max_overlap {self.max_overlap} outside (0, 1]")
        for lo, hi in (self.snr_range_db, self.mix_ratio_range_db):
            if hi < lo:
                raise ValueError(f"range ({lo}, {hi}) not ordered")


class AugmentorBuffer:
    """Ring of recent utterances; oldest evicted first."""

    def __init__(self, size=64):
        self._ring = deque(maxlen=size)

    def __len__(self):
        return len(self._ring)

    def add(self, buf):
        self._ring.append(buf)

    def sample(self, rng):
        if not self._ring:
            raise IndexError("buffer is empty")
        return self._ring[int(rng.integers(len(self._ring)))]

    def snapshot(self):
        return list(self._ring)


def energy(x):
    """Mean of squared samples."""
    return float(np.mean(x.samples ** 2))


def _fit_length(noise, n, rng):
    """Crop (random offset) when longer, tile-loop when shorter."""
    s = noise.samples
    if s.size >= n:
        start = int(rng.integers(s.size - n + 1))
        return s[start:start + n]
    reps = int(np.ceil(n / s.size))
    return np.tile(s, reps)[:n]


def mix_noise(x_clean, n, snr_db):
    """x_clean + alpha * n with alpha = sqrt(E_clean / (10^(SNR/10) E_noise))."""
    if len(n) != len(x_clean):
        raise ValueError(f"length mismatch: clean {len(x_clean)}, noise {len(n)}")
    e_clean = energy(x_clean)
    e_noise = energy(n)
    if e_noise <= 0.0:
        raise ValueError("zero-energy noise source")
    alpha = np.sqrt(e_clean / (10.0 ** (snr_db / 10.0) * e_noise))
    return WaveBuffer(x_clean.samples + alpha * n.samples, x_clean.sample_rate)


def mix_scale(e1, e2, ratio_db):
    """beta = sqrt(E1 * 10^(rho/10) / E2)."""
    return np.sqrt(e1 * 10.0 ** (ratio_db / 10.0) / e2)


def mix_utterance(x1, x2, ratio_db, rng, max_overlap=0.5, max_resample=8):
    """Mix a segment of x2 into a random region of x1.

    Region length is uniform in [1, floor(max_overlap * |x1|)]; region
    energies are computed on the selected segments. A zero-energy secondary
    segment is resampled up to max_resample times, then mixing is skipped.
    """
    if len(x1) < 2:
        raise ValueError("primary utterance too short to mix")
    max_len = max(1, int(len(x1) * max_overlap))
    length = int(rng.integers(1, max_len + 1))
    length = min(length, len(x2))
    t1 = int(rng.integers(len(x1) - length + 1))
    r1 = x1.samples[t1:t1 + length]
    e1 = float(np.mean(r1 ** 2))
    for _ in range(max_resample):
        t2 = int(rng.integers(len(x2) - length + 1))
        r2 = x2.samples[t2:t2 + length]
        e2 = float(np.mean(r2 ** 2))
        if e2 > 0.0:
            break
    else:
        log.warning("mix_utterance: zero-energy secondary region after %d "
                    "resamples; skipping", max_resample)
        return WaveBuffer(x1.samples.copy(), x1.sample_rate)
    beta = mix_scale(e1, e2, ratio_db)
    out = x1.samples.copy()
    out[t1:t1 + length] = r1 + beta * r2
    return WaveBuffer(out, x1.sample_rate)


def augment_pair(x, buffer, cfg, rng):
    """Returns (x_aug, x_clean); x_clean is the untouched input.

    Noise and utterance mixing fire independently, each with its own
    probability; with an empty buffer neither can apply. The buffer
    ingests x afterwards, so an utterance never mixes with itself.
    """
    x_clean = x
    aug = WaveBuffer(x.samples.copy(), x.sample_rate)
    # draw all decisions up front so rng consumption is deterministic
    noise_u = rng.random()
    snr = rng.uniform(*cfg.snr_range_db)
    mix_u = rng.random()
    ratio = rng.uniform(*cfg.mix_ratio_range_db)
    if len(buffer) > 0:
        if noise_u < cfg.noise_prob:
            src = buffer.sample(rng)
            n = WaveBuffer(_fit_length(src, len(aug), rng), aug.sample_rate)
            if energy(n) > 0.0:
                aug = mix_noise(aug, n, snr)
            else:
                log.warning("augment_pair: skipped zero-energy noise source")
        if mix_u < cfg.mix_prob:
            src = buffer.sample(rng)
            aug = mix_utterance(aug, src, ratio, rng, cfg.max_overlap)
    buffer.add(x)
    return aug, x_clean
