import numpy as np
import pytest

from melanchor import augment as ag
from melanchor.audio import WaveBuffer


def _buf(samples):
    return WaveBuffer(np.asarray(samples, dtype=float))


def test_energy_zeros():
    assert ag.energy(_buf(np.zeros(10))) == 0.0


def test_energy_constant():
    assert ag.energy(_buf(np.full(100, 0.5))) == pytest.approx(0.25)


def test_energy_unit_sine():
    t = np.arange(160000) / 16000
    e = ag.energy(_buf(np.sin(2 * np.pi * 440.0 * t) * 0.999969))
    assert abs(e - 0.5) < 1e-3


def test_mix_noise_alpha_snr0():
    rng = np.random.default_rng(0)
    x = _buf(rng.normal(size=1000) * 0.1)
    n = _buf(x.samples[::-1].copy())   # equal energy
    out = ag.mix_noise(x, n, 0.0)
    assert np.allclose(out.samples, x.samples + n.samples, atol=1e-12)


def test_mix_noise_alpha_snr10():
    x = _buf(np.full(100, 0.1))
    n = _buf(np.concatenate([np.full(50, 0.1), np.full(50, -0.1)]))
    out = ag.mix_noise(x, n, 10.0)
    alpha = 10 ** -0.5
    assert abs(alpha - 0.31623) < 1e-5
    assert np.allclose(out.samples, x.samples + alpha * n.samples, atol=1e-12)


def test_mix_noise_realized_snr():
    rng = np.random.default_rng(1)
    x = _buf(rng.normal(size=100000) * 0.1)
    n = _buf(rng.normal(size=100000) * 0.05)
    corr = np.corrcoef(x.samples, n.samples)[0, 1]
    assert abs(corr) < 0.01
    for target in (-5.0, 0.0, 10.0, 20.0):
        out = ag.mix_noise(x, n, target)
        noise_part = out.samples - x.samples
        realized = 10 * np.log10(ag.energy(x) / np.mean(noise_part ** 2))
        assert abs(realized - target) < 0.5


def test_mix_noise_zero_energy_raises():
    with pytest.raises(ValueError, match="zero-energy"):
        ag.mix_noise(_buf(np.ones(10)), _buf(np.zeros(10)), 0.0)


def test_mix_scale_formula():
    assert ag.mix_scale(0.3, 0.3, 0.0) == pytest.approx(1.0, abs=1e-12)
    assert ag.mix_scale(0.3, 0.3, 5.0) == pytest.approx(10 ** 0.25, abs=1e-12)
    assert abs(10 ** 0.25 - 1.77828) < 1e-5


def test_mix_utterance_region_bound():
    rng = np.random.default_rng(2)
    x1 = _buf(rng.normal(size=2000) * 0.1)
    x2 = _buf(rng.normal(size=2000) * 0.1)
    for _ in range(1000):
        out = ag.mix_utterance(x1, x2, 0.0, rng)
        changed = np.nonzero(out.samples != x1.samples)[0]
        assert changed.size <= 1000   # max 50% of |x1|
        if changed.size > 1:
            assert changed.max() - changed.min() + 1 <= 1000


def test_mix_utterance_zero_energy_secondary_skips():
    rng = np.random.default_rng(3)
    x1 = _buf(np.random.default_rng(0).normal(size=100) * 0.1)
    x2 = _buf(np.zeros(100))
    out = ag.mix_utterance(x1, x2, 0.0, rng)
    assert np.array_equal(out.samples, x1.samples)


def _filled_buffer(rng, n=8, size=64):
    buf = ag.AugmentorBuffer(size)
    for _ in range(n):
        buf.add(_buf(rng.normal(size=1600) * 0.1))
    return buf


def test_augment_pair_probs_zero_is_identity():
    rng = np.random.default_rng(4)
    cfg = ag.AugmentConfig(noise_prob=0.0, mix_prob=0.0)
    buf = _filled_buffer(rng)
    x = _buf(rng.normal(size=1600) * 0.1)
    aug, clean = ag.augment_pair(x, buf, cfg, rng)
    assert np.array_equal(aug.samples, x.samples)
    assert clean is x


def test_augment_pair_deterministic():
    def run():
        rng = np.random.default_rng(5)
        cfg = ag.AugmentConfig()
        buf = _filled_buffer(np.random.default_rng(9))
        outs = []
        for _ in range(20):
            x = _buf(rng.normal(size=1600) * 0.1)
            aug, _ = ag.augment_pair(x, buf, cfg, rng)
            outs.append(aug.samples)
        return np.concatenate(outs)

    assert np.array_equal(run(), run())


def test_augment_pair_clean_untouched():
    rng = np.random.default_rng(6)
    cfg = ag.AugmentConfig(noise_prob=1.0, mix_prob=1.0)
    buf = _filled_buffer(rng)
    x = _buf(rng.normal(size=1600) * 0.1)
    orig = x.samples.copy()
    aug, clean = ag.augment_pair(x, buf, cfg, rng)
    assert clean is x
    assert np.array_equal(clean.samples, orig)
    assert not np.array_equal(aug.samples, orig)


def test_augment_pair_application_rate():
    rng = np.random.default_rng(7)
    cfg = ag.AugmentConfig()
    buf = _filled_buffer(rng, n=64)
    applied = 0
    n_draws = 10000
    for _ in range(n_draws):
        x = _buf(rng.normal(size=400) * 0.1)
        aug, _ = ag.augment_pair(x, buf, cfg, rng)
        # noise changes every sample; count noise events by full-vector change
        if np.all(aug.samples != x.samples):
            applied += 1
    rate = applied / n_draws
    assert abs(rate - 0.25) < 0.015


def test_buffer_eviction_order():
    buf = ag.AugmentorBuffer(3)
    bufs = [_buf(np.full(10, 0.1 * (i + 1))) for i in range(5)]
    for b in bufs:
        buf.add(b)
    assert len(buf) == 3
    assert buf.snapshot() == bufs[2:]


def test_no_self_mixing():
    # buffer ingests only after augmenting, so a lone utterance sees an
    # empty buffer and passes through untouched
    rng = np.random.default_rng(8)
    cfg = ag.AugmentConfig(noise_prob=1.0, mix_prob=1.0)
    buf = ag.AugmentorBuffer(4)
    x = _buf(rng.normal(size=400) * 0.1)
    aug, _ = ag.augment_pair(x, buf, cfg, rng)
    assert np.array_equal(aug.samples, x.samples)
    assert len(buf) == 1
