"""Audio I/O, synthetic corpus generation, and log-mel feature extraction."""

from __future__ import annotations

import json
import logging
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_N_MELS = 80
DEFAULT_FRAME_LEN = 400   # 25 ms at 16 kHz
DEFAULT_FRAME_HOP = 320   # 20 ms at 16 kHz
DEFAULT_LOG_EPS = 1e-6


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("WaveBuffer needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("WaveBuffer samples must be finite")
        peak = np.abs(self.samples).max()
        if peak > 1.0:
            log.warning("WaveBuffer amplitude %.3f exceeds [-1, 1]", peak)

    def __len__(self):
        return self.samples.size

    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class MelFrameSeq:
    frames: np.ndarray          # T x D
    frame_hop: int
    frame_len: int

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_mels(self):
        return self.frames.shape[1]


def read_wav(path):
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getcomptype() != "NONE":
            raise ValueError(f"{path}: expected uncompressed PCM, got {wf.getcomptype()}")
        n = wf.getnframes()
        raw = wf.readframes(n)
        if len(raw) != 2 * n:
            raise ValueError(f"{path}: truncated file ({len(raw)} bytes for {n} frames)")
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        return WaveBuffer(samples, wf.getframerate())


def write_wav(path, buf):
    pcm = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(buf.sample_rate)
        wf.writeframes(pcm.tobytes())


# -- mel features ----------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    """Triangular filters on the mel scale; rows (n_mels) x FFT bins."""
    if fmax is None:
        fmax = sample_rate / 2.0
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for k in range(n_mels):
        lo, cen, hi = hz_pts[k], hz_pts[k + 1], hz_pts[k + 2]
        up = (fft_freqs - lo) / (cen - lo)
        down = (hi - fft_freqs) / (hi - cen)
        fb[k] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_freq(k, n_mels, sample_rate, fmin=0.0, fmax=None):
    if fmax is None:
        fmax = sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return _mel_to_hz(mel_pts[k + 1])


def log_mel(x, n_mels=DEFAULT_N_MELS, frame_len=DEFAULT_FRAME_LEN,
            frame_hop=DEFAULT_FRAME_HOP, eps=DEFAULT_LOG_EPS):
    """Log of (mel filter energies + eps). Hann window, power spectrum."""
    if frame_len < frame_hop:
        raise ValueError(f"frame_len {frame_len} < frame_hop {frame_hop}")
    n = len(x)
    if n < frame_len:
        raise ValueError(f"input of {n} samples shorter than one frame ({frame_len})")
    t = (n - frame_len) // frame_hop + 1
    idx = np.arange(frame_len)[None, :] + frame_hop * np.arange(t)[:, None]
    frames = x.samples[idx]
    window = np.hanning(frame_len)
    spec = np.fft.rfft(frames * window, n=frame_len, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(n_mels, frame_len, x.sample_rate)
    energies = power @ fb.T
    return MelFrameSeq(np.log(energies + eps), frame_hop, frame_len)


# -- synthetic corpus ------------------------------------------------------

@dataclass
class SynthCorpusSpec:
    n_utterances: int = 200
    duration_s: tuple = (0.5, 1.0)
    n_phone_classes: int = 16
    sample_rate: int = DEFAULT_SAMPLE_RATE
    noise_floor: float = 0.01
    rng_seed: int = 0
    # per-class (formant_hz, bandwidth_hz) rows; auto-generated when empty
    formants: list = field(default_factory=list)
    pitch_hz: float = 100.0
    segment_ms: tuple = (50, 200)

    def __post_init__(self):
        if self.n_phone_classes < 1:
            raise ValueError("n_phone_classes must be >= 1")
        if self.duration_s[0] <= 0 or self.duration_s[1] < self.duration_s[0]:
            raise ValueError("durations must be positive and ordered")
        if not self.formants:
            self.formants = default_formants(self.n_phone_classes, self.sample_rate)


def default_formants(n_classes, sample_rate):
    """Three formants per class, spread over the usable band."""
    fmax = sample_rate / 2.0
    out = []
    for c in range(n_classes):
        base = 250.0 + (c + 0.5) * (fmax * 0.45) / n_classes
        out.append([(base, 60.0), (2.2 * base, 90.0), (3.1 * base, 120.0)])
    return out


def _synth_segment(n, class_formants, pitch_hz, sample_rate, rng):
    """Pitch-pulse-excited damped sinusoids at the class formants."""
    t = np.arange(n) / sample_rate
    period = sample_rate / pitch_hz
    phase = (np.arange(n) % period) / sample_rate   # time since last pulse
    sig = np.zeros(n)
    for f, bw in class_formants:
        sig += np.exp(-2.0 * np.pi * bw * phase) * np.sin(2.0 * np.pi * f * t)
    return sig


def synth_utterance(spec, rng, frame_len=DEFAULT_FRAME_LEN, frame_hop=DEFAULT_FRAME_HOP):
    """One utterance of concatenated labeled segments plus its frame labels."""
    sr = spec.sample_rate
    dur = rng.uniform(*spec.duration_s)
    n = int(round(dur * sr))
    seg_lo = int(spec.segment_ms[0] * sr / 1000)
    seg_hi = int(spec.segment_ms[1] * sr / 1000)
    samples = np.zeros(n)
    sample_labels = np.zeros(n, dtype=np.int64)
    pos = 0
    while pos < n:
        seg_len = min(int(rng.integers(seg_lo, seg_hi + 1)), n - pos)
        cls = int(rng.integers(spec.n_phone_classes))
        samples[pos:pos + seg_len] = _synth_segment(
            seg_len, spec.formants[cls], spec.pitch_hz, sr, rng)
        sample_labels[pos:pos + seg_len] = cls
        pos += seg_len
    samples += spec.noise_floor * rng.standard_normal(n)
    peak = np.abs(samples).max()
    if peak > 0:
        samples *= 0.3 / peak
    # frame labels at the feature frame rate (label at frame center)
    n_frames = max(0, (n - frame_len) // frame_hop + 1)
    centers = frame_hop * np.arange(n_frames) + frame_len // 2
    labels = sample_labels[np.minimum(centers, n - 1)]
    return WaveBuffer(samples, sr), labels


def synth_corpus(spec, frame_len=DEFAULT_FRAME_LEN, frame_hop=DEFAULT_FRAME_HOP):
    rng = np.random.default_rng(spec.rng_seed)
    out = []
    for _ in range(spec.n_utterances):
        out.append(synth_utterance(spec, rng, frame_len, frame_hop))
    return out


def write_corpus(spec, out_dir, frame_len=DEFAULT_FRAME_LEN, frame_hop=DEFAULT_FRAME_HOP):
    """Write wavs plus a JSON manifest of paths and frame-label arrays."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (buf, labels) in enumerate(synth_corpus(spec, frame_len, frame_hop)):
        name = f"utt_{i:05d}.wav"
        write_wav(out_dir / name, buf)
        entries.append({"wav": name, "labels": labels.tolist()})
    manifest = {
        "sample_rate": spec.sample_rate,
        "n_phone_classes": spec.n_phone_classes,
        "frame_len": frame_len,
        "frame_hop": frame_hop,
        "utterances": entries,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f)
    return out_dir / "manifest.json"


def load_corpus(manifest_path):
    """Returns (list of (WaveBuffer, labels array), manifest dict)."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    items = []
    for e in manifest["utterances"]:
        buf = read_wav(manifest_path.parent / e["wav"])
        items.append((buf, np.asarray(e["labels"], dtype=np.int64)))
    return items, manifest
