"""Joint pretraining loop: masked latent prediction against an EMA teacher
plus a decaying KL pull toward frozen mixture-model posteriors.

Losses are computed over masked frames only. The loop is single-threaded
and fully deterministic: every random draw at step t comes from an RNG
seeded by (run seed, t), so a run can be resumed from any checkpoint and
continue bit-exactly.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .audio import DEFAULT_FRAME_HOP, DEFAULT_FRAME_LEN, log_mel
from .augment import AugmentConfig, AugmentorBuffer, augment_pair
from .clustering import GmmModel, KmeansModel, gmm_posterior, hard_labels
from .encoder import ModelBundle, cluster_head, predictor, save_checkpoint, load_checkpoint, EncoderConfig
from .masking import MaskSpec, apply_mask, sample_block_mask

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAX_CONSECUTIVE_SKIPS = 10


@dataclass
class TrainConfig:
    lambda_start: float = 1.0
    lambda_end: float = 0.01
    t_max: int = 2000
    batch_size: int = 4
    lr_floor: float = 1e-5
    lr_peak: float = 1e-4
    warmup_frac: float = 0.10
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    ema_tau: float = 0.996
    baseline_mode: bool = False      # hard one-hot k-means targets
    pure_jepa: bool = False          # lambda identically zero, no targets
    n_mels: int = 80
    frame_len: int = DEFAULT_FRAME_LEN
    frame_hop: int = DEFAULT_FRAME_HOP
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_end <= self.lambda_start:
            raise ValueError("need 0 <= lambda_end <= lambda_start")
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    jepa: float
    cluster: float
    lam: float
    total: float
    grad_norm: float
    lr: float
    skipped: bool = False
    wall_ms: float = 0.0

    def to_json(self):
        return json.dumps({
            "step": self.step, "L_JEPA": self.jepa, "L_cluster": self.cluster,
            "lambda": self.lam, "total": self.total, "grad_norm": self.grad_norm,
            "lr": self.lr, "skipped": self.skipped, "wall_ms": self.wall_ms,
        }, sort_keys=True)


# -- schedules -------------------------------------------------------------

def lambda_at(t, cfg):
    """Linear decay lambda_start -> lambda_end over t_max steps; out-of-range
    t is clamped with a warning."""
    if cfg.pure_jepa:
        return 0.0
    if t < 0 or t > cfg.t_max:
        warnings.warn(f"lambda_at: step {t} outside [0, {cfg.t_max}], clamping")
        t = min(max(t, 0), cfg.t_max)
    if t == 0:
        return cfg.lambda_start
    if t == cfg.t_max:
        return cfg.lambda_end
    return cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * t / cfg.t_max


def lr_at(t, cfg):
    """Linear warmup from lr_floor to lr_peak over the first warmup_frac of
    training, then linear decay back to lr_floor."""
    if cfg.t_max == 0:
        return cfg.lr_floor
    t = min(max(t, 0), cfg.t_max)
    warm = max(1, int(round(cfg.warmup_frac * cfg.t_max)))
    if t <= warm:
        return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * t / warm
    return cfg.lr_peak + (cfg.lr_floor - cfg.lr_peak) * (t - warm) / (cfg.t_max - warm)


# -- losses ----------------------------------------------------------------

def jepa_loss(z_pred, z_target, keep):
    """Mean squared L2 distance between predicted and teacher latents over
    masked frames. z_target is a plain array (no gradient path)."""
    keep = np.asarray(keep, dtype=bool)
    m = int((~keep).sum())
    if m == 0:
        raise ValueError("jepa_loss: empty mask")
    pred = tc.masked_select_rows(z_pred, ~keep)
    tgt = np.asarray(z_target)[~keep]
    diff = tc.sub(pred, tgt)
    return tc.mul(tc.tsum(tc.square(diff)), 1.0 / m)


def cluster_kl_loss(q, logits, keep, row_tol=1e-6):
    """Mean forward KL(q || softmax(logits)) over masked frames, in log
    space. q rows must sum to 1 within row_tol."""
    keep = np.asarray(keep, dtype=bool)
    m = int((~keep).sum())
    if m == 0:
        raise ValueError("cluster_kl_loss: empty mask")
    q = np.asarray(q, dtype=np.float64)
    if q.shape[0] != keep.shape[0]:
        raise tc.ShapeError(f"posterior rows {q.shape[0]} vs mask length {keep.shape[0]}")
    sums = q.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > row_tol):
        raise ValueError(f"posterior rows not normalized (max err {np.abs(sums - 1.0).max():.2e})")
    qm = q[~keep]
    logp = tc.log_softmax(tc.masked_select_rows(logits, ~keep), axis=-1)
    # sum q log q with the 0 log 0 = 0 convention; this term is constant
    with np.errstate(divide="ignore", invalid="ignore"):
        qlogq = np.where(qm > 0, qm * np.log(np.where(qm > 0, qm, 1.0)), 0.0).sum()
    cross = tc.mul(tc.tsum(tc.mul(logp, -qm)), 1.0 / m)
    return tc.add(cross, float(qlogq) / m)


# -- optimizer -------------------------------------------------------------

class AdamState:
    """First/second moments per parameter plus step and skip bookkeeping."""

    def __init__(self, store):
        self.m = {k: np.zeros_like(p.value) for k, p in store.items() if p.requires_grad}
        self.v = {k: np.zeros_like(p.value) for k, p in store.items() if p.requires_grad}
        self.step_count = 0
        self.skipped = 0
        self.consecutive_skips = 0

    def state_arrays(self):
        out = {}
        for k, a in self.m.items():
            out[f"adam_m/{k}"] = a.copy()
        for k, a in self.v.items():
            out[f"adam_v/{k}"] = a.copy()
        out["adam_meta"] = np.array(
            [self.step_count, self.skipped, self.consecutive_skips], dtype=np.int64)
        return out

    def load_arrays(self, arrays):
        for k in self.m:
            self.m[k] = arrays[f"adam_m/{k}"].copy()
            self.v[k] = arrays[f"adam_v/{k}"].copy()
        meta = arrays["adam_meta"]
        self.step_count, self.skipped, self.consecutive_skips = (int(x) for x in meta)


def global_grad_norm(store):
    total = 0.0
    for _, p in store.items():
        if p.requires_grad and p.grad is not None:
            total += float((p.grad ** 2).sum())
    return float(np.sqrt(total))


def clip_grads(store, clip_norm):
    """Scale all gradients so the global norm is at most clip_norm.
    Returns the pre-clip norm."""
    norm = global_grad_norm(store)
    if norm > clip_norm:
        scale = clip_norm / norm
        for _, p in store.items():
            if p.requires_grad and p.grad is not None:
                p.grad *= scale
    return norm


def grads_finite(store):
    for _, p in store.items():
        if p.requires_grad and p.grad is not None and not np.isfinite(p.grad).all():
            return False
    return True


def optimizer_step(store, state, lr, wd, clip_norm):
    """Clip, Adam moment update with bias correction, then decoupled decay
    theta <- theta - lr*wd*theta. Non-finite gradients skip the whole step;
    more than MAX_CONSECUTIVE_SKIPS in a row aborts.

    Returns the pre-clip global gradient norm (nan if skipped).
    """
    if not grads_finite(store):
        state.skipped += 1
        state.consecutive_skips += 1
        log.warning("non-finite gradients at update %d, skipping (%d consecutive)",
                    state.step_count, state.consecutive_skips)
        if state.consecutive_skips > MAX_CONSECUTIVE_SKIPS:
            raise RuntimeError(
                f"aborting: {state.consecutive_skips} consecutive non-finite gradient steps")
        return float("nan")
    state.consecutive_skips = 0
    norm = clip_grads(store, clip_norm)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for k, p in store.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m = state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        v = state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        p.value = p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.value = p.value - lr * wd * p.value
    return norm


# -- training step ---------------------------------------------------------

def step_rng(seed, t, stream):
    """Independent RNG for (run seed, step, stream); stream 0 picks the
    batch, stream 1 drives augmentation and masking."""
    return np.random.default_rng(np.random.SeedSequence([seed, t, stream]))


def _soft_targets(targets, mel):
    if isinstance(targets, GmmModel):
        return gmm_posterior(targets, mel)
    if isinstance(targets, KmeansModel):
        ids = hard_labels(targets, mel)
        q = np.zeros((mel.shape[0], targets.K))
        q[np.arange(mel.shape[0]), ids] = 1.0
        return q
    raise TypeError(f"unsupported target model {type(targets).__name__}")


def train_step(utts, bundle, targets, cfg, t, rng, buffer, mask_spec, aug_cfg,
               state):
    """One optimizer update over a list of utterances (Algorithm: augment,
    encode online/teacher, frozen posteriors, mask, predict, both losses on
    the masked set, update, EMA)."""
    t0 = time.perf_counter()
    enc_cfg = bundle.cfg
    jepa_terms = []
    cluster_terms = []
    for x in utts:
        aug, clean = augment_pair(x, buffer, aug_cfg, rng)
        mel_aug = log_mel(aug, n_mels=cfg.n_mels, frame_len=cfg.frame_len,
                          frame_hop=cfg.frame_hop).frames
        mel_clean = log_mel(clean, n_mels=cfg.n_mels, frame_len=cfg.frame_len,
                            frame_hop=cfg.frame_hop).frames
        z_on, _ = bundle.encode_online(mel_aug)
        z_tg, _ = bundle.encode_target(mel_clean)
        t_frames = z_on.shape[0]
        if z_tg.shape[0] != t_frames:
            raise ValueError(
                f"frame misalignment: online {t_frames} vs teacher {z_tg.shape[0]}")
        if cfg.pure_jepa:
            q = None
        else:
            q = _soft_targets(targets, mel_clean)
            if q.shape[0] != t_frames:
                raise ValueError(
                    f"frame misalignment: latents {t_frames} vs posteriors {q.shape[0]}")
        mv = sample_block_mask(t_frames, mask_spec, rng)
        z_tilde = apply_mask(z_on, mv.keep, bundle.online["t_mask"])
        z_pred = predictor(z_tilde, bundle.online, enc_cfg)
        jepa_terms.append(jepa_loss(z_pred, z_tg.value, mv.keep))
        if q is not None:
            logits = cluster_head(z_on, bundle.online, enc_cfg)
            cluster_terms.append(cluster_kl_loss(q, logits, mv.keep))
    n = len(utts)
    l_jepa = tc.mul(_sum_terms(jepa_terms), 1.0 / n)
    lam = lambda_at(t, cfg)
    if cluster_terms:
        l_cluster = tc.mul(_sum_terms(cluster_terms), 1.0 / n)
        total = tc.add(l_jepa, tc.mul(l_cluster, lam))
        cluster_val = float(l_cluster.value)
    else:
        total = l_jepa
        cluster_val = 0.0
    bundle.online.zero_grads()
    total.backward()
    for _, p in bundle.target.items():
        if p.grad is not None:
            raise RuntimeError("gradient leaked into the teacher parameters")
    lr = lr_at(t, cfg)
    norm = optimizer_step(bundle.online, state, lr, cfg.weight_decay, cfg.clip_norm)
    skipped = not np.isfinite(norm)
    if not skipped:
        bundle.ema_step()
    return StepRecord(step=t, jepa=float(l_jepa.value), cluster=cluster_val,
                      lam=lam, total=float(total.value), grad_norm=norm, lr=lr,
                      skipped=skipped,
                      wall_ms=(time.perf_counter() - t0) * 1000.0)


def _sum_terms(terms):
    out = terms[0]
    for term in terms[1:]:
        out = tc.add(out, term)
    return out


# -- full runs -------------------------------------------------------------

def _checkpoint_arrays(bundle, state, step):
    arrays = {}
    for k, v in bundle.online.state_arrays().items():
        arrays[f"online/{k}"] = v
    for k, v in bundle.target.state_arrays().items():
        arrays[f"target/{k}"] = v
    for k, v in state.state_arrays().items():
        arrays[f"opt/{k}"] = v
    arrays["meta/step"] = np.array([step], dtype=np.int64)
    return arrays


def _restore_from_arrays(bundle, state, arrays):
    online = {k[len("online/"):]: v for k, v in arrays.items() if k.startswith("online/")}
    target = {k[len("target/"):]: v for k, v in arrays.items() if k.startswith("target/")}
    opt = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    bundle.online.load_arrays(online)
    bundle.target.load_arrays(target)
    state.load_arrays(opt)
    return int(arrays["meta/step"][0])


def _pick_batch(corpus, cfg, t):
    rng = step_rng(cfg.seed, t, 0)
    idx = rng.integers(len(corpus), size=cfg.batch_size)
    return [int(i) for i in idx]


def _replay_buffer(corpus, cfg, aug_cfg, upto_step):
    """Rebuild the augmentation ring buffer as of the end of `upto_step` by
    replaying the batch-selection draws of the most recent steps."""
    buffer = AugmentorBuffer(aug_cfg.buffer_size)
    steps_needed = -(-aug_cfg.buffer_size // cfg.batch_size)
    start = max(1, upto_step - steps_needed + 1)
    for s in range(start, upto_step + 1):
        for i in _pick_batch(corpus, cfg, s):
            buffer.add(corpus[i][0] if isinstance(corpus[i], tuple) else corpus[i])
    return buffer


def run_pretraining(cfg, enc_cfg, corpus, targets, out_dir, mask_spec=None,
                    aug_cfg=None, resume_from=None):
    """Phase-2 loop over a corpus of (WaveBuffer, labels) pairs or bare
    WaveBuffers. Writes metrics.jsonl and periodic checkpoints to out_dir;
    returns (bundle, final checkpoint path, list of StepRecords).

    With resume_from, parameters, optimizer state, and the augmentation
    buffer are restored and the continuation is bit-identical to an
    uninterrupted run with the same config and seed.
    """
    if targets is None and not cfg.pure_jepa:
        raise ValueError("targets model required unless pure_jepa is set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_spec = mask_spec or MaskSpec()
    aug_cfg = aug_cfg or AugmentConfig()
    waves = [c[0] if isinstance(c, tuple) else c for c in corpus]
    bundle = ModelBundle(enc_cfg, tau=cfg.ema_tau, seed=cfg.seed)
    state = AdamState(bundle.online)
    config_echo = {"train": cfg.to_dict(), "encoder": enc_cfg.to_dict()}
    start_step = 0
    if resume_from is not None:
        saved_cfg, arrays = load_checkpoint(resume_from)
        if saved_cfg != config_echo:
            raise ValueError("checkpoint config does not match the requested run")
        start_step = _restore_from_arrays(bundle, state, arrays)
    buffer = _replay_buffer(waves, cfg, aug_cfg, start_step)
    every = max(1, cfg.t_max // 10)
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if start_step > 0 else "w"
    records = []
    if start_step == 0:
        save_checkpoint(out_dir / "ckpt_000000.bin", config_echo,
                        _checkpoint_arrays(bundle, state, 0))
    with open(metrics_path, mode) as mf:
        for t in range(start_step + 1, cfg.t_max + 1):
            rng = step_rng(cfg.seed, t, 1)
            utts = [waves[i] for i in _pick_batch(waves, cfg, t)]
            rec = train_step(utts, bundle, targets, cfg, t, rng, buffer,
                             mask_spec, aug_cfg, state)
            records.append(rec)
            mf.write(rec.to_json() + "\n")
            if t % every == 0:
                save_checkpoint(out_dir / f"ckpt_{t:06d}.bin", config_echo,
                                _checkpoint_arrays(bundle, state, t))
    final = out_dir / "ckpt_final.bin"
    save_checkpoint(final, config_echo, _checkpoint_arrays(bundle, state, cfg.t_max))
    return bundle, final, records
