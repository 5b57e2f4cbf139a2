"""Student/teacher network family at desk scale.

Conv frontend with Snake-Beta and density-adaptive attention, a small
conformer stack with gated relative position bias, attention-weighted
layer aggregation, a residual-MLP cluster head, a one-block conformer
predictor, and EMA target maintenance. Everything is built on the
`tensor` autodiff module; one utterance is processed at a time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as tc

DAAM_NORM_EPS = 1e-5


@dataclass
class EncoderConfig:
    frontend: str = "mel"                 # "mel" (stride 1) or "wav" (strided)
    n_mels: int = 80
    channels: tuple = (8, 16, 32)
    strides: tuple = (4, 4, 2)            # wav frontend only
    n_conformer_layers: int = 2
    latent_dim: int = 32
    n_heads: int = 4
    ffn_mult: int = 4
    conv_kernel: int = 31
    rel_pos_buckets: int = 64
    rel_pos_max_dist: int = 160
    daam_gaussians: int = 2
    dilations: tuple = (1, 3, 5)
    cluster_k: int = 16
    cluster_hidden: int = 64
    cluster_blocks: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim % self.n_heads != 0:
            raise ValueError("latent_dim must be divisible by n_heads")
        if self.frontend not in ("mel", "wav"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be positive")

    @property
    def total_stride(self):
        if self.frontend == "mel":
            return 1
        out = 1
        for s in self.strides:
            out *= s
        return out

    def to_dict(self):
        d = dict(self.__dict__)
        for k in ("channels", "strides", "dilations"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("channels", "strides", "dilations"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# -- initialization --------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_conv(store, rng, name, c_out, c_in, k):
    store.add(f"{name}.w", _uniform(rng, (c_out, c_in, k), c_in * k))
    store.add(f"{name}.b", np.zeros(c_out))


def _add_linear(store, rng, name, d_in, d_out, bias=True):
    store.add(f"{name}.w", _uniform(rng, (d_in, d_out), d_in))
    if bias:
        store.add(f"{name}.b", np.zeros(d_out))


def _add_ln(store, name, dim):
    store.add(f"{name}.g", np.ones(dim))
    store.add(f"{name}.b", np.zeros(dim))


def _add_conformer_layer(store, rng, name, cfg):
    c = cfg.latent_dim
    h = cfg.ffn_mult * c
    for ffn in ("ffn1", "ffn2"):
        _add_ln(store, f"{name}.{ffn}.ln", c)
        _add_linear(store, rng, f"{name}.{ffn}.l1", c, h)
        _add_linear(store, rng, f"{name}.{ffn}.l2", h, c)
    _add_ln(store, f"{name}.mhsa.ln", c)
    for proj in ("wq", "wk", "wv", "wo"):
        _add_linear(store, rng, f"{name}.mhsa.{proj}", c, c)
    dh = c // cfg.n_heads
    store.add(f"{name}.mhsa.gate_u", np.zeros((cfg.n_heads, dh)))
    store.add(f"{name}.mhsa.gate_w", np.zeros((cfg.n_heads, dh)))
    store.add(f"{name}.mhsa.gate_s", np.ones(cfg.n_heads))
    _add_ln(store, f"{name}.conv.ln", c)
    _add_linear(store, rng, f"{name}.conv.pw1", c, 2 * c)
    _add_conv(store, rng, f"{name}.conv.dw", c, 1, cfg.conv_kernel)
    _add_ln(store, f"{name}.conv.ln2", c)
    _add_linear(store, rng, f"{name}.conv.pw2", c, c)


def init_params(cfg, seed=None):
    """Build the full online ParamStore (encoder, heads, predictor, t_mask)."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    store = tc.ParamStore(seed)
    c_in = cfg.n_mels if cfg.frontend == "mel" else 1
    _add_conv(store, rng, "enc.in_conv", cfg.channels[0], c_in, 7)
    prev = cfg.channels[0]
    for i, c in enumerate(cfg.channels):
        name = f"enc.stage{i}"
        if cfg.frontend == "mel":
            _add_conv(store, rng, f"{name}.conv", c, prev, 3)
        else:
            _add_conv(store, rng, f"{name}.conv", c, prev, 2 * cfg.strides[i])
        store.add(f"{name}.snake_a", np.zeros((c, 1)))
        for j, d in enumerate(cfg.dilations):
            _add_conv(store, rng, f"{name}.dil{j}", c, c, 3)
            store.add(f"{name}.dil{j}.snake_a", np.zeros((c, 1)))
        if c % cfg.n_heads != 0:
            raise ValueError(f"stage {i} channels {c} not divisible by {cfg.n_heads} heads")
        store.add(f"{name}.daam.delta",
                  np.tile(np.linspace(-1.0, 1.0, cfg.daam_gaussians), (cfg.n_heads, 1)))
        store.add(f"{name}.daam.scale", np.ones((cfg.n_heads, cfg.daam_gaussians)))
        prev = c
    if prev != cfg.latent_dim:
        _add_conv(store, rng, "enc.proj", cfg.latent_dim, prev, 1)
    # relative-position bias table shared by all attention blocks
    store.add("relpos.table", np.zeros((cfg.n_heads, n_buckets(cfg.rel_pos_buckets))))
    for l in range(cfg.n_conformer_layers):
        _add_conformer_layer(store, rng, f"enc.conf{l}", cfg)
    _add_linear(store, rng, "agg.wq", cfg.latent_dim, cfg.latent_dim, bias=False)
    _add_linear(store, rng, "agg.wk", cfg.latent_dim, cfg.latent_dim, bias=False)
    # cluster head
    _add_linear(store, rng, "head.in", cfg.latent_dim, cfg.cluster_hidden)
    _add_ln(store, "head.in.ln", cfg.cluster_hidden)
    for l in range(cfg.cluster_blocks):
        _add_ln(store, f"head.blk{l}.ln", cfg.cluster_hidden)
        _add_linear(store, rng, f"head.blk{l}.l1", cfg.cluster_hidden, cfg.cluster_hidden)
        _add_linear(store, rng, f"head.blk{l}.l2", cfg.cluster_hidden, cfg.cluster_hidden)
    _add_ln(store, "head.out.ln", cfg.cluster_hidden)
    _add_linear(store, rng, "head.out", cfg.cluster_hidden, cfg.cluster_k)
    # predictor
    _add_conv(store, rng, "pred.in_conv", cfg.latent_dim, cfg.latent_dim, 1)
    _add_conformer_layer(store, rng, "pred.conf", cfg)
    _add_conv(store, rng, "pred.out_conv", cfg.latent_dim, cfg.latent_dim, 1)
    store.add("t_mask", rng.normal(0.0, 0.02, size=cfg.latent_dim))
    return store


ENCODER_PREFIXES = ("enc.", "agg.", "relpos.")


def encoder_param_names(store):
    return [n for n in store.names() if n.startswith(ENCODER_PREFIXES)]


# -- activations and blocks ------------------------------------------------

def snake_beta(x, a):
    """x + sin^2(alpha x) / alpha with alpha = softplus(a) + 0.01."""
    alpha = tc.add(tc.softplus(a), 0.01)
    return tc.add(x, tc.div(tc.square(tc.sin(tc.mul(x, alpha))), alpha))


def daam(x, delta, scale, n_heads, eps=DAAM_NORM_EPS):
    """Density-adaptive attention on (C, T): per-channel standardization
    along time, Gaussian-product log-weights per head, time-axis softmax,
    multiplicative attention with residual."""
    c = x.shape[0]
    if c % n_heads != 0:
        raise tc.ShapeError(f"daam: {c} channels not divisible by {n_heads} heads")
    ch = c // n_heads
    n_g = delta.shape[1]
    outs = []
    log_2pi = np.log(2.0 * np.pi)
    for h in range(n_heads):
        xs = x[h * ch:(h + 1) * ch]
        mu = tc.tmean(xs, axis=1, keepdims=True)
        xc = tc.sub(xs, mu)
        sd = tc.sqrt(tc.tmean(tc.square(xc), axis=1, keepdims=True))
        xb = tc.div(xc, tc.add(sd, eps))
        logw = None
        for i in range(n_g):
            c2 = tc.square(scale[h, i])
            term = tc.sub(
                tc.div(tc.square(tc.sub(xb, delta[h, i])), tc.mul(c2, -2.0)),
                tc.mul(tc.add(tc.log(c2), log_2pi), 0.5))
            logw = term if logw is None else tc.add(logw, term)
        att = tc.softmax(logw, axis=1)
        outs.append(tc.add(tc.mul(xs, att), xs))
    return tc.concat(outs, axis=0)


def n_buckets(b):
    """Table size for signed distances: [0, B/2] forward, (B/2, B] backward."""
    return b + 1


def rel_pos_bucket(distance, b, d_max):
    """Log-bucketing of a relative distance; identity below B/4,
    log-interpolated above, negative distances offset by B/2."""
    d = np.asarray(distance)
    ad = np.minimum(np.abs(d), d_max)
    quarter = b // 4
    lin = ad
    with np.errstate(divide="ignore"):
        logpart = np.floor(
            quarter + quarter * np.log(np.maximum(ad, 1) / quarter)
            / np.log(d_max / quarter)).astype(np.int64)
    bucket = np.where(ad < quarter, lin, logpart)
    bucket = np.where(d < 0, bucket + b // 2, bucket)
    return bucket if bucket.ndim else int(bucket)


@lru_cache(maxsize=64)
def _bucket_matrix(t, b, d_max):
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    return rel_pos_bucket(i - j, b, d_max)


def gated_rel_pos_bias(q_head, table_head, u, w, s, bucket_idx):
    """Bias r = d + g_update * d + (1 - g_update) * (s * g_reset * d),
    with per-position gates sigmoid(q.u) and sigmoid(q.w)."""
    d = tc.index_select_last(table_head, bucket_idx)          # (T, T)
    g_up = tc.sigmoid(tc.matmul(q_head, tc.reshape(u, (-1, 1))))   # (T, 1)
    g_re = tc.sigmoid(tc.matmul(q_head, tc.reshape(w, (-1, 1))))
    tilde = tc.mul(tc.mul(s, g_re), d)
    return tc.add(tc.add(d, tc.mul(g_up, d)), tc.mul(tc.sub(1.0, g_up), tilde))


def _linear(x, store, name, bias=True):
    out = tc.matmul(x, store[f"{name}.w"])
    if bias:
        out = tc.add(out, store[f"{name}.b"])
    return out


def _ln(x, store, name):
    return tc.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def _ffn(x, store, name):
    h = _ln(x, store, f"{name}.ln")
    h = tc.gelu(_linear(h, store, f"{name}.l1"))
    return _linear(h, store, f"{name}.l2")


def _mhsa(x, store, name, cfg, bucket_idx):
    t, c = x.shape
    heads = cfg.n_heads
    dh = c // heads
    xn = _ln(x, store, f"{name}.ln")
    q = tc.transpose(tc.reshape(_linear(xn, store, f"{name}.wq"), (t, heads, dh)), (1, 0, 2))
    k = tc.transpose(tc.reshape(_linear(xn, store, f"{name}.wk"), (t, heads, dh)), (1, 0, 2))
    v = tc.transpose(tc.reshape(_linear(xn, store, f"{name}.wv"), (t, heads, dh)), (1, 0, 2))
    table = store["relpos.table"]
    outs = []
    inv_sqrt = 1.0 / np.sqrt(dh)
    for h in range(heads):
        qh, kh, vh = q[h], k[h], v[h]
        bias = gated_rel_pos_bias(qh, table[h], store[f"{name}.gate_u"][h],
                                  store[f"{name}.gate_w"][h],
                                  store[f"{name}.gate_s"][h], bucket_idx)
        scores = tc.add(tc.mul(tc.matmul(qh, tc.transpose(kh)), inv_sqrt), bias)
        outs.append(tc.matmul(tc.softmax(scores, axis=-1), vh))
    merged = tc.concat(outs, axis=1)
    return _linear(merged, store, f"{name}.wo")


def _conv_module(x, store, name, cfg):
    h = _ln(x, store, f"{name}.ln")
    h = tc.glu(_linear(h, store, f"{name}.pw1"), axis=-1)
    h = tc.transpose(h)
    pad = (cfg.conv_kernel - 1) // 2
    h = tc.conv1d(h, store[f"{name}.dw.w"], bias=store[f"{name}.dw.b"],
                  pad=pad, groups=h.shape[0])
    h = tc.transpose(h)
    h = tc.gelu(_ln(h, store, f"{name}.ln2"))
    return _linear(h, store, f"{name}.pw2")


def conformer_block(x, store, name, cfg, bucket_idx=None):
    """Half-step FFN, MHSA with gated relative position bias, conv module
    with GLU, half-step FFN; all residual."""
    if bucket_idx is None:
        bucket_idx = _bucket_matrix(x.shape[0], cfg.rel_pos_buckets, cfg.rel_pos_max_dist)
    x = tc.add(x, tc.mul(_ffn(x, store, f"{name}.ffn1"), 0.5))
    x = tc.add(x, _mhsa(x, store, f"{name}.mhsa", cfg, bucket_idx))
    x = tc.add(x, _conv_module(x, store, f"{name}.conv", cfg))
    x = tc.add(x, tc.mul(_ffn(x, store, f"{name}.ffn2"), 0.5))
    return x


def layer_aggregate(layers, store, cfg):
    """Convex combination of layer outputs, weighted by attention from the
    time-pooled last layer over the time-pooled stack."""
    pooled = [tc.reshape(tc.tmean(l, axis=0), (1, -1)) for l in layers]
    stacked = tc.concat(pooled, axis=0)                      # (L, C)
    qv = tc.matmul(pooled[-1], store["agg.wq.w"])
    kv = tc.matmul(stacked, store["agg.wk.w"])
    scores = tc.mul(tc.matmul(qv, tc.transpose(kv)), 1.0 / np.sqrt(cfg.latent_dim))
    weights = tc.softmax(scores, axis=-1)                    # (1, L)
    out = None
    for l, layer in enumerate(layers):
        term = tc.mul(layer, weights[0:1, l:l + 1])
        out = term if out is None else tc.add(out, term)
    return out, weights


def _frontend(x, store, cfg):
    """Conv frontend on (C_in, T_in); returns (C_latent, T)."""
    h = tc.conv1d(x, store["enc.in_conv.w"], bias=store["enc.in_conv.b"], pad=3)
    for i, c in enumerate(cfg.channels):
        name = f"enc.stage{i}"
        if cfg.frontend == "mel":
            h = tc.conv1d(h, store[f"{name}.conv.w"], bias=store[f"{name}.conv.b"], pad=1)
        else:
            s = cfg.strides[i]
            h = tc.conv1d(h, store[f"{name}.conv.w"], bias=store[f"{name}.conv.b"],
                          stride=s, pad=s // 2)
        h = snake_beta(h, store[f"{name}.snake_a"])
        for j, d in enumerate(cfg.dilations):
            inner = snake_beta(h, store[f"{name}.dil{j}.snake_a"])
            h = tc.add(h, tc.conv1d(inner, store[f"{name}.dil{j}.w"],
                                    bias=store[f"{name}.dil{j}.b"], dilation=d, pad=d))
        h = daam(h, store[f"{name}.daam.delta"], store[f"{name}.daam.scale"], cfg.n_heads)
    if "enc.proj.w" in store:
        h = tc.conv1d(h, store["enc.proj.w"], bias=store["enc.proj.b"])
    return h


def encode(x, cfg, store):
    """Full encoder: frontend, conformer stack, layer aggregation.

    x is a (T, n_mels) array for the mel frontend or a (samples,) array for
    the wav frontend. Returns (aggregated (T, C) latents, per-layer list).
    """
    x = np.asarray(x)
    if cfg.frontend == "mel":
        if x.ndim != 2 or x.shape[1] != cfg.n_mels:
            raise tc.ShapeError(f"expected (T, {cfg.n_mels}) mel input, got {x.shape}")
        inp = tc.constant(x.T)
    else:
        if x.ndim != 1:
            raise tc.ShapeError(f"expected 1-D waveform, got shape {x.shape}")
        inp = tc.constant(x[None, :])
    h = _frontend(inp, store, cfg)
    ht = tc.transpose(h)
    layers = [ht]
    t = ht.shape[0]
    bucket_idx = _bucket_matrix(t, cfg.rel_pos_buckets, cfg.rel_pos_max_dist)
    for l in range(cfg.n_conformer_layers):
        ht = conformer_block(ht, store, f"enc.conf{l}", cfg, bucket_idx)
        layers.append(ht)
    z_agg, _ = layer_aggregate(layers, store, cfg)
    return z_agg, layers


def cluster_head(z, store, cfg):
    """Residual-MLP head mapping (T, C) latents to (T, K) logits."""
    h = tc.gelu(_ln(_linear(z, store, "head.in"), store, "head.in.ln"))
    for l in range(cfg.cluster_blocks):
        name = f"head.blk{l}"
        inner = tc.gelu(_linear(_ln(h, store, f"{name}.ln"), store, f"{name}.l1"))
        h = tc.add(h, _linear(inner, store, f"{name}.l2"))
    return _linear(_ln(h, store, "head.out.ln"), store, "head.out")


def predictor(z_tilde, store, cfg):
    """Conv projection, GELU, one conformer block (shared relative position
    bias table), conv projection; shape-preserving on (T, C)."""
    h = tc.transpose(z_tilde)
    h = tc.conv1d(h, store["pred.in_conv.w"], bias=store["pred.in_conv.b"])
    h = tc.gelu(tc.transpose(h))
    h = conformer_block(h, store, "pred.conf", cfg)
    h = tc.transpose(h)
    h = tc.conv1d(h, store["pred.out_conv.w"], bias=store["pred.out_conv.b"])
    return tc.transpose(h)


# -- EMA target ------------------------------------------------------------

def ema_update(online, target, tau):
    """target <- tau * target + (1 - tau) * online, per encoder parameter."""
    for name, t in target.items():
        p = online[name]
        if p.value.shape != t.value.shape:
            raise tc.ShapeError(f"ema_update: {name} shapes {p.value.shape} vs {t.value.shape}")
        t.value = tau * t.value + (1.0 - tau) * p.value


class ModelBundle:
    """Online parameters plus the EMA target copy of the encoder subset."""

    def __init__(self, cfg, tau=0.996, seed=None):
        self.cfg = cfg
        self.tau = tau
        self.online = init_params(cfg, seed)
        self.target = tc.ParamStore(self.online.rng_seed)
        for name in encoder_param_names(self.online):
            self.target.add(name, self.online[name].value.copy(), requires_grad=False)

    def ema_step(self):
        ema_update(self.online, self.target, self.tau)

    def encode_online(self, x):
        return encode(x, self.cfg, self.online)

    def encode_target(self, x):
        z, layers = encode(x, self.cfg, self.target)
        return z, layers


# -- checkpoints -----------------------------------------------------------

_CKPT_MAGIC = b"MELCKPT1"


def save_checkpoint(path, config_dict, arrays):
    """Named-array container: magic, version, config JSON echo, then
    (name, dtype, shape, little-endian data) records. Bit-exact round trip."""
    path = Path(path)
    blob = json.dumps(config_dict, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<BI", 1, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            nb = name.encode()
            dt = arr.dtype.newbyteorder("<")
            dts = dt.str.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<H", len(dts)) + dts)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape) if arr.ndim else b"")
            f.write(arr.astype(dt).tobytes())


def load_checkpoint(path):
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<BI", f.read(5))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config_dict = json.loads(f.read(blob_len).decode())
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (dlen,) = struct.unpack("<H", f.read(2))
            dt = np.dtype(f.read(dlen).decode())
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(f.read(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    return config_dict, arrays
