"""Diagnostics over cluster assignments and exported frame embeddings:
utilization entropy, used-cluster counts, temporal consistency, per-frame
confidence, NMI between labelings, a k-means cross-model comparison, and a
small linear probe. Natural logs throughout."""

from __future__ import annotations

import csv
import json
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .audio import log_mel
from .clustering import lloyd_fit, hard_labels
from .encoder import EncoderConfig, cluster_head, encode, load_checkpoint

log = logging.getLogger(__name__)


@dataclass
class AssignmentSeq:
    ids: np.ndarray                  # length-T cluster ids
    posteriors: np.ndarray = None    # optional T x K row-stochastic

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.posteriors is not None:
            self.posteriors = np.asarray(self.posteriors, dtype=np.float64)
            sums = self.posteriors.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-9):
                raise ValueError("posterior rows must sum to 1 within 1e-9")


@dataclass
class MetricsReport:
    normalized_entropy_pct: float
    used_clusters: int
    adjacent_consistency: float
    mean_confidence: float
    cluster_counts: list

    def to_dict(self):
        return dict(self.__dict__)


# -- scalar metrics --------------------------------------------------------

def _counts(ids, k):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise ValueError(f"cluster id outside [0, {k})")
    return np.bincount(ids, minlength=k)


def cluster_entropy(ids, k):
    """Corpus-level usage entropy as a percentage of log K."""
    if k < 2:
        raise ValueError("entropy normalizer needs K >= 2")
    counts = _counts(ids, k)
    total = counts.sum()
    if total < 1:
        raise ValueError("no frames")
    p = counts[counts > 0] / total
    h = -(p * np.log(p)).sum()
    return 100.0 * h / np.log(k)


def used_clusters(ids, k):
    return int((_counts(ids, k) > 0).sum())


def adjacent_consistency(id_seqs):
    """Frame-weighted fraction of consecutive same-id pairs; accepts one
    sequence or a list of per-utterance sequences. Sequences shorter than
    two frames are skipped with a warning."""
    if isinstance(id_seqs, np.ndarray) and id_seqs.ndim == 1:
        id_seqs = [id_seqs]
    same = 0
    pairs = 0
    for seq in id_seqs:
        seq = np.asarray(seq)
        if seq.size < 2:
            warnings.warn("adjacent_consistency: skipping utterance with T < 2")
            continue
        same += int((seq[:-1] == seq[1:]).sum())
        pairs += seq.size - 1
    if pairs == 0:
        raise ValueError("no adjacent pairs available")
    return same / pairs


def frame_confidence(posteriors):
    """1 - H(row)/log K per frame; 1 for one-hot rows, 0 for uniform."""
    p = np.asarray(posteriors, dtype=np.float64)
    k = p.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
    return 1.0 - h / np.log(k)


def _entropy_from_counts(counts):
    total = counts.sum()
    p = counts[counts > 0] / total
    return -(p * np.log(p)).sum()


def nmi(u, v):
    """2 I(U;V) / (H(U) + H(V)) from the joint contingency table; 0 when
    both labelings are constant."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    if u.size < 1:
        raise ValueError("empty labelings")
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    nu, nv = ui.max() + 1, vi.max() + 1
    joint = np.zeros((nu, nv))
    np.add.at(joint, (ui, vi), 1.0)
    n = u.size
    pj = joint / n
    pu = pj.sum(axis=1)
    pv = pj.sum(axis=0)
    hu = _entropy_from_counts(pu * n)
    hv = _entropy_from_counts(pv * n)
    if hu + hv == 0.0:
        return 0.0
    outer = pu[:, None] * pv[None, :]
    nz = pj > 0
    i = (pj[nz] * np.log(pj[nz] / outer[nz])).sum()
    return float(2.0 * i / (hu + hv))


def kmeans_nmi_matrix(dumps, k_probe, seed):
    """Pairwise NMI between k-means labelings of several embedding dumps
    covering the same frames; shared seed, diagonal exactly 1."""
    n = {d.shape[0] for d in dumps}
    if len(n) != 1:
        raise ValueError(f"dumps cover different frame counts: {sorted(n)}")
    labelings = []
    for d in dumps:
        km = lloyd_fit(np.asarray(d, dtype=np.float64), k_probe, iters=20, seed=seed)
        labelings.append(hard_labels(km, d))
    m = len(dumps)
    out = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            out[i, j] = out[j, i] = nmi(labelings[i], labelings[j])
    return out


# -- linear probe ----------------------------------------------------------

def _probe_once(x_tr, y_tr, x_te, y_te, n_classes, l2, epochs, lr, seed):
    rng = np.random.default_rng(seed)
    d = x_tr.shape[1]
    w = rng.normal(0.0, 0.01, size=(d, n_classes))
    b = np.zeros(n_classes)
    y1 = np.zeros((len(y_tr), n_classes))
    y1[np.arange(len(y_tr)), y_tr] = 1.0
    n = len(y_tr)
    for _ in range(epochs):
        logits = x_tr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - y1) / n
        w -= lr * (x_tr.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    pred = (x_te @ w + b).argmax(axis=1)
    return float((pred == y_te).mean())


def linear_probe(x_train, y_train, x_test, y_test, l2=1e-4, epochs=300,
                 lr=0.5, seeds=(0, 1, 2)):
    """Multinomial logistic regression by full-batch gradient descent on
    standardized features; held-out accuracy as (mean, std, per-seed)."""
    x_train = np.asarray(x_train, dtype=np.float64)
    x_test = np.asarray(x_test, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_test = np.asarray(y_test, dtype=np.int64)
    classes = np.unique(y_train)
    if classes.size < 2:
        raise ValueError("training labels contain a single class")
    n_classes = int(max(classes.max(), y_test.max())) + 1
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-8
    x_tr = (x_train - mu) / sd
    x_te = (x_test - mu) / sd
    if len(seeds) < 3:
        raise ValueError("need at least 3 probe seeds")
    accs = [_probe_once(x_tr, y_train, x_te, y_test, n_classes, l2, epochs, lr, s)
            for s in seeds]
    return float(np.mean(accs)), float(np.std(accs)), accs


# -- embedding export ------------------------------------------------------

_EMB_MAGIC = b"MELEMBD1"


def export_embeddings(ckpt_path, corpus, out_path, max_utterances=None):
    """Run a checkpointed online model over clean utterances and dump frame
    embeddings, cluster posteriors, argmax IDs, and confidences (32-bit LE)
    plus a per-utterance frame-count table."""
    config, arrays = load_checkpoint(ckpt_path)
    enc_cfg = EncoderConfig.from_dict(config["encoder"])
    train_cfg = config["train"]
    store = tc.ParamStore()
    for name, v in arrays.items():
        if name.startswith("online/"):
            store.add(name[len("online/"):], v, requires_grad=False)
    waves = [c[0] if isinstance(c, tuple) else c for c in corpus]
    if max_utterances is not None:
        waves = waves[:max_utterances]
    embs, posts, lens = [], [], []
    for wav in waves:
        mel = log_mel(wav, n_mels=train_cfg["n_mels"],
                      frame_len=train_cfg["frame_len"],
                      frame_hop=train_cfg["frame_hop"]).frames
        z, _ = encode(mel, enc_cfg, store)
        p = tc.softmax(cluster_head(z, store, enc_cfg), axis=-1)
        embs.append(z.value)
        posts.append(p.value)
        lens.append(z.shape[0])
    emb = np.concatenate(embs).astype("<f4")
    post = np.concatenate(posts).astype("<f4")
    ids = post.argmax(axis=1).astype("<i4")
    conf = frame_confidence(post.astype(np.float64)).astype("<f4")
    lens = np.asarray(lens, dtype="<i4")
    with open(out_path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<BIIII", 1, emb.shape[0], emb.shape[1],
                            post.shape[1], lens.size))
        f.write(lens.tobytes())
        f.write(emb.tobytes())
        f.write(post.tobytes())
        f.write(ids.tobytes())
        f.write(conf.tobytes())
    return Path(out_path)


def load_embeddings(path):
    """Returns dict with embeddings, posteriors, ids, confidences, and the
    per-utterance frame-count table."""
    with open(path, "rb") as f:
        if f.read(8) != _EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding dump")
        version, n, c, k, n_utt = struct.unpack("<BIIII", f.read(17))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        lens = np.frombuffer(f.read(4 * n_utt), dtype="<i4")
        emb = np.frombuffer(f.read(4 * n * c), dtype="<f4").reshape(n, c)
        post = np.frombuffer(f.read(4 * n * k), dtype="<f4").reshape(n, k)
        ids = np.frombuffer(f.read(4 * n), dtype="<i4")
        conf = np.frombuffer(f.read(4 * n), dtype="<f4")
    return {"embeddings": emb, "posteriors": post, "ids": ids,
            "confidences": conf, "utterance_lengths": lens}


def split_by_utterance(flat, lengths):
    out = []
    off = 0
    for n in lengths:
        out.append(flat[off:off + n])
        off += n
    return out


# -- reports ---------------------------------------------------------------

def compute_report(dump, k):
    ids = dump["ids"]
    seqs = split_by_utterance(ids, dump["utterance_lengths"])
    counts = _counts(ids, k)
    return MetricsReport(
        normalized_entropy_pct=cluster_entropy(ids, k),
        used_clusters=used_clusters(ids, k),
        adjacent_consistency=adjacent_consistency(seqs),
        mean_confidence=float(np.mean(frame_confidence(
            dump["posteriors"].astype(np.float64)))),
        cluster_counts=[int(x) for x in counts])


def write_report_json(report, path):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_cluster_counts_csv(report, path):
    """Per-cluster frame counts sorted by rank (largest first)."""
    order = np.argsort(report.cluster_counts)[::-1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "cluster_id", "frames"])
        for rank, cid in enumerate(order):
            writer.writerow([rank, int(cid), report.cluster_counts[cid]])


def write_nmi_csv(matrix, names, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([""] + list(names))
        for name, row in zip(names, matrix):
            writer.writerow([name] + [f"{v:.6f}" for v in row])
