"""Command-line entry points: corpus synthesis, target fitting, pretraining,
analysis, and gradient self-checks.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Progress goes to stderr; machine-readable outputs go to files only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import config as cf
from . import trainer as tr
from .audio import load_corpus, log_mel, write_corpus
from .clustering import (GmmModel, KmeansModel, gmm_fit_minibatch, lloyd_fit,
                         load_targets, save_targets)
from .gradcheck import grad_check

CONFIG_ENV = "MELANCHOR_CONFIG"


def _log(msg):
    print(msg, file=sys.stderr)


def _load_cfg(args, overrides):
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    cfg = cf.load_config(path)
    return cf.apply_overrides(cfg, overrides)


def _mel_frames(cfg, corpus):
    f = cfg["features"]
    return np.concatenate([
        log_mel(buf, n_mels=f["n_mels"], frame_len=f["frame_len"],
                frame_hop=f["frame_hop"]).frames
        for buf, _ in corpus])


# -- subcommands -----------------------------------------------------------

def cmd_synth_corpus(args):
    cfg = _load_cfg(args, {})
    spec = cf.corpus_spec(cfg)
    f = cfg["features"]
    manifest = write_corpus(spec, args.out, frame_len=f["frame_len"],
                            frame_hop=f["frame_hop"])
    cf.write_snapshot(cfg, {}, args.out)
    _log(f"wrote {spec.n_utterances} utterances, manifest at {manifest}")
    return 0


def cmd_fit_targets(args):
    cfg = _load_cfg(args, {})
    corpus, _ = load_corpus(Path(args.corpus) / "manifest.json"
                            if Path(args.corpus).is_dir() else args.corpus)
    frames = _mel_frames(cfg, corpus)
    if args.method == "gmm":
        g = cfg["gmm"]
        model, report = gmm_fit_minibatch(
            frames, g["k"], epochs=g["epochs"], lr_start=g["lr_start"],
            lr_end=g["lr_end"], batch=g["batch"], seed=g["seed"],
            holdout_frac=g["holdout_frac"])
        model.freeze()
        metadata = {"method": "gmm", "k": g["k"], "epochs": report.epochs,
                    "seed": report.seed, "var_floor_hits": report.var_floor_hits,
                    "final_held_out_ll": report.final_held_out_ll,
                    "n_frames": int(frames.shape[0])}
    else:
        k = cfg["kmeans"]
        model = lloyd_fit(frames, k["k"], iters=k["iters"], seed=k["seed"])
        metadata = {"method": "kmeans", "k": k["k"], "lloyd_iterations": k["iters"],
                    "seed": k["seed"], "n_frames": int(frames.shape[0])}
    save_targets(args.out, model, metadata)
    cf.write_snapshot(cfg, {}, Path(args.out).parent)
    _log(f"fitted {args.method} targets on {frames.shape[0]} frames -> {args.out}")
    return 0


def cmd_pretrain(args):
    overrides = {}
    if args.lambda_end is not None:
        overrides["train.lambda_end"] = args.lambda_end
    if args.pure_jepa:
        overrides["train.pure_jepa"] = True
    if args.baseline:
        overrides["train.baseline_mode"] = True
    cfg = _load_cfg(args, overrides)
    if args.targets is None and not cfg["train"]["pure_jepa"]:
        _log("error: --targets is required unless --pure-jepa is set")
        return 2
    targets = None
    if args.targets is not None:
        targets = load_targets(args.targets)
        if cfg["train"]["baseline_mode"] and not isinstance(targets, KmeansModel):
            _log("error: --baseline requires a k-means targets file")
            return 2
        if not cfg["train"]["baseline_mode"] and not isinstance(targets, GmmModel):
            _log("error: soft-target mode requires a GMM targets file (or --baseline)")
            return 2
    corpus, _ = load_corpus(Path(args.corpus) / "manifest.json"
                            if Path(args.corpus).is_dir() else args.corpus)
    cluster_k = targets.K if targets is not None else cfg["gmm"]["k"]
    enc_cfg = cf.encoder_config(cfg, cluster_k)
    train_cfg = cf.train_config(cfg)
    cf.write_snapshot(cfg, overrides, args.out)
    _, final, records = tr.run_pretraining(
        train_cfg, enc_cfg, corpus, targets, args.out,
        mask_spec=cf.mask_spec(cfg), aug_cfg=cf.augment_config(cfg),
        resume_from=args.resume)
    _log(f"trained {len(records)} steps, final checkpoint {final}")
    return 0


def cmd_analyze(args):
    cfg = _load_cfg(args, {})
    out_dir = Path(args.report)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus, manifest = load_corpus(Path(args.corpus) / "manifest.json"
                                   if Path(args.corpus).is_dir() else args.corpus)
    a = cfg["analysis"]
    if args.compare:
        dumps = [an.load_embeddings(p)["embeddings"] for p in args.compare]
        matrix = an.kmeans_nmi_matrix(dumps, a["k_probe"], a["seed"])
        an.write_nmi_csv(matrix, [Path(p).name for p in args.compare],
                         out_dir / "nmi_matrix.csv")
        _log(f"wrote NMI matrix for {len(dumps)} dumps")
        return 0
    if args.checkpoint is None:
        _log("error: --checkpoint is required unless --compare is used")
        return 2
    dump_path = an.export_embeddings(args.checkpoint, corpus,
                                     out_dir / "embeddings.bin",
                                     max_utterances=a["max_utterances"])
    dump = an.load_embeddings(dump_path)
    k = dump["posteriors"].shape[1]
    report = an.compute_report(dump, k)
    an.write_report_json(report, out_dir / "report.json")
    an.write_cluster_counts_csv(report, out_dir / "cluster_counts.csv")
    ids = dump["ids"]
    seqs = an.split_by_utterance(ids, dump["utterance_lengths"])
    lab_seqs = [lab for _, lab in corpus[:len(seqs)]]
    aligned_ids, aligned_labs = [], []
    for s, l in zip(seqs, lab_seqs):
        n = min(len(s), len(l))
        aligned_ids.append(s[:n])
        aligned_labs.append(l[:n])
    label_nmi = an.nmi(np.concatenate(aligned_ids), np.concatenate(aligned_labs))
    with open(out_dir / "report.json") as f:
        blob = json.load(f)
    blob["label_nmi"] = label_nmi
    with open(out_dir / "report.json", "w") as f:
        json.dump(blob, f, indent=2, sort_keys=True)
        f.write("\n")
    cf.write_snapshot(cfg, {}, out_dir)
    _log(f"report at {out_dir / 'report.json'} (entropy "
         f"{report.normalized_entropy_pct:.1f}%, label NMI {label_nmi:.3f})")
    return 0


# -- gradcheck command -----------------------------------------------------

def _gradcheck_suites():
    from . import encoder as en
    from . import tensor as tc

    cfg = en.EncoderConfig(frontend="mel", n_mels=5, channels=(4,), strides=(2,),
                           n_conformer_layers=1, latent_dim=4, n_heads=2,
                           ffn_mult=2, conv_kernel=5, rel_pos_buckets=16,
                           rel_pos_max_dist=40, dilations=(1,), cluster_k=4,
                           cluster_hidden=6, cluster_blocks=1, seed=0)
    rng = np.random.default_rng(0)

    def snake():
        st = tc.ParamStore()
        st.add("a", rng.normal(size=(3, 1)))
        st.add("x", rng.normal(size=(3, 6)))
        return st, lambda p: tc.tmean(tc.square(en.snake_beta(p["x"], p["a"]))), None

    def daam():
        st = tc.ParamStore()
        st.add("x", rng.normal(size=(4, 6)))
        st.add("delta", rng.normal(size=(2, 2)))
        st.add("scale", rng.normal(size=(2, 2)) * 0.3 + 1.0)
        return st, lambda p: tc.tmean(tc.square(
            en.daam(p["x"], p["delta"], p["scale"], 2))), None

    def relpos():
        st = tc.ParamStore()
        st.add("q", rng.normal(size=(4, 3)))
        st.add("table", rng.normal(size=(9,)))
        st.add("u", rng.normal(size=3))
        st.add("w", rng.normal(size=3))
        st.add("s", np.array(0.8))
        idx = np.random.default_rng(1).integers(0, 9, size=(4, 4))
        return st, lambda p: tc.tmean(tc.square(en.gated_rel_pos_bias(
            p["q"], p["table"], p["u"], p["w"], p["s"], idx))), None

    def _subset(prefixes):
        full = en.init_params(cfg)
        st = tc.ParamStore()
        for name, p in full.items():
            if name.startswith(prefixes):
                st.add(name, p.value.copy())
        return st

    def conformer():
        st = _subset(("enc.conf0.", "relpos."))
        x = rng.normal(size=(5, cfg.latent_dim))
        return st, lambda p: tc.tmean(tc.square(
            en.conformer_block(tc.constant(x), p, "enc.conf0", cfg))), 6

    def head():
        st = _subset(("head.",))
        z = rng.normal(size=(4, cfg.latent_dim))
        return st, lambda p: tc.tmean(tc.square(
            en.cluster_head(tc.constant(z), p, cfg))), 6

    def predictor():
        st = _subset(("pred.", "relpos."))
        z = rng.normal(size=(5, cfg.latent_dim))
        return st, lambda p: tc.tmean(tc.square(
            en.predictor(tc.constant(z), p, cfg))), 5

    def full_encoder():
        st = _subset(("enc.", "agg.", "relpos."))
        mel = rng.normal(size=(6, cfg.n_mels))
        return st, lambda p: tc.tmean(tc.square(en.encode(mel, cfg, p)[0])), 3

    def losses():
        tgt = rng.normal(size=(5, 3))
        q = rng.dirichlet(np.ones(4), size=5)
        keep = np.array([True, False, False, True, False])
        st = tc.ParamStore()
        st.add("pred", rng.normal(size=(5, 3)))
        st.add("logits", rng.normal(size=(5, 4)))
        return st, lambda p: tc.add(
            tr.jepa_loss(p["pred"], tgt, keep),
            tr.cluster_kl_loss(q, p["logits"], keep)), None

    return {"snake": snake, "daam": daam, "relpos": relpos,
            "conformer": conformer, "cluster_head": head,
            "predictor": predictor, "encoder": full_encoder, "losses": losses}


def cmd_gradcheck(args):
    suites = _gradcheck_suites()
    if args.module is not None:
        if args.module not in suites:
            _log(f"error: unknown module {args.module!r}; "
                 f"choices: {', '.join(sorted(suites))}")
            return 2
        suites = {args.module: suites[args.module]}
    worst = 0.0
    failed = []
    for name, build in suites.items():
        store, loss_fn, max_elems = build()
        report = grad_check(loss_fn, store, max_elems_per_param=max_elems)
        _log(f"{name}: max rel err {report.max_rel_err:.3e} "
             f"(worst param {report.worst_param or 'n/a'})")
        worst = max(worst, report.max_rel_err)
        if report.max_rel_err >= 1e-4:
            failed.append(name)
    _log(f"overall max rel err {worst:.3e}")
    if failed:
        _log(f"FAILED: {', '.join(failed)}")
        return 1
    return 0


# -- entry point -----------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="melanchor")
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("synth-corpus", help="generate a labeled synthetic corpus")
    sc.add_argument("--config")
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_synth_corpus)

    ft = sub.add_parser("fit-targets", help="fit frozen GMM or k-means targets")
    ft.add_argument("--config")
    ft.add_argument("--corpus", required=True)
    ft.add_argument("--method", choices=("gmm", "kmeans"), default="gmm")
    ft.add_argument("--out", required=True)
    ft.set_defaults(func=cmd_fit_targets)

    pt = sub.add_parser("pretrain", help="run joint pretraining")
    pt.add_argument("--config")
    pt.add_argument("--corpus", required=True)
    pt.add_argument("--targets")
    pt.add_argument("--out", required=True)
    pt.add_argument("--lambda-end", type=float, dest="lambda_end")
    pt.add_argument("--pure-jepa", action="store_true", dest="pure_jepa")
    pt.add_argument("--baseline", action="store_true")
    pt.add_argument("--resume")
    pt.set_defaults(func=cmd_pretrain)

    az = sub.add_parser("analyze", help="metrics report from a checkpoint")
    az.add_argument("--config")
    az.add_argument("--checkpoint")
    az.add_argument("--corpus", required=True)
    az.add_argument("--report", required=True)
    az.add_argument("--compare", nargs="+", metavar="DUMP")
    az.set_defaults(func=cmd_analyze)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--module")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (cf.ConfigError, FileNotFoundError) as e:
        _log(f"error: {e}")
        return 2
    except Exception as e:
        _log(f"runtime failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
