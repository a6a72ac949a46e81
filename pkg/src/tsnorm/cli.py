"""Command-line interface.

Subcommands: generate | train | evaluate | ablate | kl-fit | preprocess.
Exit codes: 0 success, 1 usage error, 2 runtime failure.  Reports are
written as canonical JSON (byte-identical for identical seeds) and a plain
text table goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .adaptive import DainLayer, EdainLayer
from .flow_kl import fit_kl
from .data import LabeledDataset, RngState, load_csv, save_csv
from .harness import (CvConfig, ExperimentConfig, KlPreproc, PRESETS, StaticPreproc,
                      SyntheticSource, _fold_metrics, _load_dataset, _make_folds,
                      ablation_json, make_preproc, run_ablation, run_experiment,
                      save_report)
from .neural import (GruStack, IdentityPreproc, TrainConfig, gru_forward, history_to_csv,
                     train_loop)
from .synthgen import SynthConfig, default_config, generate_dataset


def _load_preproc(doc: dict):
    kind = doc.get("kind")
    if kind == "static":
        return StaticPreproc.from_json_dict(doc)
    if kind == "edain":
        return EdainLayer.from_json_dict(doc)
    if kind == "edain_kl":
        return KlPreproc.from_json_dict(doc)
    if kind == "dain":
        return DainLayer.from_json_dict(doc)
    if kind == "identity":
        return IdentityPreproc()
    raise ValueError(f"checkpoint has unknown preprocessing kind {kind!r}")


def _preproc_doc(preproc) -> dict:
    if type(preproc) is IdentityPreproc:
        return {"kind": "identity"}
    return preproc.to_json_dict()


def _pdf_from_expression(expr: str):
    env = {
        "np": np,
        "pi": math.pi,
        "e": math.e,
        "Phi": ndtr,
        "phi": lambda v: np.exp(-0.5 * np.asarray(v) ** 2) / math.sqrt(2 * math.pi),
        "ind": lambda lo, hi, v: ((np.asarray(v) > lo) & (np.asarray(v) < hi)).astype(float),
    }

    def pdf(x):
        return np.asarray(eval(expr, {"__builtins__": {}}, {**env, "x": x}), dtype=np.float64)

    return pdf


def _synth_from_pdf_config(doc: dict, n: int, t: int, seed: int) -> SynthConfig:
    feats = doc["features"]
    pdfs = [_pdf_from_expression(f["pdf"]) for f in feats]
    bounds = [tuple(f["bounds"]) for f in feats]
    q_max = max(len(f.get("theta", [-1.0])) for f in feats)
    theta = np.zeros((len(feats), q_max))
    for j, f in enumerate(feats):
        row = f.get("theta", [-1.0])
        theta[j, :len(row)] = row
    sigma_eps = np.array([f.get("sigma_eps", 1.0) for f in feats])
    delta = [f.get("delta", 1e-3 * (b - a)) for f, (a, b) in zip(feats, bounds)]
    return SynthConfig(
        pdfs=pdfs, bounds=bounds, theta=theta, n=n, t=t, sigma_eps=sigma_eps,
        sigma_cor=doc.get("sigma_cor", 1.4), sigma_zeta=doc.get("sigma_zeta", 0.5),
        sigma_beta=doc.get("sigma_beta", 2.0), delta=delta, seed=seed,
        response_threshold=doc.get("response_threshold", "adaptive"),
    )


def _experiment_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        cfg = ExperimentConfig.from_json_dict(doc)
    else:
        cfg = ExperimentConfig()
    if getattr(args, "data", None):
        cfg.csv_path = str(args.data)
        cfg.synthetic = None
    elif getattr(args, "synth_n", None):
        cfg.synthetic = SyntheticSource(n=args.synth_n, t=args.synth_t)
        cfg.csv_path = None
    if getattr(args, "method", None):
        cfg.method = args.method
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None):
        cfg.preset = args.preset
    if getattr(args, "repetitions", None):
        cfg.repetitions = args.repetitions
    if getattr(args, "cv", None):
        if args.cv == "holdout":
            cfg.cv = CvConfig(kind="holdout", valid_fraction=args.valid_fraction)
        else:
            cfg.cv = CvConfig(kind="kfold", k=args.k)
    if getattr(args, "epochs", None):
        cfg.train.max_epochs = args.epochs
    if getattr(args, "batch_size", None):
        cfg.train.batch_size = args.batch_size
    # re-validate after the overrides
    cfg.__post_init__()
    return cfg


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV dataset path (mutually exclusive with --synth-n)")
    p.add_argument("--synth-n", type=int, dest="synth_n",
                   help="generate a built-in synthetic dataset with this many series")
    p.add_argument("--synth-t", type=int, dest="synth_t", default=10,
                   help="timesteps for --synth-n (default 10)")
    p.add_argument("--config", help="JSON experiment config (flags override it)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="named per-sublayer learning-rate preset")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--cv", choices=["holdout", "kfold"])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--valid-fraction", type=float, default=0.2, dest="valid_fraction")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out", help="report JSON output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsnorm",
                                     description="adaptive time series normalization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset CSV")
    g.add_argument("--builtin", default="synth3", choices=["synth3"],
                   help="built-in marginal set (three irregular densities)")
    g.add_argument("--pdf-config", dest="pdf_config",
                   help="JSON file with per-feature pdf expressions (overrides --builtin)")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--t", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model with one preprocessing method")
    t.add_argument("--method", help="preprocessing method tag")
    t.add_argument("--checkpoint-out", dest="checkpoint_out",
                   help="save trained preprocessing+model JSON here")
    t.add_argument("--history-out", dest="history_out",
                   help="save the training curve (epoch, losses, lr) as CSV")
    _add_experiment_flags(t)

    e = sub.add_parser("evaluate", help="evaluate a saved checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out")

    a = sub.add_parser("ablate", help="run the seven-row sublayer ablation")
    _add_experiment_flags(a)

    k = sub.add_parser("kl-fit", help="fit the invertible normalizer unsupervised")
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--epochs", type=int, default=30)
    k.add_argument("--batch-size", type=int, default=256, dest="batch_size")
    k.add_argument("--lr", type=float, default=1e-2)

    p = sub.add_parser("preprocess", help="apply a saved preprocessing checkpoint to a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    return parser


def _cmd_generate(args) -> int:
    if args.pdf_config:
        doc = json.loads(Path(args.pdf_config).read_text())
        config = _synth_from_pdf_config(doc, n=args.n, t=args.t, seed=args.seed)
    else:
        config = default_config(n=args.n, t=args.t, seed=args.seed)
    dataset = generate_dataset(config)
    save_csv(dataset, args.out)
    balance = float(dataset.labels.mean())
    print(f"wrote {dataset.n} series x {dataset.batch.d} features x {dataset.batch.t} steps "
          f"to {args.out} (label balance {balance:.3f})")
    return 0


def _fit_full_checkpoint(cfg: ExperimentConfig):
    """Train once on the first fold's split and keep the fitted objects.

    Replays the same seed derivation as run_experiment's repetition 0, so the
    checkpoint corresponds to the report's first row.
    """
    root = RngState(cfg.seed)
    rep_state = root.child(0)
    dataset = _load_dataset(cfg, rep_state)
    folds = _make_folds(dataset.n, cfg.cv, rep_state.child(9999))
    tr_idx, va_idx = folds[0]
    train_ds = dataset.subset(tr_idx)
    valid_ds = dataset.subset(va_idx)
    preproc = make_preproc(cfg, train_ds.batch)
    n_classes = 1 if dataset.label_kind == "binary" else 3
    model = GruStack(d_in=dataset.batch.d, hidden=cfg.model.hidden, head=cfg.model.head,
                     n_classes=n_classes, dropout=cfg.model.dropout,
                     rng=rep_state.child(100).child(1).generator())
    train_cfg = replace(cfg.train, seed=rep_state.child(100).child(2).seed,
                        corrections=cfg.resolved_corrections())
    result = train_loop(train_ds, valid_ds, preproc, model, train_cfg)
    return result


def _cmd_train(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg)
    print(report.text_table())
    if args.out:
        save_report(report.to_json_dict(), args.out)
        print(f"report written to {args.out}")
    if args.checkpoint_out or args.history_out:
        result = _fit_full_checkpoint(cfg)
        if args.checkpoint_out:
            doc = {"preproc": _preproc_doc(result.preproc), "model": result.model.to_json_dict()}
            save_report(doc, args.checkpoint_out)
            print(f"checkpoint written to {args.checkpoint_out}")
        if args.history_out:
            Path(args.history_out).write_text(history_to_csv(result.history))
            print(f"training history written to {args.history_out}")
    if report.incomplete and not report.rows:
        raise RuntimeError(f"all folds failed: {report.incomplete[0]['error']}")
    return 0


def _cmd_evaluate(args) -> int:
    doc = json.loads(Path(args.checkpoint).read_text())
    preproc = _load_preproc(doc["preproc"])
    model = GruStack.from_json_dict(doc["model"])
    dataset = load_csv(args.data)
    xn, _ = preproc.forward(dataset.batch, training=False)
    probs, _ = gru_forward(xn, model, training=False)
    metrics = _fold_metrics(dataset, probs)
    for name in sorted(metrics):
        print(f"{name:<14}{metrics[name]:>12.4f}")
    if args.out:
        save_report({"metrics": metrics, "data": str(args.data)}, args.out)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    rows = run_ablation(cfg)
    width = max(len(label) for label, _ in rows)
    key = "bce" if "bce" in rows[0][1].aggregate else "ce"
    print(f"{'configuration':<{width + 2}}{key:>10}{'+/-':>10}")
    for label, report in rows:
        agg = report.aggregate.get(key, {"mean": float("nan"), "half_width": float("nan")})
        print(f"{label:<{width + 2}}{agg['mean']:>10.4f}{agg['half_width']:>10.4f}")
    if args.out:
        save_report(ablation_json(rows), args.out)
        print(f"ablation report written to {args.out}")
    return 0


def _cmd_kl_fit(args) -> int:
    dataset = load_csv(args.data)
    cfg = TrainConfig(base_lr=args.lr, optimizer="adam", batch_size=args.batch_size,
                      max_epochs=args.epochs, milestones=(), patience=args.epochs,
                      seed=args.seed,
                      corrections=dict(PRESETS["desk-kl"]))
    params, history = fit_kl(dataset.batch, cfg)
    save_report({"preproc": params.to_json_dict(), "history": history}, args.out)
    print(f"fitted invertible normalizer on {dataset.n} series; "
          f"per-value NLL {history[0]['nll']:.4f} -> {min(h['nll'] for h in history):.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    doc = json.loads(Path(args.checkpoint).read_text())
    preproc = _load_preproc(doc["preproc"] if "preproc" in doc else doc)
    dataset = load_csv(args.data)
    out_batch, _ = preproc.forward(dataset.batch, training=False)
    save_csv(LabeledDataset(out_batch, dataset.labels, dataset.label_kind), args.out)
    print(f"normalized dataset written to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "kl-fit": _cmd_kl_fit,
    "preprocess": _cmd_preprocess,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses status 2 for usage errors; this tool reserves 2 for
        # runtime failures and reports usage problems as 1
        return 1 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
