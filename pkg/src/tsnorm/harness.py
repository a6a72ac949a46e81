"""Experiment orchestration: preprocessing method registry, cross-validation
schemes, fold execution, and report assembly.

Reports carry per-fold metric rows plus aggregates of the form
mean +/- 1.96 * std / sqrt(K).  Fold assignment depends only on
(seed, n, k), never on data values or the method under test, so runs that
share a seed are controlled comparisons row for row.  Wall-clock runtime is
kept on the report object and printed in the text table but deliberately
left out of the JSON document, which must be byte-identical across
same-seed runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .adaptive import ALL_SUBLAYERS, DainLayer, EdainLayer, GLOBAL_AWARE, LOCAL_AWARE
from .data import BINARY, LabeledDataset, RngState, TimeSeriesBatch, load_csv
from .flow_kl import KlBijectorParams, fit_kl, normalize_direction
from .metrics import (amex_metric, binary_accuracy, cohen_kappa, macro_f1, ternary_accuracy)
from .neural import GruStack, IdentityPreproc, TrainConfig, bce_loss, cross_entropy_loss, \
    gru_forward, train_loop
from .static_norm import StaticPipeline
from .synthgen import default_config, generate_dataset

METHODS = (
    "none", "zscore", "minmax", "winsorize+zscore", "zscore+yj", "winsorize+zscore+yj",
    "cdf_inversion", "kdit", "dain", "edain_global", "edain_local", "edain_kl",
)

_STATIC_STEPS = {
    "zscore": ["zscore"],
    "minmax": ["minmax"],
    "winsorize+zscore": ["winsorize", "zscore"],
    "zscore+yj": ["zscore", "yeo_johnson"],
    "winsorize+zscore+yj": ["winsorize", "zscore", "yeo_johnson"],
    "cdf_inversion": ["cdf_inversion"],
    "kdit": ["kdit"],
}

# Per-sublayer learning-rate corrections (relative to the base model rate).
# The reference full-scale runs used an order of magnitude more gradient
# steps than the desk-scale defaults, so the desk presets push the
# preprocessing parameters proportionally harder.
PRESETS = {
    "paper-synthetic": {"outlier": 0.1, "shift": 0.1, "scale": 0.1, "power": 0.1},
    "desk-global": {"outlier": 100.0, "shift": 0.01, "scale": 0.01, "power": 10.0},
    "desk-local": {"outlier": 10.0, "shift": 1.0, "scale": 1.0, "power": 10.0},
    "desk-dain": {"outlier": 1.0, "shift": 1.0, "scale": 1.0, "power": 1.0},
    "desk-kl": {"outlier": 100.0, "shift": 10.0, "scale": 10.0, "power": 1.0},
    "amex-global": {"outlier": 100.0, "shift": 0.01, "scale": 0.01, "power": 10.0},
    "amex-local": {"outlier": 10.0, "shift": 1.0, "scale": 1.0, "power": 10.0},
    "amex-kl": {"outlier": 100.0, "shift": 10.0, "scale": 10.0, "power": 1e-7},
    "lob-global": {"outlier": 1e-6, "shift": 10.0, "scale": 10.0, "power": 1e-3},
    "lob-local": {"outlier": 10.0, "shift": 0.01, "scale": 1e-4, "power": 10.0},
}

DEFAULT_PRESET = {
    "dain": "desk-dain",
    "edain_global": "desk-global",
    "edain_local": "desk-local",
    "edain_kl": "desk-kl",
}

ABLATION_ROWS = (
    ("zscore", None),
    ("scale", ("scale",)),
    ("shift", ("shift",)),
    ("shift+scale", ("shift", "scale")),
    ("shift+scale+PT", ("shift", "scale", "power")),
    ("OM+shift+scale", ("om", "shift", "scale")),
    ("OM+shift+scale+PT", ("om", "shift", "scale", "power")),
)


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (32, 32)
    head: tuple[int, ...] = (64, 32)
    dropout: float = 0.2

    def to_json_dict(self):
        return {"hidden": list(self.hidden), "head": list(self.head), "dropout": self.dropout}


@dataclass
class CvConfig:
    kind: str = "holdout"          # holdout | kfold | anchored
    k: int = 5
    valid_fraction: float = 0.2
    boundaries: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in ("holdout", "kfold", "anchored"):
            raise ValueError(f"unknown cv scheme {self.kind!r}")
        if self.kind == "kfold" and self.k < 2:
            raise ValueError("kfold needs k >= 2")
        if self.kind == "anchored" and (self.boundaries is None or len(self.boundaries) < 3):
            raise ValueError("anchored cv needs at least three segment boundaries")

    def to_json_dict(self):
        doc = {"kind": self.kind}
        if self.kind == "kfold":
            doc["k"] = self.k
        elif self.kind == "holdout":
            doc["valid_fraction"] = self.valid_fraction
        else:
            doc["boundaries"] = list(self.boundaries)
        return doc


@dataclass
class SyntheticSource:
    n: int = 5000
    t: int = 10

    def to_json_dict(self):
        return {"n": self.n, "t": self.t}


@dataclass
class ExperimentConfig:
    method: str = "zscore"
    seed: int = 0
    repetitions: int = 1
    synthetic: Optional[SyntheticSource] = field(default_factory=SyntheticSource)
    csv_path: Optional[str] = None
    sublayers: tuple[str, ...] = ALL_SUBLAYERS
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    preset: Optional[str] = None
    kdit_alpha: float = 1.0
    winsorize_quantiles: tuple[float, float] = (0.01, 0.99)
    warm_start: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown preprocessing method {self.method!r}; "
                             f"choose from {', '.join(METHODS)}")
        if (self.synthetic is None) == (self.csv_path is None):
            raise ValueError("exactly one of synthetic/csv_path must be set")
        if tuple(self.sublayers) != ALL_SUBLAYERS and not self.method.startswith("edain"):
            raise ValueError("sublayer flags are only valid with EDAIN methods")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")

    def resolved_corrections(self) -> dict:
        name = self.preset or DEFAULT_PRESET.get(self.method)
        if name is not None:
            return dict(PRESETS[name])
        return dict(self.train.corrections)

    def to_json_dict(self):
        doc = {
            "method": self.method,
            "seed": self.seed,
            "repetitions": self.repetitions,
            "sublayers": list(self.sublayers),
            "model": self.model.to_json_dict(),
            "cv": self.cv.to_json_dict(),
            "preset": self.preset,
            "kdit_alpha": self.kdit_alpha,
            "winsorize_quantiles": list(self.winsorize_quantiles),
            "warm_start": self.warm_start,
            "train": {
                "base_lr": self.train.base_lr,
                "optimizer": self.train.optimizer,
                "batch_size": self.train.batch_size,
                "max_epochs": self.train.max_epochs,
                "milestones": list(self.train.milestones),
                "gamma": self.train.gamma,
                "patience": self.train.patience,
                "corrections": self.resolved_corrections(),
            },
        }
        if self.synthetic is not None:
            doc["dataset"] = {"synthetic": self.synthetic.to_json_dict()}
        else:
            doc["dataset"] = {"csv": self.csv_path}
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentConfig":
        kwargs = {}
        for key in ("method", "seed", "repetitions", "preset", "kdit_alpha", "warm_start"):
            if key in doc:
                kwargs[key] = doc[key]
        if "sublayers" in doc:
            kwargs["sublayers"] = tuple(doc["sublayers"])
        if "winsorize_quantiles" in doc:
            kwargs["winsorize_quantiles"] = tuple(doc["winsorize_quantiles"])
        dataset = doc.get("dataset", {})
        if "csv" in dataset:
            kwargs["csv_path"] = dataset["csv"]
            kwargs["synthetic"] = None
        elif "synthetic" in dataset:
            kwargs["synthetic"] = SyntheticSource(**dataset["synthetic"])
        if "model" in doc:
            m = doc["model"]
            kwargs["model"] = ModelConfig(hidden=tuple(m.get("hidden", (32, 32))),
                                          head=tuple(m.get("head", (64, 32))),
                                          dropout=m.get("dropout", 0.2))
        if "cv" in doc:
            c = dict(doc["cv"])
            if "boundaries" in c:
                c["boundaries"] = tuple(c["boundaries"])
            kwargs["cv"] = CvConfig(**c)
        if "train" in doc:
            t = dict(doc["train"])
            if "milestones" in t:
                t["milestones"] = tuple(t["milestones"])
            kwargs["train"] = TrainConfig(**t)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# fold construction


def kfold_indices(n: int, k: int, rng: RngState) -> list[tuple[np.ndarray, np.ndarray]]:
    """k disjoint validation folds covering 0..n-1 after a seeded shuffle."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    perm = rng.generator().permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        valid = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, valid))
    return out


def holdout_split(n: int, valid_fraction: float, rng: RngState) -> list[tuple[np.ndarray, np.ndarray]]:
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError("valid_fraction must be in (0, 1)")
    perm = rng.generator().permutation(n)
    n_valid = max(1, int(round(n * valid_fraction)))
    return [(np.sort(perm[n_valid:]), np.sort(perm[:n_valid]))]


def anchored_folds(boundaries) -> list[tuple[np.ndarray, np.ndarray]]:
    """Expanding-window folds: fold i trains on segments 1..i and validates
    on segment i+1.  m+1 boundaries give m segments and m-1 folds."""
    bounds = [int(b) for b in boundaries]
    if bounds != sorted(bounds) or len(set(bounds)) != len(bounds):
        raise ValueError("boundaries must be strictly increasing")
    if len(bounds) < 3:
        raise ValueError("need at least three boundaries (two segments)")
    folds = []
    for i in range(1, len(bounds) - 1):
        train = np.arange(bounds[0], bounds[i])
        valid = np.arange(bounds[i], bounds[i + 1])
        folds.append((train, valid))
    return folds


def _make_folds(n: int, cv: CvConfig, rng: RngState):
    if cv.kind == "kfold":
        return kfold_indices(n, cv.k, rng)
    if cv.kind == "holdout":
        return holdout_split(n, cv.valid_fraction, rng)
    return anchored_folds(cv.boundaries)


# ---------------------------------------------------------------------------
# preprocessing wrappers


class StaticPreproc(IdentityPreproc):
    """A fitted static pipeline behind the trainable-layer interface."""

    def __init__(self, pipeline: StaticPipeline):
        self.pipeline = pipeline

    def forward(self, x: TimeSeriesBatch, training: bool):
        return self.pipeline.apply(x), None

    def to_json_dict(self):
        return {"kind": "static", **self.pipeline.to_json_dict()}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "StaticPreproc":
        return cls(StaticPipeline.from_json_dict(doc))


class KlPreproc(IdentityPreproc):
    """A fitted invertible stack applied as a frozen normalizer."""

    def __init__(self, params: KlBijectorParams):
        self.params = params

    def forward(self, x: TimeSeriesBatch, training: bool):
        out, _ = normalize_direction(x, self.params)
        return out, None

    def to_json_dict(self):
        return self.params.to_json_dict()

    @classmethod
    def from_json_dict(cls, doc: dict) -> "KlPreproc":
        return cls(KlBijectorParams.from_json_dict(doc))


def make_preproc(config: ExperimentConfig, train_batch: TimeSeriesBatch):
    """Build (and fit, where applicable) the preprocessing for one fold.

    Static pipelines and the KL layer only ever see the training rows; the
    adaptive layers are returned untrained and learn inside the loop.
    """
    method = config.method
    if method == "none":
        return IdentityPreproc()
    if method in _STATIC_STEPS:
        pipeline = StaticPipeline(list(_STATIC_STEPS[method]),
                                  winsorize_quantiles=config.winsorize_quantiles,
                                  kdit_alpha=config.kdit_alpha)
        pipeline.fit(train_batch)
        return StaticPreproc(pipeline)
    if method == "dain":
        return DainLayer(train_batch.d)
    if method == "edain_global":
        return EdainLayer(train_batch.d, GLOBAL_AWARE, enabled=tuple(config.sublayers),
                          warm_start=train_batch if config.warm_start else None)
    if method == "edain_local":
        return EdainLayer(train_batch.d, LOCAL_AWARE, enabled=tuple(config.sublayers))
    if method == "edain_kl":
        kl_config = TrainConfig(base_lr=1e-2, optimizer="adam", batch_size=256,
                                max_epochs=30, milestones=(), patience=30,
                                corrections=config.resolved_corrections(),
                                seed=config.train.seed)
        params, _ = fit_kl(train_batch, kl_config)
        return KlPreproc(params)
    raise ValueError(f"unknown preprocessing method {method!r}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    method: str
    rows: list
    aggregate: dict
    incomplete: list
    config_echo: dict
    seed: int
    runtime_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        # runtime is intentionally omitted: the JSON document is the
        # determinism surface and must be identical across same-seed runs
        return {
            "method": self.method,
            "seed": self.seed,
            "rows": self.rows,
            "aggregate": self.aggregate,
            "incomplete": self.incomplete,
            "config": self.config_echo,
        }

    def text_table(self) -> str:
        lines = [f"method: {self.method}   seed: {self.seed}   folds: {len(self.rows)}"
                 f"   runtime: {self.runtime_seconds:.1f}s"]
        header = f"{'metric':<14}{'mean':>12}{'+/-':>12}"
        lines.append(header)
        lines.append("-" * len(header))
        for name in sorted(self.aggregate):
            agg = self.aggregate[name]
            lines.append(f"{name:<14}{agg['mean']:>12.4f}{agg['half_width']:>12.4f}")
        if self.incomplete:
            lines.append(f"incomplete folds: {len(self.incomplete)}")
        return "\n".join(lines)


def _aggregate(rows: list) -> dict:
    if not rows:
        return {}
    keys = [k for k, v in rows[0]["metrics"].items() if isinstance(v, float)]
    out = {}
    for key in keys:
        vals = np.array([r["metrics"][key] for r in rows], dtype=np.float64)
        k = len(vals)
        half = 0.0 if k < 2 else float(1.96 * vals.std(ddof=1) / np.sqrt(k))
        out[key] = {"mean": float(vals.mean()), "half_width": half}
    return out


def save_report(doc: dict, path: str | Path) -> None:
    """Canonical JSON emission: sorted keys, two-space indent, newline."""
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# experiment execution


def _load_dataset(config: ExperimentConfig, rep_state: RngState) -> LabeledDataset:
    if config.csv_path is not None:
        return load_csv(config.csv_path)
    synth = default_config(n=config.synthetic.n, t=config.synthetic.t,
                           seed=rep_state.child(1).seed)
    return generate_dataset(synth)


def _fold_metrics(dataset: LabeledDataset, probs: np.ndarray) -> dict:
    y = dataset.labels
    if dataset.label_kind == BINARY:
        loss, _ = bce_loss(probs, y)
        hard = (probs >= 0.5).astype(np.int64)
        m, d_rate, g = amex_metric(probs, y, dataset.weights)
        return {
            "bce": loss,
            "accuracy": binary_accuracy(probs, y),
            "amex_m": m, "amex_d": d_rate, "amex_g": g,
            "kappa": cohen_kappa(hard, y, num_classes=2),
            "macro_f1": macro_f1(hard, y, num_classes=2),
        }
    loss, _ = cross_entropy_loss(probs, y)
    hard = probs.argmax(axis=1)
    return {
        "ce": loss,
        "accuracy": ternary_accuracy(probs, y),
        "kappa": cohen_kappa(hard, y, num_classes=3),
        "macro_f1": macro_f1(hard, y, num_classes=3),
    }


def _run_fold(config: ExperimentConfig, dataset: LabeledDataset,
              train_idx: np.ndarray, valid_idx: np.ndarray,
              rep: int, fold: int, fold_state: RngState) -> dict:
    train_ds = dataset.subset(train_idx)
    valid_ds = dataset.subset(valid_idx)
    preproc = make_preproc(config, train_ds.batch)
    n_classes = 1 if dataset.label_kind == BINARY else 3
    model = GruStack(d_in=dataset.batch.d, hidden=config.model.hidden,
                     head=config.model.head, n_classes=n_classes,
                     dropout=config.model.dropout,
                     rng=fold_state.child(1).generator())
    train_cfg = replace(config.train, seed=fold_state.child(2).seed,
                        corrections=config.resolved_corrections())
    result = train_loop(train_ds, valid_ds, preproc, model, train_cfg)

    xn, _ = result.preproc.forward(valid_ds.batch, training=False)
    probs, _ = gru_forward(xn, result.model, training=False)
    metrics = _fold_metrics(valid_ds, probs)
    return {
        "rep": rep,
        "fold": fold,
        "n_train": int(len(train_idx)),
        "n_valid": int(len(valid_idx)),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "metrics": metrics,
    }


def run_experiment(config: ExperimentConfig) -> MetricsReport:
    """Train and evaluate one preprocessing method under the configured CV."""
    start = time.perf_counter()
    root = RngState(config.seed)
    rows, incomplete = [], []
    for rep in range(config.repetitions):
        rep_state = root.child(rep)
        dataset = _load_dataset(config, rep_state)
        folds = _make_folds(dataset.n, config.cv, rep_state.child(9999))
        for f, (tr_idx, va_idx) in enumerate(folds):
            try:
                rows.append(_run_fold(config, dataset, tr_idx, va_idx, rep, f,
                                      rep_state.child(100 + f)))
            except Exception as exc:  # noqa: BLE001 - a fold failure is recorded, not fatal
                incomplete.append({"rep": rep, "fold": f,
                                   "error": f"{type(exc).__name__}: {exc}"})
    report = MetricsReport(
        method=config.method,
        rows=rows,
        aggregate=_aggregate(rows),
        incomplete=incomplete,
        config_echo=config.to_json_dict(),
        seed=config.seed,
        runtime_seconds=time.perf_counter() - start,
    )
    return report


def run_ablation(config: ExperimentConfig) -> list[tuple[str, MetricsReport]]:
    """The seven-row sublayer ablation under one seed and shared folds."""
    out = []
    for label, sublayers in ABLATION_ROWS:
        if sublayers is None:
            row_cfg = replace(config, method="zscore", sublayers=ALL_SUBLAYERS)
        else:
            row_cfg = replace(config, method="edain_global", sublayers=sublayers)
        out.append((label, run_experiment(row_cfg)))
    return out


def ablation_json(rows: list[tuple[str, MetricsReport]]) -> dict:
    return {"rows": [{"label": label, "report": rep.to_json_dict()} for label, rep in rows]}
