"""Training loop, leave-one-group-out evaluation, grid search and ablations."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .data import LABELS, Window, attach_context, groups_of, split_by_group
from .errors import ConfigurationError, DataError
from .metrics import class_scores, confusion_counts, macro_f1, normalize_rows, per_class_accuracy
from .model import Batch, FusionModel, ModelConfig
from .nn.optim import RMSprop

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 1e-4
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0
    decay: float = 0.99
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 0.5:
            raise ConfigurationError(f"val_fraction must lie in (0, 0.5), got {self.val_fraction}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigurationError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's loss; True when it is a new best."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainTrace:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    effective_batch: int = 0
    n_train: int = 0
    n_val: int = 0
    best_parameter_hash: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else float("nan")


def validation_split(groups: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``round(fraction * n_g)`` windows from every group g."""
    train_idx, val_idx = [], []
    for g in sorted(set(groups.tolist())):
        idx = np.flatnonzero(groups == g)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(fraction * len(idx)))
        n_val = min(n_val, len(idx) - 1)
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def _param_hash(state: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name]).tobytes())
    return h.hexdigest()


def fit(model, windows: Sequence[Window] | Batch, config: TrainConfig) -> tuple[Any, TrainTrace]:
    """Train with RMSprop and early stopping; returns the best-validation model.

    ``model`` needs ``prepare``, ``parameters``, ``loss``, ``validation_loss``,
    ``state_dict``/``load_state_dict``, ``train`` and optionally
    ``fit_normalization``.
    """
    data = windows if isinstance(windows, Batch) else model.prepare(windows)
    if len(data) == 0:
        raise DataError("training set is empty")
    absent = sorted(set(range(len(LABELS))) - set(np.unique(data.labels).tolist()))
    if absent:
        log.warning("training set has no windows for %s", ", ".join(LABELS[i] for i in absent))

    rng = np.random.default_rng(config.seed)
    groups = data.groups if len(data.groups) else np.zeros(len(data), dtype=np.int64)
    tr_idx, va_idx = validation_split(groups, config.val_fraction, rng)
    train_set = data.subset(tr_idx)
    val_set = data.subset(va_idx) if len(va_idx) else None
    if val_set is None:
        log.warning("validation split is empty; monitoring training loss instead")

    if hasattr(model, "fit_normalization"):
        model.fit_normalization(train_set)
    opt = RMSprop(model.parameters(), learning_rate=config.learning_rate,
                  decay=config.decay, epsilon=config.epsilon)
    batch = min(config.batch_size, len(train_set))
    if batch < config.batch_size:
        log.info("effective batch size %d (configured %d)", batch, config.batch_size)

    trace = TrainTrace(effective_batch=batch, n_train=len(train_set), n_val=len(va_idx))
    stopper = EarlyStopping(config.patience)
    best_state = model.state_dict()
    for epoch in range(1, config.max_epochs + 1):
        model.train(True)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), batch):
            sub = train_set.subset(order[start:start + batch])
            loss = model.loss(sub)
            loss.backward()
            opt.step()
            losses.append(float(loss.item()) * len(sub))
        trace.train_loss.append(sum(losses) / len(train_set))
        monitored = model.validation_loss(val_set if val_set is not None else train_set)
        trace.val_loss.append(float(monitored))
        trace.epochs_run = epoch
        if stopper.update(monitored):
            best_state = model.state_dict()
        if stopper.should_stop:
            log.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    model.load_state_dict(best_state)
    model.train(False)
    trace.best_epoch = stopper.best_epoch
    trace.best_parameter_hash = _param_hash(best_state)
    return model, trace


@dataclass
class EvalResult:
    counts: np.ndarray
    macro_f1: float
    per_class_accuracy: list[float | None]
    confusion: list[list[float] | None]
    degenerate_classes: list[str]

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "per_class_accuracy": dict(zip(LABELS, self.per_class_accuracy)),
            "confusion_counts": self.counts.tolist(),
            "confusion_normalized": self.confusion,
            "degenerate_classes": self.degenerate_classes,
        }


def score(y_true, y_pred) -> EvalResult:
    counts = confusion_counts(y_true, y_pred)
    return result_from_counts(counts)


def result_from_counts(counts: np.ndarray) -> EvalResult:
    sc = class_scores(counts)
    return EvalResult(
        counts=np.asarray(counts),
        macro_f1=macro_f1(counts),
        per_class_accuracy=per_class_accuracy(counts),
        confusion=normalize_rows(counts),
        degenerate_classes=[LABELS[i] for i in sc.degenerate],
    )


def evaluate(model, windows: Sequence[Window] | Batch) -> EvalResult:
    data = windows if isinstance(windows, Batch) else model.prepare(windows)
    if len(data) == 0:
        raise DataError("test set is empty")
    return score(data.labels, model.predict(data))


# ---------------------------------------------------------------------------
# k-fold


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(args):
    fold, windows, model_config, train_config, seed = args
    s = fold_seed(seed, fold.index)
    model = FusionModel(replace(model_config, seed=s))
    train_windows = [windows[i] for i in fold.train_idx]
    test_windows = [windows[i] for i in fold.test_idx]
    model, trace = fit(model, train_windows, replace(train_config, seed=s))
    result = evaluate(model, test_windows)
    entry = {
        "fold": fold.index,
        "test_group": fold.test_groups[0] if len(fold.test_groups) == 1 else list(fold.test_groups),
        "n_train": len(train_windows),
        "n_test": len(test_windows),
        "seed": s,
        "epochs_run": trace.epochs_run,
        "best_epoch": trace.best_epoch,
        "best_val_loss": trace.best_val_loss,
        **result.to_dict(),
    }
    return entry


@dataclass
class EvalReport:
    folds: list[dict]
    pooled: dict
    metadata: dict
    timestamp: str = ""

    @property
    def macro_f1(self) -> float:
        return self.pooled["macro_f1"]

    @property
    def pooled_counts(self) -> np.ndarray:
        return np.asarray(self.pooled["confusion_counts"])

    @property
    def mean_val_loss(self) -> float:
        vals = [f["best_val_loss"] for f in self.folds]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA, "timestamp": self.timestamp, "metadata": self.metadata,
                "pooled": self.pooled, "folds": self.folds}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(folds=list(d["folds"]), pooled=dict(d["pooled"]), metadata=dict(d["metadata"]),
                   timestamp=d.get("timestamp", ""))


def run_kfold(
    windows: Sequence[Window],
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int | None = None,
    workers: int = 1,
) -> EvalReport:
    """Leave-one-group-out: a fresh seeded model per fold, pooled counts at the end."""
    folds = split_by_group(windows, k)
    jobs = [(f, windows, model_config, train_config, train_config.seed) for f in folds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_run_fold, jobs))
    else:
        entries = [_run_fold(j) for j in jobs]
    entries.sort(key=lambda e: e["fold"])

    pooled_counts = np.sum([np.asarray(e["confusion_counts"]) for e in entries], axis=0)
    pooled = result_from_counts(pooled_counts).to_dict()
    metadata = {
        "model_config": model_config.to_dict(),
        "model_config_hash": model_config.config_hash(),
        "train_config": train_config.to_dict(),
        "train_config_hash": train_config.config_hash(),
        "seed": train_config.seed,
        "mode": model_config.mode,
        "k": len(folds),
        "groups": groups_of(windows),
        "n_windows": len(windows),
        "parameter_count": FusionModel(model_config).parameter_count(),
    }
    return EvalReport(folds=entries, pooled=pooled, metadata=metadata,
                      timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"))


def run_seeds(windows, model_config: ModelConfig, train_config: TrainConfig, seeds: Sequence[int],
              k: int | None = None, workers: int = 1) -> dict:
    """Repeat ``run_kfold`` per seed; summarize pooled macro-F1 as mean and population std."""
    reports = [run_kfold(windows, replace(model_config, seed=s), replace(train_config, seed=s), k, workers)
               for s in seeds]
    f1 = np.array([r.macro_f1 for r in reports])
    return {"seeds": list(seeds), "macro_f1": f1.tolist(), "macro_f1_mean": float(f1.mean()),
            "macro_f1_std": float(f1.std()), "reports": reports}


# ---------------------------------------------------------------------------
# grid search


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict]:
    if not grid:
        raise ConfigurationError("grid is empty")
    for key, values in grid.items():
        if not values:
            raise ConfigurationError(f"grid entry {key!r} has no candidate values")
        if len(values) > 4:
            raise ConfigurationError(f"grid entry {key!r} has {len(values)} candidates; at most 4 allowed")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def apply_overrides(model_config: ModelConfig, train_config: TrainConfig, params: Mapping) -> tuple[ModelConfig, TrainConfig]:
    m_over, t_over = {}, {}
    for key, value in params.items():
        if key in TrainConfig.__dataclass_fields__:
            t_over[key] = value
        elif key in ModelConfig.__dataclass_fields__:
            m_over[key] = tuple(value) if key == "modalities" else value
        else:
            raise ConfigurationError(f"unknown hyperparameter {key!r}")
    if "d_model" in m_over and "d_ff" not in m_over:
        m_over["d_ff"] = None
    return replace(model_config, **m_over), replace(train_config, **t_over)


def grid_search(
    windows: Sequence[Window],
    grid: Mapping[str, Sequence],
    model_config: ModelConfig,
    train_config: TrainConfig,
    epochs: int | None = 15,
    k: int | None = None,
    workers: int = 1,
) -> list[dict]:
    """Evaluate the Cartesian product of ``grid`` by k-fold and rank it.

    ``epochs`` caps max_epochs per cell; None keeps the full budget.
    Ranking: pooled macro-F1 descending, then mean best validation loss
    ascending, then the parameters' JSON text.
    """
    cells = expand_grid(grid)
    results = []
    for params in cells:
        mcfg, tcfg = apply_overrides(model_config, train_config, params)
        if epochs is not None and "max_epochs" not in params:
            tcfg = replace(tcfg, max_epochs=epochs)
        report = run_kfold(windows, mcfg, tcfg, k, workers)
        results.append({"params": params, "macro_f1": report.macro_f1, "val_loss": report.mean_val_loss,
                        "report": report})
    results.sort(key=lambda r: (-r["macro_f1"], r["val_loss"], json.dumps(r["params"], sort_keys=True)))
    for rank, r in enumerate(results, start=1):
        r["rank"] = rank
    return results


# ---------------------------------------------------------------------------
# ablation

# F1 (%) per configuration as reported for the private Pacman dataset.
# Reference only; the synthetic harness cannot reproduce these.
REFERENCE_F1 = {
    "GPT-4(V) Only": 23,
    "Full Context (FC)": 25,
    "Thermal Data": 30,
    "Thermal + FC": 58,
    "Action Units (AU)": 65,
    "AU + FC": 75,
    "Thermal + AU + GOC": 76,
    "Thermal + AU": 84,
    "Thermal + AU + FC": 89,
}

DEFAULT_SUBSETS: tuple[tuple[str, ...], ...] = (
    ("context:fc",),
    ("thermal",),
    ("thermal", "context:fc"),
    ("au",),
    ("au", "context:fc"),
    ("thermal", "au", "context:goc"),
    ("thermal", "au"),
    ("thermal", "au", "context:fc"),
)

_SHORT = {"thermal": "Thermal", "au": "AU", "context:fc": "FC", "context:goc": "GOC"}
_SOLO = {"thermal": "Thermal Data", "au": "Action Units (AU)", "context:fc": "Full Context (FC)",
         "context:goc": "Game-Only Context (GOC)"}
_ORDER = ("thermal", "au", "context:goc", "context:fc")


def parse_subset(subset: Sequence[str]) -> tuple[tuple[str, ...], str | None]:
    """Return (model modalities, context kind or None) for an ablation row."""
    items = [s.lower() for s in subset]
    if not items:
        raise ConfigurationError("ablation subset is empty")
    bad = [s for s in items if s not in _ORDER]
    if bad:
        raise ConfigurationError(f"unknown ablation modality {bad}; expected members of {_ORDER}")
    ctx = [s for s in items if s.startswith("context:")]
    if len(ctx) > 1:
        raise ConfigurationError(f"subset {subset} mixes context kinds")
    mods = tuple(m for m in ("thermal", "au") if m in items) + (("context",) if ctx else ())
    return mods, (ctx[0].split(":")[1] if ctx else None)


def subset_name(subset: Sequence[str]) -> str:
    items = sorted({s.lower() for s in subset}, key=_ORDER.index)
    if len(items) == 1:
        return _SOLO[items[0]]
    return " + ".join(_SHORT[s] for s in items)


@dataclass
class AblationTable:
    rows: list[dict]
    metadata: dict

    timestamp: str = ""

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            inner = r["report"].to_dict()
            inner.pop("timestamp", None)
            rows.append({k: v for k, v in r.items() if k != "report"} | {"report": inner})
        return {"schema_version": REPORT_SCHEMA, "timestamp": self.timestamp,
                "metadata": self.metadata, "rows": rows}

    def f1(self, name: str) -> float:
        for r in self.rows:
            if r["configuration"] == name:
                return r["macro_f1"]
        raise KeyError(name)


def run_ablation(
    windows: Sequence[Window],
    contexts: Mapping[str, Sequence] | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    subsets: Sequence[Sequence[str]] = DEFAULT_SUBSETS,
    k: int | None = None,
    workers: int = 1,
) -> AblationTable:
    """One k-fold run per modality subset.

    ``contexts`` maps a context kind ("goc"/"fc") to records accepted by
    ``attach_context``.
    """
    rows = []
    for subset in subsets:
        mods, kind = parse_subset(subset)
        if kind is not None:
            if not contexts or kind not in contexts:
                raise ConfigurationError(f"subset {list(subset)} needs {kind.upper()} context embeddings")
            ws = attach_context(windows, contexts[kind])
        else:
            ws = attach_context(windows, None)
        mcfg = replace(model_config, modalities=mods, input_dims=None)
        report = run_kfold(ws, mcfg, train_config, k, workers)
        name = subset_name(subset)
        rows.append({"configuration": name, "subset": list(subset), "macro_f1": report.macro_f1,
                     "reference_f1_percent": REFERENCE_F1.get(name), "report": report})
    return AblationTable(rows, {"mode": model_config.mode, "seed": train_config.seed,
                                "train_config_hash": train_config.config_hash()},
                         timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
