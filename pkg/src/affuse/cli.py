"""``affuse`` command line.

Exit codes: 0 success, 1 validation/data/usage error, 2 internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .context import CONTEXT_KINDS, EmbeddingCache, RemoteProvider, StubProvider
from .data import MODES, attach_context, groups_of
from .errors import ConfigurationError, DataError, UserError
from .model import ModelConfig, FusionModel, save_checkpoint
from .pipeline import Corpus, build_contexts, load_corpus
from .report import render_ablation, render_any, render_eval, render_grid
from .synth import FILES as SYNTH_FILES
from .synth import SynthSpec, generate, write
from .train import (
    DEFAULT_SUBSETS,
    EvalReport,
    TrainConfig,
    evaluate,
    fit,
    grid_search,
    run_ablation,
    run_kfold,
    run_seeds,
)

log = logging.getLogger("affuse")

CONFIG_SCHEMA = 1
CONFIG_KEYS = {"schema_version", "data_dir", "cache", "provider", "embed_model", "context", "model", "train",
               "k", "seeds", "test_group", "ablation", "grid", "grid_epochs", "synth"}


class UsageError(UserError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--mode", choices=MODES, help="window representation")
    p.add_argument("--json", action="store_true", help="print machine-readable output on stdout")
    p.add_argument("--workers", type=int, default=1, help="parallel folds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="affuse", description="Context-aware multimodal affect recognition.")
    parser.add_argument("--version", action="version", version=f"affuse {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("embed", parents=[common], help="build or refresh context embeddings")
    p.add_argument("--provider", choices=("stub", "remote"))
    p.add_argument("--data", type=Path, help="data directory (overrides config data_dir)")
    for name, help_ in (("train", "train on all but one group, save a checkpoint"),
                        ("kfold", "leave-one-group-out evaluation"),
                        ("ablate", "modality ablation table"),
                        ("gridsearch", "hyperparameter grid search")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data", type=Path, help="data directory (overrides config data_dir)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p = sub.add_parser("report", parents=[common], help="render a JSON report as text")
    p.add_argument("input", type=Path)
    return parser


# ---------------------------------------------------------------------------
# config


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config {path}: top level must be an object")
    version = cfg.get("schema_version", CONFIG_SCHEMA)
    if version != CONFIG_SCHEMA:
        raise ConfigurationError(f"config schema_version {version} is not supported (expected {CONFIG_SCHEMA})")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def resolve(args, cfg: dict) -> dict:
    """Merge CLI flags over the config file into a fully explicit config."""
    model = dict(cfg.get("model", {}))
    train = dict(cfg.get("train", {}))
    synth = dict(cfg.get("synth", {}))
    if args.mode:
        model["mode"] = args.mode
    if args.seed is not None:
        model["seed"] = train["seed"] = synth["seed"] = args.seed
    mcfg = ModelConfig.from_dict(model)
    tcfg = TrainConfig.from_dict(train)
    data_dir = getattr(args, "data", None) or cfg.get("data_dir")
    resolved = {
        "schema_version": CONFIG_SCHEMA,
        "data_dir": str(data_dir) if data_dir else None,
        "cache": cfg.get("cache"),
        "provider": getattr(args, "provider", None) or cfg.get("provider", "stub"),
        "embed_model": cfg.get("embed_model", "text-embedding-3-large"),
        "context": cfg.get("context", "fc"),
        "model": mcfg.to_dict(),
        "train": tcfg.to_dict(),
        "k": cfg.get("k"),
        "seeds": cfg.get("seeds"),
        "test_group": cfg.get("test_group"),
        "ablation": cfg.get("ablation", {}),
        "grid": cfg.get("grid"),
        "grid_epochs": cfg.get("grid_epochs", 15),
        "synth": synth,
    }
    if resolved["context"] not in CONTEXT_KINDS:
        raise ConfigurationError(f"context must be one of {CONTEXT_KINDS}, got {resolved['context']!r}")
    if resolved["provider"] not in ("stub", "remote"):
        raise ConfigurationError(f"provider must be 'stub' or 'remote', got {resolved['provider']!r}")
    return resolved


def _cache_path(rcfg: dict) -> Path:
    if rcfg["cache"]:
        return Path(rcfg["cache"])
    return _data_dir(rcfg) / "embeddings.jsonl"


def _data_dir(rcfg: dict) -> Path:
    if not rcfg["data_dir"]:
        raise ConfigurationError("no data directory; pass --data or set data_dir in the config")
    return Path(rcfg["data_dir"])


class _CachedOnly:
    """Provider stand-in that only names the cache namespace."""

    max_batch = 128

    def __init__(self, provider_id: str):
        self.provider_id = provider_id

    def embed_batch(self, sentences):
        raise DataError("embeddings missing from cache; run `affuse embed` first")


def _provider_id(rcfg: dict) -> str:
    return StubProvider.provider_id if rcfg["provider"] == "stub" else f"remote:{rcfg['embed_model']}"


def _load_windows(rcfg: dict, kinds) -> tuple[Corpus, dict]:
    corpus = load_corpus(_data_dir(rcfg), rcfg["model"]["mode"])
    if not corpus.windows:
        raise DataError(f"no admissible windows in {rcfg['data_dir']}")
    contexts = {}
    if kinds:
        cache_path = _cache_path(rcfg)
        if not cache_path.exists():
            raise DataError(f"embedding cache {cache_path} not found; run `affuse embed` first")
        contexts = build_contexts(corpus, kinds, _CachedOnly(_provider_id(rcfg)), EmbeddingCache(cache_path),
                                  require_cached=True)
    return corpus, contexts


def _with_context(corpus: Corpus, contexts: dict, rcfg: dict):
    if "context" in rcfg["model"]["modalities"]:
        return attach_context(corpus.windows, contexts[rcfg["context"]])
    return attach_context(corpus.windows, None)


# ---------------------------------------------------------------------------
# subcommands


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


def cmd_synth(args, rcfg, out: Path) -> dict:
    spec = SynthSpec(**rcfg["synth"])
    paths = write(generate(spec), out)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return {"files": {k: str(v) for k, v in paths.items()}}


def cmd_embed(args, rcfg, out: Path) -> dict:
    corpus = load_corpus(_data_dir(rcfg), rcfg["model"]["mode"])
    if rcfg["provider"] == "remote":
        provider = RemoteProvider(model=rcfg["embed_model"])
    else:
        provider = StubProvider()
    cache = EmbeddingCache(_cache_path(rcfg))
    before = len(cache)
    build_contexts(corpus, CONTEXT_KINDS, provider, cache)
    summary = {"cache": str(_cache_path(rcfg)), "provider_id": provider.provider_id,
               "new_embeddings": len(cache) - before, "cached_total": len(cache),
               "provider_calls": getattr(provider, "calls", None)}
    log.info("embeddings: %d new, %d cached", summary["new_embeddings"], summary["cached_total"])
    return summary


def _needed_kinds(rcfg) -> list[str]:
    return [rcfg["context"]] if "context" in rcfg["model"]["modalities"] else []


def cmd_train(args, rcfg, out: Path) -> dict:
    corpus, contexts = _load_windows(rcfg, _needed_kinds(rcfg))
    windows = _with_context(corpus, contexts, rcfg)
    groups = groups_of(windows)
    test_group = rcfg["test_group"] or groups[-1]
    if test_group not in groups:
        raise ConfigurationError(f"test_group {test_group!r} not among {groups}")
    train_w = [w for w in windows if w.group != test_group]
    test_w = [w for w in windows if w.group == test_group]
    if not train_w:
        raise DataError("no training windows outside the test group")
    mcfg = ModelConfig.from_dict(rcfg["model"])
    model, trace = fit(FusionModel(mcfg), train_w, TrainConfig.from_dict(rcfg["train"]))
    result = evaluate(model, test_w)
    save_checkpoint(model, out / "model.ckpt")
    report = {"test_group": test_group, "n_train": len(train_w), "n_test": len(test_w),
              "epochs_run": trace.epochs_run, "best_epoch": trace.best_epoch,
              "train_loss": trace.train_loss, "val_loss": trace.val_loss,
              "config_hash": mcfg.config_hash(), **result.to_dict()}
    _write(out, "train_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("test group %s: macro-F1 %.4f", test_group, result.macro_f1)
    return report


def cmd_kfold(args, rcfg, out: Path) -> dict:
    corpus, contexts = _load_windows(rcfg, _needed_kinds(rcfg))
    windows = _with_context(corpus, contexts, rcfg)
    mcfg = ModelConfig.from_dict(rcfg["model"])
    tcfg = TrainConfig.from_dict(rcfg["train"])
    if rcfg["seeds"]:
        res = run_seeds(windows, mcfg, tcfg, rcfg["seeds"], rcfg["k"], args.workers)
        doc = {k: v for k, v in res.items() if k != "reports"}
        doc["runs"] = [_strip_ts(r.to_dict()) for r in res["reports"]]
        doc["timestamp"] = res["reports"][0].timestamp
    else:
        doc = run_kfold(windows, mcfg, tcfg, rcfg["k"], args.workers).to_dict()
    _write(out, "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write(out, "report.txt", render_any(doc))
    if not args.json:
        sys.stdout.write(render_any(doc))
    return doc


def _strip_ts(d: dict) -> dict:
    d = dict(d)
    d.pop("timestamp", None)
    return d


def cmd_ablate(args, rcfg, out: Path) -> dict:
    subsets = [tuple(s) for s in rcfg["ablation"].get("subsets", DEFAULT_SUBSETS)]
    kinds = sorted({s.split(":")[1] for sub in subsets for s in sub if s.lower().startswith("context:")})
    corpus, contexts = _load_windows(rcfg, kinds)
    table = run_ablation(corpus.windows, contexts, ModelConfig.from_dict(rcfg["model"]),
                         TrainConfig.from_dict(rcfg["train"]), subsets, rcfg["k"], args.workers)
    doc = table.to_dict()
    _write(out, "ablation.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write(out, "ablation.txt", render_ablation(doc))
    if not args.json:
        sys.stdout.write(render_ablation(doc))
    return doc


def cmd_gridsearch(args, rcfg, out: Path) -> dict:
    if not rcfg["grid"]:
        raise ConfigurationError("config has no 'grid' section")
    corpus, contexts = _load_windows(rcfg, _needed_kinds(rcfg))
    windows = _with_context(corpus, contexts, rcfg)
    results = grid_search(windows, rcfg["grid"], ModelConfig.from_dict(rcfg["model"]),
                          TrainConfig.from_dict(rcfg["train"]), rcfg["grid_epochs"], rcfg["k"], args.workers)
    doc = {"results": [{"rank": r["rank"], "params": r["params"], "macro_f1": r["macro_f1"],
                        "val_loss": r["val_loss"]} for r in results],
           "grid_epochs": rcfg["grid_epochs"], "timestamp": results[0]["report"].timestamp}
    _write(out, "grid.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write(out, "grid.txt", render_grid(doc["results"]))
    if not args.json:
        sys.stdout.write(render_grid(doc["results"]))
    return doc


def cmd_gradcheck(args, rcfg, out: Path) -> dict:
    from .gradchecks import TOLERANCE, run_all

    base = args.seed if args.seed is not None else 0
    worst = run_all(range(base, base + args.seeds))
    if not args.json:
        for name, err in worst.items():
            status = "ok" if err <= TOLERANCE else "FAIL"
            sys.stdout.write(f"{name:<40s} {err:.3e}  {status}\n")
    failed = [k for k, v in worst.items() if v > TOLERANCE]
    doc = {"tolerance": TOLERANCE, "worst_relative_error": worst, "failed": failed}
    if failed:
        raise _GradcheckFailed(doc)
    return doc


class _GradcheckFailed(UserError):
    def __init__(self, doc):
        super().__init__(f"gradient check failed for {', '.join(doc['failed'])}")
        self.doc = doc


def cmd_report(args, rcfg, out) -> dict:
    try:
        doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"report {args.input} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"report {args.input}: invalid JSON ({exc})") from None
    text = render_any(doc)
    if not args.json:
        sys.stdout.write(text)
    return {"text": text}


COMMANDS = {
    "synth": cmd_synth,
    "embed": cmd_embed,
    "train": cmd_train,
    "kfold": cmd_kfold,
    "ablate": cmd_ablate,
    "gridsearch": cmd_gridsearch,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# manifest


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_digests(rcfg: dict | None) -> dict:
    if not rcfg or not rcfg.get("data_dir"):
        return {}
    d = Path(rcfg["data_dir"])
    out = {}
    for name in SYNTH_FILES + ("embeddings.jsonl",):
        p = d / name
        if p.exists():
            out[name] = _digest(p)
    return out


def _write_manifest(out: Path, command: str, argv, rcfg, status: str, started: str, error: str | None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "resolved_config": rcfg,
        "input_digests": _input_digests(rcfg),
        "seed": (rcfg or {}).get("train", {}).get("seed"),
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "status": status,
        "error": error,
        "started_at": started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / f"manifest.{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    out = args.out or Path("out")
    rcfg = None
    try:
        cfg = load_config(args.config)
        rcfg = resolve(args, cfg)
        doc = COMMANDS[args.command](args, rcfg, out)
        if args.json:
            sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
        code, status, error = 0, "ok", None
    except _GradcheckFailed as exc:
        if args.json:
            sys.stdout.write(json.dumps(exc.doc, indent=2, sort_keys=True) + "\n")
        print(f"affuse: {exc}", file=sys.stderr)
        code, status, error = 1, "failed", str(exc)
    except UserError as exc:
        print(f"affuse: error: {exc}", file=sys.stderr)
        code, status, error = 1, "failed", str(exc)
    except Exception as exc:  # noqa: BLE001 - last-resort handler for the exit-code contract
        traceback.print_exc(file=sys.stderr)
        code, status, error = 2, "crashed", f"{type(exc).__name__}: {exc}"
    if args.command != "report":
        try:
            _write_manifest(out, args.command, argv, rcfg, status, started, error)
        except OSError as exc:
            print(f"affuse: could not write manifest: {exc}", file=sys.stderr)
            code = code or 2
    return code


if __name__ == "__main__":
    sys.exit(main())
