"""Command-line entry point: ``asars <command> ...``.

Commands: preprocess, synth, train, evaluate, grid, report.

Configuration files are flat JSON objects.  Recognised keys are the fields of
:class:`ModelConfig` (except table sizes), :class:`TrainConfig`, the
preprocessing thresholds in ``PREP_KEYS`` and ``ks``.  Unknown keys are an
error.  Command-line flags override the file.  Set ``ASARS_LOG_LEVEL`` (e.g.
``DEBUG``) for more output.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import dataprep, synth
from .evaluate import evaluate
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, build_model, fit, grid_search

log = logging.getLogger("asars")

PREP_KEYS = {
    "gap_seconds": 3600,
    "min_item_events": 10,
    "min_session_len": 2,
    "min_user_sessions": 10,
    "test_fraction": 0.2,
    "boundary_ts": None,
}
_SIZE_KEYS = {"num_items", "num_users", "num_time_bins"}
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - _SIZE_KEYS
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
OTHER_KEYS = {"ks"}

# shipped default profile
DEFAULTS = {
    "batch_size": 64,
    "max_len": 200,
    "item_embed_dim": 64,
    "time_embed_dim": 16,
    "user_embed_dim": 32,
    "hidden_dim": 100,
    "learning_rate": 0.2,
    "dropout": 0.5,
    "loss": "hinge",
    "optimizer": "adagrad",
    "ks": [10, 20, 30, 40],
}


class CliError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    prep: dict
    model: dict
    train: dict
    ks: list

    def model_config(self) -> dict:
        return dict(self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    flat = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CliError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise CliError(f"{path}: expected a JSON object")
        flat.update(data)
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = MODEL_KEYS | TRAIN_KEYS | set(PREP_KEYS) | OTHER_KEYS
    unknown = sorted(set(flat) - known)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    prep = {k: flat.get(k, v) for k, v in PREP_KEYS.items()}
    model = {k: flat[k] for k in MODEL_KEYS if k in flat}
    train = {k: flat[k] for k in TRAIN_KEYS if k in flat}
    ks = flat.get("ks", DEFAULTS["ks"])
    if isinstance(ks, str):
        ks = _parse_ks(ks)
    try:
        TrainConfig(**train)
        ModelConfig(**model)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}") from e
    return RunConfig(prep, model, train, list(ks))


def _parse_ks(text: str) -> list:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if part.lower() == "all":
            out.append("all")
        elif part:
            out.append(int(part))
    if not out:
        raise CliError("empty --ks list")
    return out


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "variant", "epochs_max", "learning_rate", "loss", "optimizer", "batch_size", "dropout"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def _require_parent(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise CliError(f"output directory does not exist: {p.parent}")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------

def cmd_preprocess(args) -> int:
    src = _require_file(args.input, "input")
    out = _require_parent(args.output)
    cfg = load_run_config(args.config, _overrides(args))
    reader = dataprep.read_movielens if args.format == "movielens" else dataprep.read_events
    events = reader(src)
    data = dataprep.prepare(events, **{k: v for k, v in cfg.prep.items()})
    dataprep.save_corpus(data, out)
    summary = data.summary()
    _write_json(Path(args.summary or f"{out}.summary.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    out = _require_parent(args.output)
    extra = {}
    for key in ("num_events", "num_items", "num_users"):
        v = getattr(args, key)
        if v is not None:
            extra[key] = v
    synth.synth_to_csv(out, profile=args.profile, seed=args.seed, **extra)
    log.info("wrote %s", out)
    return 0


def _train_extra(cfg: RunConfig, result) -> dict:
    return {
        "train_config": {k: cfg.train[k] for k in sorted(cfg.train)},
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "best_val_mrr20": result.best_val_mrr20,
    }


def cmd_train(args) -> int:
    corpus_path = _require_file(args.corpus, "corpus")
    out = _require_parent(args.out)
    cfg = load_run_config(args.config, _overrides(args))
    data = dataprep.load_corpus(corpus_path)
    tc = cfg.train_config()
    model = build_model(data.train, cfg.model_config(), tc.seed)
    log_path = args.log or f"{out}.log.jsonl"
    result = fit(model, data.train, tc, log_path=log_path)
    save_checkpoint(result.model, out, _train_extra(cfg, result))
    print(json.dumps({"checkpoint": str(out), "best_epoch": result.best_epoch, "epochs": len(result.history)}))
    return 0


def _report(model, data, ks, seed, dataset: str) -> dict:
    rep = evaluate(model, data.test, Ks=ks, seed=seed)
    d = rep.to_dict()
    d["dataset"] = dataset
    d["variant"] = model.config.variant
    return d


def cmd_evaluate(args) -> int:
    corpus_path = _require_file(args.corpus, "corpus")
    ckpt = _require_file(args.ckpt, "checkpoint")
    data = dataprep.load_corpus(corpus_path)
    model, extra = load_checkpoint(ckpt)
    if model.config.num_items != data.train.num_items:
        raise CliError("checkpoint vocabulary does not match the corpus")
    ks = _parse_ks(args.ks)
    seed = extra.get("train_config", {}).get("seed")
    rep = _report(model, data, ks, seed, corpus_path.stem)
    text = json.dumps(rep, sort_keys=True, indent=2)
    if args.output:
        Path(_require_parent(args.output)).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_grid(args) -> int:
    corpus_path = _require_file(args.corpus, "corpus")
    grid_path = _require_file(args.grid, "grid file")
    grid = json.loads(grid_path.read_text(encoding="utf-8"))
    if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
        raise CliError("grid file must map parameter names to non-empty lists")
    unknown = sorted(set(grid) - (MODEL_KEYS | TRAIN_KEYS))
    if unknown:
        raise CliError(f"unknown grid keys: {', '.join(unknown)}")
    cfg = load_run_config(args.config, _overrides(args))
    data = dataprep.load_corpus(corpus_path)
    log_dir = Path(args.log_dir) if args.log_dir else None
    if log_dir:
        log_dir.mkdir(parents=True, exist_ok=True)
    mc = ModelConfig(**cfg.model_config())
    best, point, runs = grid_search(data.train, mc, cfg.train_config(), grid, log_dir)
    if args.out:
        save_checkpoint(best.model, _require_parent(args.out), {"grid_point": point, **_train_extra(cfg, best)})
    print(json.dumps({"best": point, "best_val_mrr20": best.best_val_mrr20, "runs": runs}, sort_keys=True, indent=2))
    return 0


def cmd_report(args) -> int:
    """Collect evaluation reports into one table (one row per report)."""
    rows = []
    ks: list = []
    for path in args.reports:
        rep = json.loads(_require_file(path, "report").read_text(encoding="utf-8"))
        rows.append(rep)
        ks.extend(k for k in rep["Ks"] if k not in ks)
    header = ["dataset", "variant"] + [f"MRR@{k}" for k in ks] + [f"Recall@{k}" for k in ks]
    fh = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(
                [r.get("dataset", ""), r.get("variant", "")]
                + [f"{r['mrr'].get(str(k), float('nan')):.6f}" for k in ks]
                + [f"{r['recall'].get(str(k), float('nan')):.6f}" for k in ks]
            )
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


# -- parser -------------------------------------------------------------------

def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.add_argument("--epochs", dest="epochs_max", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--loss")
    p.add_argument("--optimizer")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asars", description="Session-aware recurrent recommender")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="sessionize, filter and split an event CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--summary", help="summary JSON path (default: <output>.summary.json)")
    p.add_argument("--format", choices=("csv", "movielens"), default="csv", help="input format (movielens: ratings.dat)")
    _add_overrides(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write a synthetic event CSV")
    p.add_argument("--profile", choices=synth.PROFILES, default="markov")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--num-events", type=int)
    p.add_argument("--num-items", type=int)
    p.add_argument("--num-users", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and save the best checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSON-lines epoch log (default: <out>.log.jsonl)")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MRR@K / Recall@K of a checkpoint on the test split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ks", default="10,20,30,40")
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="grid search, best by validation MRR@20")
    p.add_argument("--corpus", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out")
    p.add_argument("--log-dir")
    _add_overrides(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="tabulate evaluation reports as CSV")
    p.add_argument("reports", nargs="+")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("ASARS_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"asars {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
