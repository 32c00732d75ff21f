"""Command line entry point: ``lcge {ingest,mine-rules,train,eval,explain}``."""

from __future__ import annotations

import argparse
import datetime as dt
import difflib
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import FORMATS, ICEWS, DataError, ParseError, augment_inverses, load_dataset, read_encoded, write_encoded
from .evaluator import FILTERS, KnownFacts, OBJECT, SUBJECT, Query, evaluate, queries_from_events
from .explainer import MODES, explain, format_explanation
from .rules import MinerConfig, TemporalRule, mine, pattern_counts, read_rules, score_candidates, write_rules
from .scoring import ConfigError, load_checkpoint, object_scores, save_checkpoint, subject_scores
from .trainer import TrainConfig, read_config_file, train

log = logging.getLogger("lcge")

EXIT_OK = 0
EXIT_PARSE = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5

FEW_RULES = 10
MINER_KEYS = {f.name for f in fields(MinerConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class CommandError(RuntimeError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """JSON record of one command, written at start and finalized at the end."""

    def __init__(self, out_dir: Path, command: str, argv: list[str], config: dict, inputs: list[Path], seed: int):
        self.path = out_dir / f"manifest.{command}.json"
        self.data = {
            "command": command,
            "argv": argv,
            "config": config,
            "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
            "seed": seed,
            "version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": {},
            "summary": {},
        }
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")

    def finish(self, outputs: dict[str, Path], summary: dict | None = None, status: str = "ok"):
        self.data["outputs"] = {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in outputs.items() if Path(p).is_file()}
        self.data["summary"] = summary or {}
        self.data["status"] = status
        self.data["finished"] = _now()
        self.write()


@contextmanager
def run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"{out_dir} is locked by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _config_values(args) -> dict:
    values = read_config_file(args.config) if args.config else {}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - MINER_KEYS - TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown option(s) in {args.config}: {', '.join(unknown)}")
    return values


def miner_config(args, file_values: dict) -> MinerConfig:
    values = {k: v for k, v in file_values.items() if k in MINER_KEYS}
    for key in MINER_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    kinds = {f.name: f.type for f in fields(MinerConfig)}
    return MinerConfig(**{k: (int(v) if kinds[k] in ("int", int) else float(v)) for k, v in values.items()})


def train_config(args, file_values: dict) -> TrainConfig:
    values = {k: v for k, v in file_values.items() if k in TRAIN_KEYS}
    for key in TRAIN_KEYS:
        v = getattr(args, key, None)
        if v is not None and v is not False:
            values[key] = v
    if args.seed is not None:
        values["seed"] = args.seed
    values["deterministic"] = args.deterministic
    cfg = TrainConfig.from_dict(values)
    errs = cfg.errors()
    if errs:
        raise ConfigError("invalid training configuration:\n  " + "\n  ".join(errs))
    return cfg


# -- commands --------------------------------------------------------------------


def cmd_ingest(args, out_dir: Path) -> tuple[dict, dict]:
    src = Path(args.dataset)
    ds = load_dataset(src, args.format)
    outputs = write_encoded(ds, out_dir)
    summary = {
        "format": args.format,
        "entities": ds.vocab.n_entities,
        "predicates": ds.vocab.n_predicates,
        "timestamps": ds.vocab.n_timestamps,
        "rows": {k: len(v) for k, v in ds.intervals.items()},
        "events": {"train": len(ds.train), "valid": len(ds.valid), "test": len(ds.test)},
    }
    print(json.dumps(summary, indent=2))
    return outputs, summary


def cmd_mine(args, out_dir: Path) -> tuple[dict, dict]:
    cfg = miner_config(args, _config_values(args))
    ds = read_encoded(args.data)
    graph = augment_inverses(ds.train)
    vocab = ds.vocab
    if args.import_rules:
        # external rules keep only their shape; confidences are recomputed here
        shapes = sorted({(r.pattern, r.head, r.body) for r in read_rules(args.import_rules, vocab)})
        scored = score_candidates([TemporalRule(*c) for c in shapes], graph, cfg)
        rules = sorted((r for r in scored if r.sc >= cfg.t_sc and r.hc >= cfg.t_hc), key=lambda r: r.sort_key())
    else:
        rules = mine(graph, cfg)
    path = out_dir / "rules.tsv"
    write_rules(path, rules, vocab)
    counts = pattern_counts(rules)
    summary = {"rules": len(rules), "per_pattern": counts, "miner": cfg.__dict__}
    (out_dir / "rules.summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if len(rules) < FEW_RULES:
        log.warning("only %d temporal rules passed the thresholds; rule regularization will have little effect", len(rules))
    print(json.dumps(summary, indent=2))
    return {"rules": path, "summary": out_dir / "rules.summary.json"}, summary


def _validator(ds, cfg: TrainConfig, sample: int | None):
    rows = ds.intervals["valid"]
    if not rows:
        return None
    if sample and sample < len(rows):
        pick = np.random.default_rng(cfg.seed).choice(len(rows), sample, replace=False)
        rows = [rows[i] for i in sorted(pick)]
    queries = queries_from_events(rows)
    known = KnownFacts([ds.train, ds.valid, ds.test])

    def validate(params):
        return evaluate(params, queries, known, cfg.effective_lam, "time", cfg.eval_batch_size).mrr

    return validate


def cmd_train(args, out_dir: Path) -> tuple[dict, dict]:
    cfg = train_config(args, _config_values(args))
    ds = read_encoded(args.data)
    rules = read_rules(args.rules, ds.vocab) if args.rules else []
    ckdir = out_dir / "checkpoints"
    log_path = out_dir / "train.log"
    mode = "a" if args.resume else "w"
    with open(log_path, mode, encoding="utf-8") as logf:

        def on_epoch(rec):
            logf.write(rec.line() + "\n")
            logf.flush()
            print(rec.line(), flush=True)

        params, history = train(
            ds.train,
            rules,
            cfg,
            validate=None if args.no_valid else _validator(ds, cfg, args.valid_sample),
            checkpoint_dir=ckdir,
            resume=args.resume,
            n_entities=ds.vocab.n_entities,
            n_predicates=ds.vocab.n_predicates,
            n_timestamps=ds.vocab.n_timestamps,
            on_epoch=on_epoch,
        )
    final = out_dir / "model.ckpt"
    save_checkpoint(
        final,
        params,
        {
            "lam": repr(float(cfg.lam)),
            "ablate_tis": int(cfg.ablate_tis),
            "ablate_rgpr": int(cfg.ablate_rgpr),
            "seed": cfg.seed,
            "best_epoch": history.best_epoch if history.best_epoch is not None else -1,
        },
    )
    (out_dir / "train.config").write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()), encoding="utf-8")
    summary = {"epochs": len(history), "best_epoch": history.best_epoch, "losses": history.losses, "val_mrr": history.val_mrr}
    return {"model": final, "log": log_path, "config": out_dir / "train.config"}, summary


def _load_model(path, vocab):
    params, meta, _ = load_checkpoint(path)
    want = (vocab.n_entities, vocab.n_predicates, vocab.n_timestamps)
    got = (params.n_entities, params.n_predicates, params.n_timestamps)
    if want != got:
        raise CommandError(
            f"checkpoint dimensions (entities, predicates, timestamps) = {got} do not match the dataset vocabulary {want}"
        )
    lam = 0.0 if meta.get("ablate_tis") else float(meta.get("lam", 0.0))
    return params, meta, lam


def cmd_eval(args, out_dir: Path) -> tuple[dict, dict]:
    ds = read_encoded(args.data)
    params, meta, lam = _load_model(args.checkpoint, ds.vocab)
    if args.lam is not None:
        lam = args.lam
    queries = queries_from_events(ds.intervals[args.split], args.direction)
    known = KnownFacts([ds.train, ds.valid, ds.test])
    filters = FILTERS if args.filter == "both" else (args.filter,)
    outputs, summary = {}, {}
    for f in filters:
        report = evaluate(params, queries, known, lam, f)
        js, txt = report.write(out_dir, f"metrics.{args.split}.{f}")
        outputs[f"metrics.{f}.json"] = js
        outputs[f"metrics.{f}.txt"] = txt
        summary[f] = report.summary()
        print(report.to_text())
    return outputs, summary


def _lookup(kind: str, name: str, names) -> int:
    names = list(names)
    try:
        return names.index(name)
    except ValueError:
        close = difflib.get_close_matches(name, names, n=5, cutoff=0.5)
        hint = f"; did you mean: {', '.join(repr(c) for c in close)}" if close else ""
        raise CommandError(f"unknown {kind} {name!r}{hint}") from None


def parse_query(text: str, vocab) -> Query:
    """``subject|predicate|time`` (object missing) or ``?|predicate|object|time``."""
    parts = [p.strip() for p in text.split("|")]
    if len(parts) == 3:
        s, p, t = parts
        return Query(OBJECT, _lookup("entity", s, vocab.entity_names), _lookup("predicate", p, vocab.predicate_names), vocab.time_index(t), -1)
    if len(parts) == 4 and parts[0] == "?":
        _, p, o, t = parts
        return Query(SUBJECT, _lookup("entity", o, vocab.entity_names), _lookup("predicate", p, vocab.predicate_names), vocab.time_index(t), -1)
    raise CommandError("query must look like 'subject|predicate|YYYY-MM-DD' or '?|predicate|object|YYYY-MM-DD'")


def cmd_explain(args, out_dir: Path) -> tuple[dict, dict]:
    ds = read_encoded(args.data)
    vocab = ds.vocab
    q = parse_query(args.query, vocab)
    if not 0 <= q.t_start < vocab.n_timestamps:
        raise CommandError(f"time {args.query.split('|')[-1]} is outside the dataset timeline")
    params, _, lam = _load_model(args.checkpoint, vocab)
    rules = read_rules(args.rules, vocab)
    cfg = miner_config(args, _config_values(args))
    if q.direction == OBJECT:
        scores = object_scores(params, q.anchor, q.p, q.t_start, lam)[0]
    else:
        scores = subject_scores(params, q.p, q.anchor, q.t_start, lam)[0]
    top = np.argsort(-scores, kind="stable")[: args.top_k]
    lines = [f"query: {args.query}"]
    summary = {"query": args.query, "predictions": []}
    for rank, e in enumerate(top, 1):
        e = int(e)
        found = explain(q, e, ds.train, rules, cfg, modes=args.mode or MODES)
        lines.append(f"\n#{rank} {vocab.entity_names[e]}  score={scores[e]:.4f}")
        if not found:
            lines.append("  no symbolic explanation")
        for ex in found:
            lines.extend("  " + ln for ln in format_explanation(ex, vocab).splitlines())
        summary["predictions"].append({"entity": vocab.entity_names[e], "score": float(scores[e]), "explanations": len(found)})
    text = "\n".join(lines) + "\n"
    path = out_dir / "explanation.txt"
    path.write_text(text, encoding="utf-8")
    print(text)
    return {"explanation": path}, summary


# -- argument parsing ------------------------------------------------------------------


def _add_miner_flags(p):
    p.add_argument("--window", dest="w_t", type=int, help="time window w_t (time steps)")
    p.add_argument("--t-sc", dest="t_sc", type=float, help="temporal confidence threshold")
    p.add_argument("--t-hc", dest="t_hc", type=float, help="temporal head coverage threshold")
    p.add_argument("--static-t-sc", dest="static_t_sc", type=float)
    p.add_argument("--static-t-hc", dest="static_t_hc", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    common.add_argument("--out-dir", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lcge", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="encode a raw dataset directory")
    p.add_argument("dataset", help="directory with train/valid/test files")
    p.add_argument("--format", choices=FORMATS, default=ICEWS)

    p = sub.add_parser("mine-rules", parents=[common], help="mine temporal rules from the training split")
    p.add_argument("--data", required=True, help="ingested dataset directory")
    p.add_argument("--import-rules", help="rescore rules from an external rule file instead of mining")
    _add_miner_flags(p)

    p = sub.add_parser("train", parents=[common], help="train embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--rules", help="rule file from mine-rules")
    p.add_argument("--d", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--ablate-rgpr", dest="ablate_rgpr", action="store_true")
    p.add_argument("--ablate-tis", dest="ablate_tis", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue from <out-dir>/checkpoints/last.ckpt")
    p.add_argument("--valid-sample", type=int, help="validate on a fixed random subset of this many rows")
    p.add_argument("--no-valid", action="store_true", help="skip per-epoch validation")

    p = sub.add_parser("eval", parents=[common], help="rank test queries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--filter", choices=FILTERS + ("both",), default="time")
    p.add_argument("--direction", choices=("both", "object"), default="both")
    p.add_argument("--lam", type=float, help="override the commonsense weight stored in the checkpoint")

    p = sub.add_parser("explain", parents=[common], help="explain top predictions with rules")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--query", required=True, help="'subject|predicate|time' or '?|predicate|object|time'")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--mode", action="append", choices=MODES, help="match mode(s); default both")
    _add_miner_flags(p)
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "mine-rules": cmd_mine,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
}


def _inputs(args) -> list[Path]:
    out = []
    if getattr(args, "dataset", None):
        d = Path(args.dataset)
        out += sorted(p for p in d.iterdir() if p.is_file()) if d.is_dir() else []
    if getattr(args, "data", None):
        d = Path(args.data)
        out += sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith(("manifest", "."))) if d.is_dir() else []
    for name in ("rules", "checkpoint", "config", "import_rules"):
        v = getattr(args, name, None)
        if v:
            out.append(Path(v))
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out_dir = Path(args.out_dir)
    try:
        with run_lock(out_dir):
            config = {k: v for k, v in vars(args).items()}
            manifest = RunManifest(out_dir, args.command, argv, config, _inputs(args), args.seed or 0)
            try:
                outputs, summary = COMMANDS[args.command](args, out_dir)
            except BaseException as exc:
                manifest.finish({}, {"error": str(exc)}, status="failed")
                raise
            manifest.finish(outputs, summary)
    except (ParseError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CommandError, FileNotFoundError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
