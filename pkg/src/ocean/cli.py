"""Command-line entry point: ``ocean <subcommand> ...`` (or ``python3 -m ocean``).

Every artifact-producing command writes ``manifest.json`` next to its outputs.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("ocean")

ARCHIVE_NAME = "scenes.ocds"
MANIFEST_NAME = "manifest.json"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    input_hash: str
    outputs: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    version: str = ""

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def content_hash(paths) -> str:
    """sha256 over the bytes of every input file, in sorted path order (directories walked)."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST_NAME))
        elif p.exists():
            files.append(p)
    h = hashlib.sha256()
    for f in sorted(files):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# -- helpers -------------------------------------------------------------------------


def _archive_path(data) -> Path:
    p = Path(data)
    return p / ARCHIVE_NAME if p.is_dir() else p


def _load_data(data):
    from .scenegen import read_archive

    path = _archive_path(data)
    if not path.exists():
        raise FileNotFoundError(f"no scene archive at {path}")
    return read_archive(path)


def _train_images(ds):
    tr = ds.subset("train")
    if len(tr) == 0:
        raise ValueError("dataset has no training scenes")
    return tr


def _classifier_kwargs(args) -> dict:
    kw = {"config": args.config, "random_state": args.seed}
    for name in ("warmup_epochs", "game_epochs", "batch_size", "lr_players", "entropy_coef", "em_cycles"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return kw


def _history_rows(history) -> list[dict]:
    return [s.as_row() for s in history]


def _eval_rows(clf, ds, config_name: str, splits) -> list:
    from .evalx import compute_metrics

    rows = []
    for split in splits:
        sub = ds.subset(split)
        if len(sub) == 0:
            continue
        logs = clf.explain(sub.images, sub.labels, scene_ids=[s.scene_id for s in sub.scenes], with_masks=False)
        rows.append((f"{ds.rule_set}/{split}", config_name, compute_metrics(logs, n_classes=len(clf.classes_))))
    if not rows:
        raise ValueError(f"none of the splits {list(splits)} are present in the dataset")
    return rows


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args, manifest: RunManifest) -> None:
    from .scenegen import generate_dataset, write_archive

    counts = {"train": args.n_train, "val_confounded": args.n_val, "test_nonconfounded": args.n_test}
    counts = {k: v for k, v in counts.items() if v > 0}
    ds = generate_dataset(args.rules, counts, resolution=args.res, seed=args.seed, max_objects=args.max_objects)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ARCHIVE_NAME
    n_bytes = write_archive(path, ds)
    log.info("wrote %d scenes (%d bytes) to %s", len(ds), n_bytes, path)
    manifest.outputs.append(str(path))


def cmd_warmup(args, manifest: RunManifest) -> None:
    from .config import preset
    from .estimators import SlotAutoencoder

    ds = _load_data(args.data)
    train = _train_images(ds)
    cfg = preset(args.config).slots
    if cfg.resolution != ds.resolution:
        raise ValueError(f"config {args.config} expects {cfg.resolution}px data, archive has {ds.resolution}px")
    ae = SlotAutoencoder.from_config(cfg, epochs=args.epochs, batch_size=args.batch_size, random_state=args.seed)
    ae.fit(train.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ae.save(out / "slotcoder.ockp")
    (out / "warmup_curve.json").write_text(json.dumps(ae.loss_curve_))
    manifest.outputs += [str(out / "slotcoder.ockp"), str(out / "warmup_curve.json")]


def _fit_and_save(args, manifest: RunManifest, slotcoder=None) -> None:
    from .estimators import OceanClassifier

    ds = _load_data(args.data)
    train = _train_images(ds)
    from .trainer import append_stats_csv

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats_log = out / "history.csv"
    stats_log.unlink(missing_ok=True)
    clf = OceanClassifier(slotcoder=slotcoder, **_classifier_kwargs(args))
    clf.fit(train.images, train.labels, epoch_callback=lambda s: append_stats_csv(stats_log, [s]))
    clf.save(out)
    (out / "history.json").write_text(json.dumps(_history_rows(clf.history_), indent=1))
    manifest.outputs += [
        str(out / n) for n in ("slotcoder.ockp", "players.ockp", "model.json", "history.json", "history.csv")
    ]


def cmd_train_game(args, manifest: RunManifest) -> None:
    from .estimators import SlotAutoencoder

    ck = Path(args.checkpoint)
    ae = SlotAutoencoder.load(ck / "slotcoder.ockp" if ck.is_dir() else ck)
    args.em_cycles = 0
    _fit_and_save(args, manifest, slotcoder=ae)


def cmd_train_e2e(args, manifest: RunManifest) -> None:
    _fit_and_save(args, manifest)


def _load_classifier(args):
    from .estimators import OceanClassifier

    clf = OceanClassifier.load(args.checkpoint)
    if args.config is not None and args.config.upper() != clf.config.upper():
        from .config import preset

        # evaluate trained players under another preset's game rules
        clf = clf.with_game_config(**asdict(preset(args.config).game))
    return clf


def cmd_eval(args, manifest: RunManifest) -> None:
    from .evalx import emit_report

    clf = _load_classifier(args)
    ds = _load_data(args.data)
    rows = _eval_rows(clf, ds, (args.config or clf.config).upper(), args.splits)
    path = emit_report(rows, args.out)
    for name, _, rep in rows:
        log.info("%s: acc %.3f consensus %.3f length %.2f", name, rep.accuracy, rep.consensus, rep.game_length)
    manifest.outputs.append(str(path))


def cmd_explain(args, manifest: RunManifest) -> None:
    from .evalx import export_explanation
    from .scenegen import get_rule_set

    clf = _load_classifier(args)
    ds = _load_data(args.data)
    sub = ds.subset(args.split)
    if len(sub) == 0:
        raise ValueError(f"split {args.split!r} is empty")
    n = min(args.n, len(sub))
    ids = [s.scene_id for s in sub.scenes[:n]]
    logs = clf.explain(sub.images[:n], sub.labels[:n], scene_ids=ids)
    names = [c.description for c in get_rule_set(ds.rule_set).classes]
    out = Path(args.out)
    for lg in logs:
        path = out / f"scene_{lg.scene_id:05d}"
        export_explanation(lg, sub, path, class_names=names, image_format=args.format)
        manifest.outputs += [str(path.with_suffix(".json")), str(path.with_suffix("." + args.format))]


def cmd_report(args, manifest: RunManifest) -> None:
    from .evalx import emit_report, read_metrics_csv

    rows, curves = [], {}
    for run in map(Path, args.runs):
        csv_path = run / "metrics.csv" if run.is_dir() else run
        if not csv_path.exists():
            raise FileNotFoundError(f"no metrics.csv in {run}")
        rows.extend(read_metrics_csv(csv_path))
    for ck in map(Path, args.histories or []):
        hist = json.loads((ck / "history.json").read_text())
        game = [h for h in hist if h["phase"] == "game"]
        for key in ("accuracy", "consensus_rate", "mean_reward"):
            curves.setdefault(key, {})[ck.name] = [h[key] for h in game]
    path = emit_report(rows, args.out, curves or None)
    manifest.outputs.append(str(path))


# -- parser --------------------------------------------------------------------------


def _positive(v: str) -> int:
    i = int(v)
    if i < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return i


def _non_negative(v: str) -> int:
    i = int(v)
    if i < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return i


def _non_negative_float(v: str) -> float:
    x = float(v)
    if not x >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {v}")
    return x


def build_parser() -> argparse.ArgumentParser:
    from .config import PRESETS
    from .scenegen import SPLITS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    common.add_argument("--threads", type=_positive, default=None, help="cap on torch worker threads")

    parser = argparse.ArgumentParser(prog="ocean", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    configs = list(PRESETS) + [p.lower() for p in PRESETS]

    p = sub.add_parser("gen-data", parents=[common], help="generate a scene archive")
    p.add_argument("--rules", required=True, choices=["hans3-lite", "hans7-lite"])
    p.add_argument("--n-train", type=_non_negative, default=2000)
    p.add_argument("--n-val", type=_non_negative, default=0)
    p.add_argument("--n-test", type=_non_negative, default=500)
    p.add_argument("--res", type=_positive, default=32)
    p.add_argument("--max-objects", type=_positive, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data, inputs=[])

    p = sub.add_parser("warmup", parents=[common], help="train the slot autoencoder")
    p.add_argument("--config", default="A", choices=configs)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=_non_negative, default=40)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warmup, inputs=["data"])

    def training_flags(p, e2e: bool):
        p.add_argument("--config", default="A", choices=configs)
        p.add_argument("--data", required=True)
        p.add_argument("--game-epochs", type=_non_negative, default=None)
        p.add_argument("--batch-size", type=_positive, default=None)
        p.add_argument("--lr-players", type=_non_negative_float, default=None)
        p.add_argument("--entropy-coef", type=_non_negative_float, default=None, help="policy entropy bonus")
        if e2e:
            p.add_argument("--warmup-epochs", type=_non_negative, default=None)
            p.add_argument("--em-cycles", type=_non_negative, default=None)
        p.add_argument("--out", required=True)

    p = sub.add_parser("train-game", parents=[common], help="train players on a warmed-up slot coder")
    training_flags(p, e2e=False)
    p.add_argument("--checkpoint", required=True, help="warm-up output directory or .ockp file")
    p.set_defaults(func=cmd_train_game, inputs=["data", "checkpoint"])

    p = sub.add_parser("train-e2e", parents=[common], help="warm-up, game training and optional EM")
    training_flags(p, e2e=True)
    p.set_defaults(func=cmd_train_e2e, inputs=["data"])

    p = sub.add_parser("eval", parents=[common], help="play evaluation games and write metrics.csv")
    p.add_argument("--config", default=None, choices=configs, help="game rules (default: the trained preset)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", nargs="+", default=["test_nonconfounded", "val_confounded"], choices=SPLITS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval, inputs=["data", "checkpoint"])

    p = sub.add_parser("explain", parents=[common], help="export explananda (JSON + figure)")
    p.add_argument("--config", default=None, choices=configs)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test_nonconfounded", choices=SPLITS)
    p.add_argument("-n", type=_positive, default=10)
    p.add_argument("--format", default="png", choices=["png", "svg"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain, inputs=["data", "checkpoint"])

    p = sub.add_parser("report", parents=[common], help="merge metrics.csv files and plot learning curves")
    p.add_argument("--runs", nargs="+", required=True, help="eval output directories or CSV files")
    p.add_argument("--histories", nargs="*", help="training output directories with history.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report, inputs=["runs", "histories"])
    return parser


def _setup_logging() -> None:
    level = os.environ.get("OCEAN_LOG", "info").lower()
    logging.basicConfig(
        level=LOG_LEVELS.get(level, logging.INFO), format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr, force=True,
    )
    if level not in LOG_LEVELS:
        log.warning("OCEAN_LOG=%r not recognised; using info", level)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse prints usage to stderr itself
        return int(e.code or 0)
    _setup_logging()

    import torch

    from . import __version__

    torch.set_num_threads(args.threads or torch.get_num_threads())
    torch.manual_seed(args.seed)
    inputs = []
    for name in args.inputs:
        v = getattr(args, name, None)
        inputs.extend(v if isinstance(v, list) else [v] if v else [])
    config = {k: v for k, v in vars(args).items() if k not in ("func", "inputs", "threads")}
    manifest = RunManifest(
        command=args.command, argv=argv, config=config, seed=args.seed, input_hash=content_hash(inputs),
        started=_now(), version=__version__,
    )
    t0 = time.perf_counter()
    try:
        args.func(args, manifest)
    except (OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as e:
        log.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        return 1
    manifest.finished = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out)
    log.info("%s done in %.1fs; manifest at %s", args.command, time.perf_counter() - t0, out / MANIFEST_NAME)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
