"""Command-line driver: ``gen``, ``train``, ``eval`` and ``ablate``.

Every command reads an optional flat ``key = value`` config file
(``--config``), applies command-line overrides (dedicated flags and
``--set key=value``), and writes its outputs plus a ``manifest.json`` into
``--out``. The effective config is stored as ``config.txt`` next to the
manifest, which records its sha256.

Exit codes: 0 success, 1 I/O error, 2 config error, 3 training abort,
4 evaluation error (e.g. snapshot/dataset dimension mismatch).

CSV columns
  records.csv   iter, lr, selected_count, mean_selected_loss, forward_roi_count, backward_roi_count, wall_time_ms
  loss.csv      the same without wall_time_ms (byte-identical across reruns)
  detections.csv scene_id, class_id, x1, y1, x2, y2, score
  report.csv    class_id, num_gt, num_det, ap (last row: mAP)
  ablation.csv  variant, seed, final_map, final_mean_loss, mean_iter_time_ms, then extras
  curves.csv    variant, seed, iter, mean_loss
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .detecteval import DEFAULT_NMS_IOU, DEFAULT_RESCORE_THRESH, DEFAULT_SCORE_THRESH, DEFAULT_VOTE_IOU, evaluate, write_detections
from .roihead import load_snapshot
from .sampler import STRATEGIES, SamplerConfig
from .synthdata import ConfigError, DatasetConfig, DatasetParseError, generate_dataset, read_dataset, write_dataset
from .trainer import (
    ABLATION_VARIANTS, DEFAULT_ALL_ROIS_LR_MULTIPLIER, LOSS_COLUMNS, TrainConfig, TrainingAbort,
    run_ablation_suite, snapshot_normalizer, train, write_ablation, write_records,
)

log = logging.getLogger("ohemdet")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_ABORT, EXIT_EVAL = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- config schema ---------------------------------------------------------------


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, bool, str, ints, floats, strs
    default: object
    section: str  # data, sampler, train, eval, run
    help: str = ""


def _dataclass_keys(cls, section: str, skip=()) -> dict[str, Key]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            kind = "bool"
        elif isinstance(default, int):
            kind = "int"
        elif isinstance(default, float):
            kind = "float"
        elif isinstance(default, tuple):
            kind = "ints" if all(isinstance(v, int) for v in default) else "floats"
        else:
            kind = "str"
        out[f.name] = Key(kind, default, section)
    return out


KEYS: dict[str, Key] = {
    "seed": Key("int", 0, "run", "seed for data generation and training"),
    "name": Key("str", None, "run", "dataset name for gen (writes <name>.train / <name>.test)"),
    "dataset": Key("str", None, "run", "dataset path or prefix (train: .train, eval: .test)"),
    "snapshot": Key("str", None, "run", "snapshot file for eval"),
    "iterative_bbox": Key("bool", False, "run", "eval with iterative relocalization + box voting"),
    "plots": Key("bool", True, "run", "render figures when matplotlib is available"),
    "seeds": Key("ints", (0, 1, 2), "run", "ablation seeds"),
    "variants": Key("strs", tuple(ABLATION_VARIANTS), "run", "ablation variants"),
    "all_lr_multiplier": Key("float", DEFAULT_ALL_ROIS_LR_MULTIPLIER, "run", "lr multiplier of the all-RoIs variant"),
    "curve_every": Key("int", 1000, "run", "ablation: all-RoI loss recorded every this many iterations (0 = off)"),
    "score_thresh": Key("float", DEFAULT_SCORE_THRESH, "eval"),
    "nms_iou": Key("float", DEFAULT_NMS_IOU, "eval"),
    "rescore_thresh": Key("float", DEFAULT_RESCORE_THRESH, "eval"),
    "vote_iou": Key("float", DEFAULT_VOTE_IOU, "eval"),
}
KEYS.update(_dataclass_keys(DatasetConfig, "data", skip=("seed",)))
KEYS.update(_dataclass_keys(SamplerConfig, "sampler"))
KEYS.update(_dataclass_keys(TrainConfig, "train", skip=("sampler", "seed")))

REQUIRED = {"gen": ("name",), "train": ("dataset",), "eval": ("snapshot", "dataset"), "ablate": ()}


def _convert(key: str, raw: str):
    spec = KEYS[key]
    raw = raw.strip()
    try:
        if spec.kind == "int":
            return int(raw, 0)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if spec.kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if spec.kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if spec.kind == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {spec.kind}") from None


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Returns raw strings."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate config key {key!r}")
        out[key] = value
    return out


def merged_config(file_values: dict[str, str], overrides: dict[str, str]) -> dict:
    """Defaults, then file values, then overrides; values typed."""
    cfg = {k: spec.default for k, spec in KEYS.items()}
    for source in (file_values, overrides):
        for k, raw in source.items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = _convert(k, raw)
    return cfg


def render_config(cfg: dict) -> str:
    lines = []
    for section in ("run", "data", "sampler", "train", "eval"):
        lines.append(f"# {section}")
        for k in sorted(k for k, spec in KEYS.items() if spec.section == section):
            if cfg[k] is not None:
                lines.append(f"{k} = {_render(cfg[k])}")
    return "\n".join(lines) + "\n"


def dataset_config(cfg: dict) -> DatasetConfig:
    fields = {k: cfg[k] for k, spec in KEYS.items() if spec.section == "data"}
    return DatasetConfig(seed=cfg["seed"], **fields)


def train_config(cfg: dict) -> TrainConfig:
    try:
        sampler = SamplerConfig(**{k: cfg[k] for k, spec in KEYS.items() if spec.section == "sampler"})
        return TrainConfig(sampler=sampler, seed=cfg["seed"], **{k: cfg[k] for k, spec in KEYS.items() if spec.section == "train"})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def eval_kwargs(cfg: dict, iterative: bool) -> dict:
    kw = {"score_thresh": cfg["score_thresh"], "nms_iou": cfg["nms_iou"]}
    if iterative:
        kw.update(rescore_thresh=cfg["rescore_thresh"], vote_iou=cfg["vote_iou"])
    return kw


# --- output directory plumbing ---------------------------------------------------


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class OutputDir:
    """Holds the lockfile for the duration of a command and writes the manifest."""

    LOCK = ".ohemdet.lock"

    def __init__(self, path: Path):
        self.path = path
        self.lock = path / self.LOCK
        self.started = _now()
        self.artifacts: dict[str, object] = {}

    def __enter__(self):
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"{self.path} is locked by another run ({self.lock}); remove the lockfile if stale", EXIT_IO) from None
        except OSError as exc:
            raise CliError(f"cannot write to {self.path}: {exc}", EXIT_IO) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False

    def add(self, key: str, path) -> Path:
        self.artifacts[key] = str(path)
        return Path(path)

    def write_manifest(self, command: str, cfg: dict, inputs: dict | None = None) -> Path:
        text = render_config(cfg)
        cfg_path = self.path / "config.txt"
        cfg_path.write_text(text)
        manifest = {
            "tool": "ohemdet",
            "version": __version__,
            "command": command,
            "seed": cfg["seed"],
            "config_file": cfg_path.name,
            "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
            "inputs": inputs or {},
            "artifacts": self.artifacts,
            "started": self.started,
            "finished": _now(),
        }
        path = self.path / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _resolve_dataset(value: str, ext: str) -> Path:
    p = Path(value)
    if p.is_file():
        return p
    q = Path(f"{value}.{ext}")
    if q.is_file():
        return q
    raise CliError(f"dataset not found: {value} (also tried {q})", EXIT_IO)


def _load_dataset(value: str, ext: str):
    path = _resolve_dataset(value, ext)
    try:
        return path, read_dataset(path)
    except DatasetParseError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None


# --- commands ----------------------------------------------------------------------


def cmd_gen(cfg: dict, out: Path) -> int:
    data_cfg = dataset_config(cfg)
    with OutputDir(out) as od:
        for split in ("train", "test"):
            ds = generate_dataset(data_cfg, split)
            od.add(split, write_dataset(ds, out / f"{cfg['name']}.{split}"))
        od.write_manifest("gen", cfg)
    print(f"wrote {out / cfg['name']}.train and .test")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    tcfg = train_config(cfg)
    ds_path, ds = _load_dataset(cfg["dataset"], "train")
    with OutputDir(out) as od:
        try:
            result = train(tcfg, ds, out_dir=out)
        except TrainingAbort as exc:
            diag = od.add("abort", out / "abort.json")
            diag.write_text(json.dumps({"error": str(exc), **exc.diagnostic}, indent=2, sort_keys=True, default=str) + "\n")
            od.write_manifest("train", cfg, {"dataset": str(ds_path)})
            raise CliError(f"training aborted: {exc}; diagnostic written to {diag}", EXIT_ABORT) from None
        write_records(od.add("records", out / "records.csv"), result.records, timing=True)
        write_records(od.add("loss", out / "loss.csv"), result.records, timing=False)
        od.artifacts["snapshots"] = [str(p) for p in result.snapshots]
        if result.events:
            od.artifacts["events"] = [f"{it}: {msg}" for it, msg in result.events]
        if cfg["plots"]:
            from .plotting import plot_training_loss

            fig = plot_training_loss(result.records, out / "loss.png")
            if fig is not None:
                od.add("loss_plot", fig)
        od.write_manifest("train", cfg, {"dataset": str(ds_path)})
    last = result.records[-1]
    print(f"trained {len(result.records)} iterations; final mean selected loss {last.mean_selected_loss:.4f}; snapshot {result.snapshots[-1]}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    ds_path, ds = _load_dataset(cfg["dataset"], "test")
    snap_path = Path(cfg["snapshot"])
    try:
        snap = load_snapshot(snap_path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read snapshot {snap_path}: {exc}", EXIT_IO) from None
    params = snap.params
    if params.feature_dim != ds.config.feature_dim or params.num_classes != ds.config.num_classes:
        raise CliError(
            f"dimension mismatch: snapshot has D={params.feature_dim}, K={params.num_classes}; "
            f"dataset has D={ds.config.feature_dim}, K={ds.config.num_classes}",
            EXIT_EVAL,
        )
    iterative = cfg["iterative_bbox"]
    report, dets = evaluate(
        params, ds.scenes, iterative=iterative, config=ds.config,
        normalizer=snapshot_normalizer(snap.extra), **eval_kwargs(cfg, iterative),
    )
    with OutputDir(out) as od:
        write_detections(od.add("detections", out / "detections.csv"), dets)
        report.write_csv(od.add("report", out / "report.csv"))
        od.write_manifest("eval", cfg, {"dataset": str(ds_path), "snapshot": str(snap_path)})
    print(report.summary())
    return EXIT_OK


def write_curves(path, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("variant", "seed", "iter", "mean_loss"))
        for r in rows:
            for it, v in r.curve:
                writer.writerow((r.variant, r.seed, it, f"{v:.6f}"))
    return Path(path)


def cmd_ablate(cfg: dict, out: Path) -> int:
    base = train_config(cfg)
    unknown = sorted(set(cfg["variants"]) - set(ABLATION_VARIANTS))
    if unknown:
        raise ConfigError(f"config key 'variants': unknown variants {unknown}; choose from {list(ABLATION_VARIANTS)}")
    inputs = {}
    if cfg["dataset"]:
        tr_path, train_ds = _load_dataset(cfg["dataset"], "train")
        te_path, test_ds = _load_dataset(cfg["dataset"], "test")
        inputs = {"train": str(tr_path), "test": str(te_path)}
    else:
        data_cfg = dataset_config(cfg)
        train_ds, test_ds = generate_dataset(data_cfg, "train"), generate_dataset(data_cfg, "test")

    def progress(row):
        print(f"{row.variant:18s} seed {row.seed}  mAP {row.final_map:.4f}  loss {row.final_mean_loss:.4f}  {row.mean_iter_time_ms:.2f} ms/iter", flush=True)

    with OutputDir(out) as od:
        try:
            rows = run_ablation_suite(
                base, train_ds, test_ds, seeds=cfg["seeds"], variants=cfg["variants"],
                all_lr_multiplier=cfg["all_lr_multiplier"], progress=progress, curve_every=cfg["curve_every"],
            )
        except TrainingAbort as exc:
            diag = od.add("abort", out / "abort.json")
            diag.write_text(json.dumps({"error": str(exc), **exc.diagnostic}, indent=2, sort_keys=True, default=str) + "\n")
            od.write_manifest("ablate", cfg, inputs)
            raise CliError(f"training aborted: {exc}; diagnostic written to {diag}", EXIT_ABORT) from None
        write_ablation(od.add("ablation", out / "ablation.csv"), rows)
        if cfg["curve_every"]:
            write_curves(od.add("curves", out / "curves.csv"), rows)
        if cfg["plots"]:
            from .plotting import plot_ablation_map, plot_loss_curves

            for key, fig in (("map_plot", plot_ablation_map(rows, out / "ablation_map.png")), ("curve_plot", plot_loss_curves(rows, out / "loss_curves.png"))):
                if fig is not None:
                    od.add(key, fig)
        od.write_manifest("ablate", cfg, inputs)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


# --- argument parsing -------------------------------------------------------------


def _key_help() -> str:
    lines = ["config keys (file 'key = value' or --set key=value):"]
    for k, spec in sorted(KEYS.items(), key=lambda kv: (kv[1].section, kv[0])):
        default = "(required)" if spec.default is None else _render(spec.default)
        lines.append(f"  [{spec.section}] {k} ({spec.kind}) default {default}" + (f": {spec.help}" if spec.help else ""))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the 'seed' key")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="ohemdet",
        description=__doc__.split("\n\n")[0],
        epilog=__doc__.split("\n\n", 1)[1] + "\n" + _key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate <name>.train / <name>.test")
    gen.add_argument("--name", help="dataset name")

    tr = sub.add_parser("train", parents=[common], help="train one configuration")
    tr.add_argument("--dataset", help="train split file or prefix")
    tr.add_argument("--strategy", choices=STRATEGIES)
    tr.add_argument("--n", type=int, dest="images_per_batch", help="images per mini-batch (N)")
    tr.add_argument("--b", type=int, dest="batch_size", help="RoIs per mini-batch (B)")
    tr.add_argument("--lr", type=float, dest="lr_initial", help="initial learning rate")
    tr.add_argument("--bg-lo", type=float, dest="bg_lo", help="lower IoU bound of background RoIs")
    tr.add_argument("--iters", type=int, dest="total_iters", help="total iterations")

    ev = sub.add_parser("eval", parents=[common], help="detect and score a split")
    ev.add_argument("--snapshot")
    ev.add_argument("--dataset", help="split file or prefix (default extension .test)")
    ev.add_argument("--iterative-bbox", action="store_const", const="true", dest="iterative_bbox", help="iterative relocalization + box voting")

    ab = sub.add_parser("ablate", parents=[common], help="run the ablation suite")
    ab.add_argument("--dataset", help="dataset prefix; generated from the config when omitted")
    ab.add_argument("--seeds", help="comma-separated seeds")
    ab.add_argument("--variants", help="comma-separated variant names")
    return parser


FLAG_KEYS = ("name", "dataset", "strategy", "images_per_batch", "batch_size", "lr_initial", "bg_lo", "total_iters",
             "snapshot", "iterative_bbox", "seeds", "variants")


def resolve_config(args) -> dict:
    file_values = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_CONFIG) from None
        file_values = parse_config_text(text, args.config)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for k in FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            overrides[k] = str(v)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = merged_config(file_values, overrides)
    for k in REQUIRED[args.command]:
        if cfg[k] is None:
            raise ConfigError(f"missing required config key {k!r} (set it in the config file or with --{k})")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, Path(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
