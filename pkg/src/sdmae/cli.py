"""Command-line entry point: ``sdmae {pretrain,eval,reproduce-ladder,gen-synth}``.

Run configuration files are INI files (schema version 1)::

    [run]
    schema_version = 1
    name = my-run            ; run directory name under the output root

    [data]
    root = data/synth        ; root/{train,val}/{class}/*.png
    ignore_classes =         ; comma-separated class directories to skip

    [model]
    preset = desk            ; vit_s | desk | tiny
    enc_depth = 4            ; any ModelConfig field

    [head]
    out_dim = 256            ; any HeadConfig field

    [train]
    preset = S4              ; S1 | S2 | S3 | S4
    epochs = 20              ; any TrainConfig field

    [loss]
    mode = sd_mae            ; mae | decoupled_pixel | decoupled_feature_mse | sd_mae
    alpha = 0.2
    beta = 0.2

Values resolve in this order, later winning: built-in defaults, presets named
in the file, other keys in the file, presets given on the command line, then
explicit command-line options (``--loss``, ``--alpha``, ``--beta``, ``--set
section.key=value``).  Defaults not pinned by the reference protocol (batch
size, augmentation, desk model geometry, fine-tuning schedule) are marked
"unspecified" in ``SCHEMA_NOTES``.

Run directories live under ``$SDMAE_OUTPUT_ROOT`` (default ``./runs``) and
always contain ``config.json`` with the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import (
    LOSS_MODES,
    MODEL_PRESETS,
    TRAIN_PRESETS,
    HeadConfig,
    LossWeights,
    ModelConfig,
    TrainConfig,
    apply_preset,
    from_dict,
    to_dict,
)
from .errors import ConfigError, DataError, ParameterError, SDMAEError

log = logging.getLogger("sdmae")

SCHEMA_VERSION = 1
OUTPUT_ENV = "SDMAE_OUTPUT_ROOT"
SECTIONS = ("run", "data", "model", "head", "train", "loss")

SCHEMA_NOTES = {
    "train.batch_size": "unspecified",
    "train.augment": "unspecified",
    "train.betas": "unspecified",
    "train.ft_epochs": "unspecified",
    "train.ft_warmup_epochs": "unspecified",
    "train.probe_epochs": "unspecified",
    "model.input_mean": "unspecified",
    "model.input_std": "unspecified",
    "head.temp_student": "unspecified",
    "head.temp_teacher": "unspecified",
}

# (label, mode, alpha, beta) in ablation-ladder row order
LADDER: List[Tuple[str, str, float, float]] = [
    ("MAE", "mae", 0.0, 0.0),
    ("MAE + visible pixels 0.5", "decoupled_pixel", 0.5, 0.0),
    ("MAE + visible pixels 0.2", "decoupled_pixel", 0.2, 0.0),
    ("MAE + visible feature MSE 0.2", "decoupled_feature_mse", 0.2, 0.0),
    ("SD-MAE 0.2", "sd_mae", 0.0, 0.2),
]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: MODEL_PRESETS["desk"]())
    train: TrainConfig = field(default_factory=TrainConfig)
    data: Dict[str, Any] = field(default_factory=lambda: {"root": None, "ignore_classes": []})
    run: Dict[str, Any] = field(default_factory=lambda: {"name": None, "model_preset": "desk"})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": to_dict(self.model),
            "train": to_dict(self.train),
            "data": dict(self.data),
            "run": dict(self.run),
        }

    def write(self, run_dir: Path) -> Path:
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "RunConfig":
        return cls(
            model=from_dict(ModelConfig, data["model"]),
            train=from_dict(TrainConfig, data["train"]),
            data=dict(data.get("data", {})),
            run=dict(data.get("run", {})),
        )


# -- value coercion ------------------------------------------------------------
def _coerce(raw: str, default: Any, where: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    if default is None and raw.lower() in ("", "none"):
        return None
    return raw


def _set_fields(obj, values: Dict[str, str], section: str, skip: Sequence[str] = ()):
    known = {f.name for f in fields(obj)} - set(skip) - {"head", "loss"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    updates = {k: _coerce(v, getattr(obj, k), f"{section}.{k}") for k, v in values.items()}
    return dataclasses.replace(obj, **updates)


def _parse_set(items: Sequence[str]) -> Dict[str, Dict[str, str]]:
    out: Dict[str, Dict[str, str]] = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if section not in SECTIONS:
            raise ConfigError(f"--set: unknown section {section!r}; choose from {', '.join(SECTIONS)}")
        out.setdefault(section, {})[name] = value
    return out


def _allowed_keys(section: str) -> set:
    if section == "data":
        return {"root", "ignore_classes"}
    if section == "run":
        return {"name", "schema_version"}
    cls = {"model": ModelConfig, "head": HeadConfig, "train": TrainConfig, "loss": LossWeights}[section]
    return ({f.name for f in fields(cls)} - {"head", "loss"}) | ({"preset"} if section == "model" else set())


def check_keys(layer: Dict[str, Dict[str, str]]) -> None:
    """Raise one ConfigError naming every unknown section and key in ``layer``."""
    bad = [f"[{s}]" for s in sorted(set(layer) - set(SECTIONS))]
    for section in SECTIONS:
        bad += [f"{section}.{k}" for k in sorted(set(layer.get(section, {})) - _allowed_keys(section))]
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(bad)}")


def _apply_layer(cfg: RunConfig, layer: Dict[str, Dict[str, str]]) -> RunConfig:
    """Apply one layer of section -> {key: raw value}; presets inside the layer apply first."""
    check_keys(layer)
    model_vals = dict(layer.get("model", {}))
    train_vals = dict(layer.get("train", {}))
    if "preset" in model_vals:
        name = model_vals.pop("preset").strip()
        if name not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {name!r}; choose from {', '.join(MODEL_PRESETS)}")
        cfg.model = MODEL_PRESETS[name]()
        cfg.run["model_preset"] = name
    if "preset" in train_vals:
        cfg.train = apply_preset(cfg.train, train_vals.pop("preset").strip())
    cfg.model = _set_fields(cfg.model, model_vals, "model")
    cfg.model = dataclasses.replace(cfg.model, head=_set_fields(cfg.model.head, layer.get("head", {}), "head"))
    cfg.train = _set_fields(cfg.train, train_vals, "train", skip=("preset",))
    cfg.train = dataclasses.replace(cfg.train, loss=_set_fields(cfg.train.loss, layer.get("loss", {}), "loss"))

    data_vals = dict(layer.get("data", {}))
    unknown = sorted(set(data_vals) - {"root", "ignore_classes"})
    if unknown:
        raise ConfigError(f"unknown keys in [data]: {', '.join(unknown)}")
    if "root" in data_vals:
        cfg.data["root"] = data_vals["root"].strip() or None
    if "ignore_classes" in data_vals:
        cfg.data["ignore_classes"] = [c.strip() for c in data_vals["ignore_classes"].split(",") if c.strip()]

    run_vals = dict(layer.get("run", {}))
    version = run_vals.pop("schema_version", None)
    if version is not None and int(version) != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    unknown = sorted(set(run_vals) - {"name"})
    if unknown:
        raise ConfigError(f"unknown keys in [run]: {', '.join(unknown)}")
    if "name" in run_vals:
        cfg.run["name"] = run_vals["name"].strip() or None
    return cfg


def read_config_file(path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = _apply_layer(cfg, read_config_file(args.config))
    cli: Dict[str, Dict[str, str]] = {}
    if getattr(args, "model", None):
        cli.setdefault("model", {})["preset"] = args.model
    if getattr(args, "preset", None):
        cli.setdefault("train", {})["preset"] = args.preset
    if cli:
        cfg = _apply_layer(cfg, cli)
    cfg = _apply_layer(cfg, _parse_set(getattr(args, "set", None) or []))
    loss = {}
    if getattr(args, "loss", None):
        loss["mode"] = args.loss
    if getattr(args, "alpha", None) is not None:
        loss["alpha"] = str(args.alpha)
    if getattr(args, "beta", None) is not None:
        loss["beta"] = str(args.beta)
    if getattr(args, "data", None):
        cfg.data["root"] = args.data
    if getattr(args, "run_name", None):
        cfg.run["name"] = args.run_name
    cfg = _apply_layer(cfg, {"loss": loss})
    cfg.model.validate()
    cfg.train.validate()
    return cfg


def output_root(args: Optional[argparse.Namespace] = None) -> Path:
    if args is not None and getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


# -- data ------------------------------------------------------------------------
def load_dataset(root, image_size: int, ignore_classes=()) -> Dict[str, Any]:
    from .datakit import DatasetManifest, load_split, scan_folder

    if root is None:
        raise ConfigError("no dataset given: pass --data or set [data] root")
    root = Path(root)
    if root.is_file():
        manifest = DatasetManifest.load(root)
    else:
        manifest = scan_folder(root, ignore_classes=ignore_classes)
    out = {"classes": manifest.classes, "manifest": manifest}
    for split in ("train", "val"):
        if manifest.splits.get(split):
            out[split] = load_split(manifest, split, image_size)
    if "train" not in out:
        raise DataError(f"{root} has no training images")
    return out


# -- commands --------------------------------------------------------------------
def _run_name(cfg: RunConfig, suffix: str = "") -> str:
    from .config import fingerprint

    base = cfg.run.get("name") or f"{cfg.train.loss.mode}-{fingerprint(cfg.model, cfg.train)[:8]}"
    return base + suffix


def _pretrain_one(cfg: RunConfig, images: np.ndarray, run_dir: Path, resume=None):
    from .pretrain import pretrain

    cfg.write(run_dir)
    return pretrain(images, cfg.model, cfg.train, run_dir=run_dir, resume=resume)


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    if args.resume and not Path(args.resume).is_file():
        raise ConfigError(f"--resume checkpoint {args.resume} does not exist")
    data = load_dataset(cfg.data["root"], cfg.model.img_size, cfg.data["ignore_classes"])
    images = data["train"][0]
    root = output_root(args)
    if args.alpha_grid:
        alphas = _float_list(args.alpha_grid, "--alpha-grid")
        mode = cfg.train.loss.mode
        if mode not in ("decoupled_pixel", "decoupled_feature_mse"):
            log.info("alpha grid runs in decoupled_pixel mode (requested mode %s has no alpha)", mode)
            mode = "decoupled_pixel"
        parent = root / _run_name(cfg, "-alpha-grid")
        for a in alphas:
            child = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, loss=LossWeights(mode, a, cfg.train.loss.beta)))
            child.run = {**cfg.run, "name": f"alpha_{a:g}"}
            run_dir = parent / f"alpha_{a:g}"
            _pretrain_one(child, images, run_dir)
            print(f"alpha={a:g}: {run_dir}")
        return 0
    run_dir = root / _run_name(cfg)
    result = _pretrain_one(cfg, images, run_dir, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"run directory: {run_dir}")
    if last:
        print("final epoch: " + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k != "epoch"))
    return 0


def _float_list(text: str, what: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str, what: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None


def _eval_train_config(args, ckpt) -> TrainConfig:
    tc = from_dict(TrainConfig, ckpt.train_config) if ckpt.train_config else TrainConfig()
    if args.preset:
        tc = apply_preset(tc, args.preset)
    sets = _parse_set(args.set or [])
    if set(sets) - {"train"}:
        raise ConfigError("eval only accepts --set train.<key>=<value> overrides")
    tc = _set_fields(tc, sets.get("train", {}), "train", skip=("preset",))
    tc.validate()
    return tc


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import EmbeddingTable, balanced_subsample, embedding_table, export_attention, finetune, knn_mismatch_rate, linear_probe
    from .pretrain import model_from_checkpoint

    out_dir = Path(args.out_dir) if args.out_dir else output_root() / "eval" / args.task
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = _int_list(args.seeds, "--seeds")

    if args.task == "knn" and args.table:
        table = EmbeddingTable.load(args.table)
    else:
        if not args.ckpt:
            raise ConfigError(f"--ckpt is required for task {args.task}")
        ckpt = load_checkpoint(args.ckpt)
        model = model_from_checkpoint(ckpt)
        img_size = model.cfg.img_size
        if args.task == "attention" and args.data is None:
            raise ConfigError("attention export needs --data")
        data = load_dataset(args.data, img_size, args.ignore_classes.split(",") if args.ignore_classes else ())
        num_classes = len(data["classes"])
        metrics = args.metrics or []
        want_auc = True if "auc" in metrics else (False if metrics else None)
        if want_auc and num_classes != 2:
            raise ParameterError(f"AUC requested but the dataset has {num_classes} classes; AUC is binary-only")

    if args.task in ("finetune", "probe"):
        if "val" not in data:
            raise DataError(f"{args.data} has no val split to evaluate on")
        (tx, ty), (vx, vy) = data["train"], data["val"]
        if args.task == "finetune":
            tc = _eval_train_config(args, ckpt)
            report = finetune(ckpt, tx, ty, vx, vy, tc, seeds=seeds, pool=args.pool, num_classes=num_classes, want_auc=want_auc)
        else:
            epochs = args.epochs or (from_dict(TrainConfig, ckpt.train_config).probe_epochs if ckpt.train_config else 100)
            report = linear_probe(model, tx, ty, vx, vy, epochs=epochs, seeds=seeds, pool=args.pool, num_classes=num_classes, want_auc=want_auc)
        report.source = str(args.ckpt)
        report.write(out_dir, args.task)
        line = f"{args.task}: accuracy {report.accuracy:.4f} +/- {report.accuracy_std:.4f}, macro-F1 {report.macro_f1:.4f} +/- {report.macro_f1_std:.4f}"
        if report.auc is not None:
            line += f", AUC {report.auc:.4f} +/- {report.auc_std:.4f}"
        print(line)
    elif args.task == "knn":
        if not args.table:
            split = "val" if "val" in data else "train"
            table = embedding_table(model, data[split][0], data[split][1], source=f"{args.ckpt}:{split}:{args.pool}", pool=args.pool)
            table.save(out_dir / "embeddings.ckpt")
        if args.per_class:
            table = balanced_subsample(table, args.per_class, seeds[0])
        curve = knn_mismatch_rate(table, args.k)
        with open(out_dir / "knn_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "mismatch_rate"])
            for k, rate in enumerate(curve, start=1):
                w.writerow([k, f"{rate:.10g}"])
        print(f"knn: mismatch rate top-1 {curve[0]:.4f}, top-{args.k} {curve[-1]:.4f} -> {out_dir / 'knn_curve.csv'}")
    elif args.task == "attention":
        split = "val" if "val" in data else "train"
        images = data[split][0][: args.num_images]
        paths = export_attention(model, images, out_dir)
        print(f"attention: wrote {len(paths)} maps to {out_dir}")
    return 0


def cmd_reproduce_ladder(args) -> int:
    from .evaluate import linear_probe

    cfg = resolve_config(args)
    data = load_dataset(cfg.data["root"], cfg.model.img_size, cfg.data["ignore_classes"])
    (tx, ty) = data["train"]
    parent = output_root(args) / (cfg.run.get("name") or "ladder")
    rows = []
    for i, (label, mode, alpha, beta) in enumerate(LADDER, start=1):
        child = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, loss=LossWeights(mode, alpha, beta)))
        child.run = {**cfg.run, "name": f"row{i}_{mode}"}
        run_dir = parent / f"row{i}_{mode}"
        result = _pretrain_one(child, tx, run_dir)
        final = result.history[-1]
        row = {
            "row": i,
            "label": label,
            "mode": mode,
            "alpha": alpha,
            "beta": beta,
            "final_total": final["total"],
            "final_recon_masked": final["recon_masked"],
            "final_distill": final.get("distill"),
            "probe_accuracy": None,
            "probe_accuracy_std": None,
        }
        if "val" in data and not args.no_probe:
            vx, vy = data["val"]
            seeds = _int_list(args.seeds, "--seeds")
            rep = linear_probe(result.model, tx, ty, vx, vy, epochs=cfg.train.probe_epochs, seeds=seeds, num_classes=len(data["classes"]))
            row["probe_accuracy"], row["probe_accuracy_std"] = rep.accuracy, rep.accuracy_std
        rows.append(row)
        log.info("ladder row %d (%s) done", i, label)

    keys = list(rows[0])
    with open(parent / "ladder.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    (parent / "ladder.json").write_text(json.dumps(rows, indent=1))
    print(format_ladder(rows))
    print(f"summary: {parent / 'ladder.csv'}")
    return 0


def format_ladder(rows: List[Dict[str, Any]]) -> str:
    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    lines = [f"{'#':<2} {'method':<32} {'total':>8} {'distill':>8} {'probe acc':>10}"]
    for r in rows:
        lines.append(f"{r['row']:<2} {r['label']:<32} {fmt(r['final_total']):>8} {fmt(r['final_distill']):>8} {fmt(r['probe_accuracy']):>10}")
    return "\n".join(lines)


def cmd_gen_synth(args) -> int:
    from .datakit import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(
        num_classes=args.classes,
        per_class=args.per_class,
        size=args.size,
        frequency=args.frequency,
        noise=args.noise,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest)} images ({len(manifest.classes)} classes) to {args.out}; checksum {manifest.checksum[:16]}")
    return 0


# -- parser ----------------------------------------------------------------------
def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--data", help="dataset root (or manifest.json)")
    p.add_argument("--model", choices=sorted(MODEL_PRESETS), help="model preset")
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS), help="training hyper-parameter preset")
    p.add_argument("--loss", choices=LOSS_MODES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--run-name")
    p.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdmae", description="Masked-autoencoder pretraining with self-distillation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain an encoder")
    _add_config_args(p)
    p.add_argument("--alpha-grid", help="comma-separated alphas; one child run each")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--task", required=True, choices=("finetune", "probe", "knn", "attention"))
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--table", help="saved embedding table (knn task)")
    p.add_argument("--ignore-classes", default="")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--pool", default="cls", choices=("cls", "mean", "cls+mean"))
    p.add_argument("--metrics", nargs="*", default=None, choices=("accuracy", "f1", "auc"))
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    p.add_argument("--set", action="append", metavar="train.KEY=VALUE")
    p.add_argument("--epochs", type=int, help="probe epochs")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--per-class", type=int, default=0, help="balanced subsample size for knn (0 = all)")
    p.add_argument("--num-images", type=int, default=8)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce-ladder", help="run the five loss-mode ablation rows")
    _add_config_args(p)
    p.add_argument("--seeds", default="0,1,2", help="linear-probe seeds")
    p.add_argument("--no-probe", action="store_true")
    p.set_defaults(func=cmd_reproduce_ladder)

    p = sub.add_parser("gen-synth", help="write the synthetic texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frequency", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SDMAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
