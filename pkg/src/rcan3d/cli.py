"""Command-line entry point: dataset synthesis, training, evaluation,
inference, gradient checking, ablation sweeps, and slice export.

Every command is reproducible under a fixed seed. Artifacts land under
the chosen output directory with fixed names (config.json, history.csv,
metrics.csv, checkpoint.rcan); log lines with timestamps go only to
run.log.
"""

from __future__ import annotations

import os

# Thread cap must land in the environment before numpy spins up its pools.
_threads = os.environ.get("RCAN_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import metrics as M
from .errors import ConfigInvalid, EngineError
from .gradcheck import TOLERANCE, run_suite, suite_passes
from .network import ModelConfig, ablation_variants, build_model, describe, forward
from .niftiio import write_nifti
from .tensor import Tensor
from .train import TrainConfig, restore_model, run_training, save_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "augment": ds.AugmentParams}
_TUPLE_FIELDS = {"lr_milestones", "scale_range", "patch"}


def default_config() -> dict:
    return {name: dataclasses.asdict(cls()) for name, cls in _SECTIONS.items()}


def _set_path(cfg: dict, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    if len(parts) != 2 or parts[0] not in cfg or parts[1] not in cfg[parts[0]]:
        raise UsageError(f"unknown config path {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    cfg[parts[0]][parts[1]] = value


def resolve_config(config_file=None, overrides=()) -> dict:
    cfg = default_config()
    if config_file:
        loaded = json.loads(Path(config_file).read_text())
        for section, values in loaded.items():
            if section not in cfg:
                raise UsageError(f"unknown config section {section!r}")
            for key, value in values.items():
                if key not in cfg[section]:
                    raise UsageError(f"unknown config path {section}.{key!r}")
                cfg[section][key] = value
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"--set expects path=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _set_path(cfg, dotted, raw)
    return cfg


def _build_section(cfg: dict, name: str):
    values = dict(cfg[name])
    for key in _TUPLE_FIELDS & values.keys():
        if isinstance(values[key], list):
            values[key] = tuple(values[key])
    try:
        return _SECTIONS[name](**values)
    except TypeError as exc:
        raise UsageError(f"bad {name} config: {exc}") from exc


def model_config(cfg: dict) -> ModelConfig:
    mc = _build_section(cfg, "model")
    mc.validate()
    return mc


def train_config(cfg: dict) -> TrainConfig:
    tc = _build_section(cfg, "train")
    tc.validate()
    return tc


def augment_params(cfg: dict) -> ds.AugmentParams:
    return _build_section(cfg, "augment")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_dataset(manifest_path):
    entries = ds.read_manifest(manifest_path)
    if not entries:
        raise ConfigInvalid(f"manifest {manifest_path} lists no cases")
    return [(ds.normalize(v), l) for v, l in (ds.load_case(e) for e in entries)]


def _predict_labels(model, vol: ds.Volume) -> ds.LabelMap:
    x = Tensor(vol.modalities[None].astype(model.dtype))
    logits = forward(model, x)
    classes = logits.data[0].argmax(axis=0)
    return ds.LabelMap(labels=ds.classes_to_labels(classes), spacing=vol.spacing)


def _evaluate(model, dataset) -> list[M.CaseReport]:
    reports = []
    for vol, lab in dataset:
        pred = _predict_labels(model, vol)
        reports.append(M.evaluate_case(pred, lab, vol.spacing, case_id=vol.case_id))
    return reports


def _logger(out_dir):
    log_path = Path(out_dir) / "run.log"
    fh = open(log_path, "a")

    def log(message):
        stamp = time.strftime("%Y-%m-%d %H:%M:%S")
        fh.write(f"{stamp} {message}\n")
        fh.flush()

    return log


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM (P5), the simplest portable grayscale raster."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ConfigInvalid(f"PGM wants a 2-D slice, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _to_gray(slice2d: np.ndarray) -> np.ndarray:
    lo, hi = float(slice2d.min()), float(slice2d.max())
    if hi <= lo:
        return np.zeros(slice2d.shape, dtype=np.uint8)
    return np.round((slice2d - lo) / (hi - lo) * 255.0).astype(np.uint8)


_LABEL_GRAY = {0: 0, 1: 85, 2: 170, 4: 255}


def _labels_gray(slice2d: np.ndarray) -> np.ndarray:
    out = np.zeros(slice2d.shape, dtype=np.uint8)
    for value, gray in _LABEL_GRAY.items():
        out[slice2d == value] = gray
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    ds.synth_dataset(out, cases=args.cases, extent=args.extent, seed=args.seed)
    print(out / "manifest.json")
    return 0


def _prepare_run(args):
    cfg = resolve_config(args.config, args.set)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if getattr(args, "print_config", False):
        print(json.dumps(cfg, indent=2))
        return None
    return cfg


def cmd_train(args) -> int:
    cfg = _prepare_run(args)
    if cfg is None:
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    aug = augment_params(cfg)
    dataset = _load_dataset(args.manifest)
    model = build_model(mcfg, seed=tcfg.seed)
    log = _logger(out)
    log(f"training on {len(dataset)} cases")
    history = run_training(model, dataset, tcfg, out_dir=out, augment_params=aug, log=log)
    print(f"trained {len(history)} steps; final loss {history[-1].loss:.5f}")
    print(out / "checkpoint.rcan")
    return 0


def cmd_eval(args) -> int:
    cfg = _prepare_run(args)
    if cfg is None:
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(model_config(cfg), seed=train_config(cfg).seed)
    restore_model(model, args.checkpoint)
    dataset = _load_dataset(args.manifest)
    reports = _evaluate(model, dataset)
    M.write_report(reports, out / "metrics.csv")
    M.write_dice_summary(reports, out / "dice_summary.csv")
    agg = M.aggregate(reports)
    for region in M.REGIONS:
        print(f"{region}: dice {M._fmt(agg[region].dice)} hd95 {M._fmt(agg[region].hausdorff95)}")
    print(out / "metrics.csv")
    return 0


def cmd_infer(args) -> int:
    cfg = _prepare_run(args)
    if cfg is None:
        return 0
    model = build_model(model_config(cfg), seed=train_config(cfg).seed)
    restore_model(model, args.checkpoint)
    entry = {"case_id": "volume", "t1": args.t1, "t1ce": args.t1ce, "t2": args.t2, "flair": args.flair}
    from .niftiio import read_nifti

    grids, spacing = [], (1.0, 1.0, 1.0)
    for name in ds.MODALITIES:
        grid, spacing = read_nifti(entry[name])
        grids.append(np.asarray(grid, dtype=np.float32))
    vol = ds.normalize(ds.Volume(np.stack(grids), spacing, case_id="volume"))
    pred = _predict_labels(model, vol)
    write_nifti(pred.labels.astype(np.uint8), pred.spacing, args.out)
    print(args.out)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed or 0)
    for name, err in results:
        print(f"{name:32s} {err:.3e}")
    if suite_passes(results):
        print(f"all checks below {TOLERANCE:g}")
        return 0
    print(f"FAILED: some checks at or above {TOLERANCE:g}", file=sys.stderr)
    return 2


def cmd_ablate(args) -> int:
    cfg = _prepare_run(args)
    if cfg is None:
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.manifest)
    tcfg = train_config(cfg)
    aug = augment_params(cfg)
    summary_rows = []
    for name, variant in ablation_variants(model_config(cfg)).items():
        run_dir = out / name
        run_dir.mkdir(parents=True, exist_ok=True)
        model = build_model(variant, seed=tcfg.seed)
        log = _logger(run_dir)
        log(f"ablation {name}")
        run_training(model, dataset, tcfg, out_dir=run_dir, augment_params=aug, log=log)
        reports = _evaluate(model, dataset)
        M.write_report(reports, run_dir / "metrics.csv")
        M.write_dice_summary(reports, run_dir / "dice_summary.csv")
        agg = M.aggregate(reports)
        mean_dice = M._mean_defined(agg[r].dice for r in M.REGIONS)[0]
        summary_rows.append((name, mean_dice, [agg[r].dice for r in M.REGIONS]))
        print(f"{name}: mean dice {M._fmt(mean_dice)}")
    with open(out / "ablation_summary.csv", "w") as fh:
        fh.write("config,mean_dice,et_dice,wt_dice,tc_dice\n")
        for name, mean_dice, region_dice in summary_rows:
            cells = [M._fmt(mean_dice)] + [M._fmt(d) for d in region_dice]
            fh.write(",".join([name] + cells) + "\n")
    print(out / "ablation_summary.csv")
    return 0


def cmd_export_slices(args) -> int:
    cfg = _prepare_run(args)
    if cfg is None:
        return 0
    entries = {e["case_id"]: e for e in ds.read_manifest(args.manifest)}
    if args.case_id not in entries:
        raise ConfigInvalid(f"case {args.case_id!r} not in manifest")
    vol, lab = ds.load_case(entries[args.case_id])
    case_dir = Path(args.out) / args.case_id
    case_dir.mkdir(parents=True, exist_ok=True)

    pred = None
    if args.checkpoint:
        model = build_model(model_config(cfg), seed=train_config(cfg).seed)
        restore_model(model, args.checkpoint)
        pred = _predict_labels(model, ds.normalize(vol))

    depth = vol.modalities.shape[1]
    indices = range(depth) if args.all_slices else [depth // 2]
    for z in indices:
        for i, name in enumerate(ds.MODALITIES):
            write_pgm(case_dir / f"z{z:03d}_{name}.pgm", _to_gray(vol.modalities[i, z]))
        write_pgm(case_dir / f"z{z:03d}_gt.pgm", _labels_gray(lab.labels[z]))
        if pred is not None:
            write_pgm(case_dir / f"z{z:03d}_pred.pgm", _labels_gray(pred.labels[z]))
    print(case_dir)
    return 0


def cmd_describe(args) -> int:
    cfg = _prepare_run(args)
    if cfg is None:
        return 0
    model = build_model(model_config(cfg), seed=train_config(cfg).seed)
    print(describe(model))
    return 0


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override a config field, e.g. model.base_width=8")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--print-config", action="store_true",
                   help="print the fully resolved config and exit")


def build_parser() -> _Parser:
    parser = _Parser(prog="rcan3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=5)
    p.add_argument("--extent", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="predict labels for one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--t1ce", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--flair", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/eval the four attention ablations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("export-slices", help="write axial PGM slices")
    p.add_argument("--manifest", required=True)
    p.add_argument("--case-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="also export predictions")
    p.add_argument("--all-slices", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_export_slices)

    p = sub.add_parser("describe", help="print the parameter listing")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_describe)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
