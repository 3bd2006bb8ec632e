"""``semreduce`` command line: generate, train, eval, gradcam, sensitivity, remap, compare."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, models
from .autodiff import CheckpointError
from .models import (
    STEER_PRESETS,
    ControlHead,
    HyperParams,
    PerceptionCoder,
    Pipeline,
    SteerNet,
    TrainingDiverged,
)
from .scenegen import SceneConfig, generate_dataset, load_dataset, remap_dataset, save_dataset
from .semantics import write_ppm

log = logging.getLogger("semreduce")

PRESETS = tuple(STEER_PRESETS) + ("perception-13", "perception-7", "control")

# per-family training defaults; anything in the config's "hyper" block wins
HYPER_DEFAULTS = {
    "steernet": dict(lr=0.01, batch_size=16, epochs=30, momentum=0.0, init="he"),
    "perception": dict(lr=0.05, batch_size=16, epochs=8, momentum=0.0, init="he"),
    "control": dict(lr=0.01, batch_size=16, epochs=60, momentum=0.0, init="he"),
}

CHECKPOINT = "model.ckpt"
PERCEPTION_COPY = "perception.ckpt"
COMPARE_ROWS = ("all-labels", "remapped")


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a subcommand needs; written next to its outputs."""

    seed: int = 0
    dataset: str | None = None
    preset: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    perception: str | None = None
    n: int = 2000
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    scene: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    mode: str = "zero"
    target: str | None = None
    alpha: float = 0.5
    ids: list = field(default_factory=list)
    signed: bool = False
    layer: int = 7
    split: str = "test"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _family(preset: str) -> str:
    return preset.split("-")[0]


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    merged = RunConfig().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {path} not found")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"config file {path}: {e}") from None
        unknown = set(from_file) - set(merged)
        if unknown:
            raise CliError(f"config file {path}: unknown keys {sorted(unknown)}")
        merged.update(from_file)
    hyper = dict(merged["hyper"])
    for key in ("lr", "batch_size", "epochs", "momentum", "init"):
        val = getattr(args, key, None)
        if val is not None:
            hyper[key] = val
    merged["hyper"] = hyper
    for key in RunConfig().to_dict():
        val = getattr(args, key, None)
        if key != "hyper" and val is not None and val is not False:
            merged[key] = val
    cfg = RunConfig(**merged)
    if cfg.preset is not None:
        if cfg.preset not in PRESETS:
            raise CliError(f"unknown preset {cfg.preset!r}; choose from {', '.join(PRESETS)}")
        full = dict(HYPER_DEFAULTS[_family(cfg.preset)])
        full.update(cfg.hyper)
        cfg.hyper = full
    return cfg


def write_config(cfg: RunConfig, out: Path) -> None:
    """Store the resolved config; the output location is implied by where it sits."""
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.to_dict()
    d.pop("out")
    (out / "config.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _need(value, what: str):
    if value is None:
        raise CliError(f"missing {what}")
    return value


def _hyper(cfg: RunConfig) -> HyperParams:
    try:
        return HyperParams(seed=cfg.seed, **cfg.hyper)
    except TypeError as e:
        raise CliError(f"bad hyperparameters: {e}") from None


def fmt_mse(errors: dict) -> str:
    return "  ".join(f"{s}={errors[s] * 1e3:.3f}" for s in ("train", "val", "test") if s in errors) + "  (MSE x1e-3)"


def load_run(path):
    """A model from a checkpoint file or a train output directory."""
    p = Path(path)
    ckpt = p / CHECKPOINT if p.is_dir() else p
    if not ckpt.exists():
        raise CliError(f"checkpoint {ckpt} not found")
    model = models.load_model(ckpt)
    if isinstance(model, ControlHead):
        perc = ckpt.parent / PERCEPTION_COPY
        if not perc.exists():
            raise CliError(f"control checkpoint {ckpt} has no {PERCEPTION_COPY} beside it")
        model = Pipeline(models.load_model(perc), model)
    return model


def _run_dataset(cfg: RunConfig, run_path) -> str:
    """Dataset from the flags, else the one recorded with the run."""
    if cfg.dataset:
        return cfg.dataset
    p = Path(run_path)
    conf = (p if p.is_dir() else p.parent) / "config.json"
    if conf.exists():
        ds = json.loads(conf.read_text()).get("dataset")
        if ds:
            return ds
    raise CliError("missing dataset (--dataset)")


def _load_ds(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise CliError(str(e)) from None


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: RunConfig) -> int:
    out = Path(_need(cfg.out, "output directory (--out)"))
    scene = SceneConfig.from_dict(cfg.scene)
    ds = generate_dataset(cfg.n, out, scene, cfg.seed, tuple(cfg.ratios))
    write_config(cfg, out)
    train, val, test = ds.counts
    print(f"manifest: {out / 'manifest.csv'}")
    print(f"splits: train={train} val={val} test={test}")
    return 0


def _write_trace(result: models.TrainResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for e in result.trace:
            acc = "" if e.val_accuracy is None else repr(e.val_accuracy)
            wr.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), acc])


def cmd_train(cfg: RunConfig) -> int:
    preset = _need(cfg.preset, "preset (--preset)")
    out = Path(_need(cfg.out, "output directory (--out)"))
    if preset == "control" and not cfg.perception:
        raise CliError("preset control needs a trained perception checkpoint (--perception)")
    ds = _load_ds(_need(cfg.dataset, "dataset (--dataset)"))
    hp = _hyper(cfg)
    if preset in STEER_PRESETS:
        conf = dataclasses.replace(STEER_PRESETS[preset], height=ds.labels.shape[1], width=ds.labels.shape[2])
        result = models.train_steernet(conf, ds, hp)
        model = result.model
    elif _family(preset) == "perception":
        result = models.train_perception(int(preset.split("-")[1]), ds, hp)
        model = result.model
    else:
        perception = load_run(cfg.perception)
        if not isinstance(perception, PerceptionCoder):
            raise CliError(f"{cfg.perception} is not a perception checkpoint")
        result = models.train_control(perception, ds, hp)
        model = result.model.control
    write_config(cfg, out)
    models.save_model(model, out / CHECKPOINT)
    if preset == "control":
        shutil.copyfile(Path(cfg.perception) / CHECKPOINT if Path(cfg.perception).is_dir() else cfg.perception,
                        out / PERCEPTION_COPY)
    _write_trace(result, out / "loss.csv")
    if _family(preset) == "perception":
        kind = "seg13" if preset.endswith("13") else "seg7"
        acc = {s: models.pixel_accuracy(model, ds, ds.split(s), kind) for s in ("train", "val", "test")
               if len(ds.split(s))}
        summary = {"pixel_accuracy": acc}
        print("pixel accuracy: " + "  ".join(f"{s}={v:.4f}" for s, v in acc.items()))
    else:
        errors = models.split_errors(result.model, ds)
        summary = {"mse": errors}
        print(fmt_mse(errors))
    summary["best_epoch"] = result.best_epoch
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"checkpoint: {out / CHECKPOINT}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    run = _need(cfg.checkpoint, "checkpoint (--checkpoint)")
    model = load_run(run)
    ds = _load_ds(_run_dataset(cfg, run))
    if isinstance(model, PerceptionCoder):
        kind = "seg13" if model.num_classes == 13 else "seg7"
        for s in ("train", "val", "test"):
            if len(ds.split(s)):
                print(f"{s} pixel accuracy {models.pixel_accuracy(model, ds, ds.split(s), kind):.4f}")
        return 0
    print(fmt_mse(models.split_errors(model, ds)))
    return 0


def _steernet(cfg: RunConfig) -> SteerNet:
    net = load_run(_need(cfg.checkpoint, "checkpoint (--checkpoint)"))
    if not isinstance(net, SteerNet):
        raise CliError(f"{cfg.checkpoint} is a {net.model_id if hasattr(net, 'model_id') else 'pipeline'} "
                       "checkpoint; this command needs a steernet")
    return net


def cmd_gradcam(cfg: RunConfig) -> int:
    net = _steernet(cfg)
    out = Path(_need(cfg.out, "output directory (--out)"))
    ds = _load_ds(_run_dataset(cfg, cfg.checkpoint))
    ids = [int(i) for i in cfg.ids]
    if not ids:
        raise CliError("no sample ids given (--ids)")
    bad = [i for i in ids if not 0 <= i < len(ds)]
    if bad:
        raise CliError(f"sample ids out of range 0..{len(ds) - 1}: {bad}")
    write_config(cfg, out)
    signs = [(1.0, "")] + ([(-1.0, "_neg")] if cfg.signed else [])
    for i in ids:
        x = models.encode_inputs(ds, [i], net.input_kind)[0]
        for sign, tag in signs:
            heat = analysis.grad_cam(net, x, cfg.layer, sign)
            write_ppm(out / f"overlay_{i:06d}{tag}.ppm", analysis.overlay(heat, ds.rgb[i], cfg.alpha))
            np.savetxt(out / f"heatmap_{i:06d}{tag}.csv", heat, fmt="%.17g", delimiter=",")
    print(f"wrote {len(ids) * len(signs) * 2} files to {out}")
    return 0


def cmd_sensitivity(cfg: RunConfig) -> int:
    net = _steernet(cfg)
    if net.input_kind == "rgb":
        raise CliError("sensitivity needs a segmentation-input checkpoint; channel ablation is per label")
    out = Path(_need(cfg.out, "output directory (--out)"))
    ds = _load_ds(_run_dataset(cfg, cfg.checkpoint))
    report = analysis.sensitivity_scan(net, ds, cfg.split, cfg.mode, cfg.target)
    write_config(cfg, out)
    analysis.export_report(report, out)
    print(report.table())
    return 0


def cmd_remap(cfg: RunConfig) -> int:
    src = _need(cfg.dataset, "input dataset (--dataset)")
    out = Path(_need(cfg.out, "output directory (--out)"))
    if out.resolve() == Path(src).resolve():
        raise CliError("remap output must differ from its input")
    ds = remap_dataset(_load_ds(src))
    save_dataset(ds, out)
    write_config(cfg, out)
    print(f"remapped {len(ds)} scenes into {ds.label_set.name} at {out}")
    return 0


def compare_table(runs) -> list[tuple[str, dict]]:
    rows = []
    for name, run in zip(COMPARE_ROWS, runs):
        model = load_run(run)
        if not isinstance(model, Pipeline):
            raise CliError(f"{run} is not a control run directory")
        ds = _load_ds(_run_dataset(RunConfig(), run))
        rows.append((name, models.split_errors(model, ds)))
    return rows


def write_table(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["model", "train", "val", "test"])
        for name, e in rows:
            wr.writerow([name] + [repr(e[s] * 1e3) for s in ("train", "val", "test")])


def read_table(path) -> list[tuple[str, dict]]:
    """Inverse of :func:`write_table`; values stay in MSE x1e-3 units."""
    with open(path, newline="") as fh:
        return [(r["model"], {s: float(r[s]) for s in ("train", "val", "test")}) for r in csv.DictReader(fh)]


def cmd_compare(cfg: RunConfig, runs) -> int:
    out = Path(_need(cfg.out, "output directory (--out)"))
    rows = compare_table(runs)
    write_config(cfg, out)
    write_table(rows, out / "compare.csv")
    print(f"{'':<12}{'train':>10}{'val':>10}{'test':>10}   (MSE x1e-3)")
    for name, e in rows:
        print(f"{name:<12}" + "".join(f"{e[s] * 1e3:>10.3f}" for s in ("train", "val", "test")))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--dataset")
    common.add_argument("--checkpoint", help="checkpoint file or train output directory")
    common.add_argument("-q", "--quiet", action="store_true", help="no per-epoch log lines")

    p = argparse.ArgumentParser(prog="semreduce", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic scene dataset")
    g.add_argument("--n", type=int)
    g.add_argument("--ratios", type=float, nargs=3)

    t = sub.add_parser("train", parents=[common], help="train a model preset")
    t.add_argument("--preset", choices=PRESETS)
    t.add_argument("--perception", help="perception checkpoint (preset control)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--momentum", type=float)
    t.add_argument("--init", choices=sorted(models.INIT_GAIN))

    sub.add_parser("eval", parents=[common], help="print split MSEs of a checkpoint")

    c = sub.add_parser("gradcam", parents=[common], help="Grad-CAM overlays for sample ids")
    c.add_argument("--ids", type=int, nargs="+")
    c.add_argument("--alpha", type=float)
    c.add_argument("--layer", type=int)
    c.add_argument("--signed", action="store_true", help="also emit the map for the negated output")

    s = sub.add_parser("sensitivity", parents=[common], help="label-channel ablation report")
    s.add_argument("--mode", choices=("zero", "camouflage"))
    s.add_argument("--target", help="label receiving camouflaged pixels")
    s.add_argument("--split", choices=("train", "val", "test", "all"))

    sub.add_parser("remap", parents=[common], help="collapse a dataset to the compact label set")

    m = sub.add_parser("compare", parents=[common], help="train/val/test table of two control runs")
    m.add_argument("runs", nargs=2, metavar="RUN", help="all-labels run dir, then remapped run dir")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "sensitivity": cmd_sensitivity,
    "remap": cmd_remap,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "compare":
            return cmd_compare(cfg, args.runs)
        return COMMANDS[args.command](cfg)
    except (CliError, ValueError, OSError, KeyError, CheckpointError, TrainingDiverged) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"semreduce {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
