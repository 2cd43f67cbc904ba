"""``patchforge`` command line: rf, synth, pretrain, transfer, eval, report."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import archspec
from .dataio import DatasetManifest, SyntheticSpec, generate_synthetic_corpus, load_dataset, load_manifest
from .puzzle import GridSpec

log = logging.getLogger("patchforge")


class ConfigError(ValueError):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_config(path: str | Path, values: dict[str, Any]) -> None:
    lines = []
    for k, v in values.items():
        if isinstance(v, tuple) and v and isinstance(v[0], tuple):
            v = ",".join(f"{a}:{b}" for a, b in v)
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _convert(name: str, value: str, default: Any) -> Any:
    from .train import parse_schedule

    try:
        if name == "schedule":
            return parse_schedule(value)
        if isinstance(default, bool):
            v = value.lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            kind = float if name == "scale_range" else int
            return tuple(kind(x) for x in value.replace(" ", "").split(",") if x)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def build_dataclass(cls, raw: dict[str, str], extra: Sequence[str] = ()) -> tuple[Any, dict[str, str]]:
    """Fill ``cls`` from string values; keys in ``extra`` are returned untouched."""
    known = {f.name: f for f in fields(cls)}
    defaults = asdict(cls())
    kwargs, rest = {}, {}
    for key, value in raw.items():
        if key in known:
            kwargs[key] = _convert(key, value, defaults[key])
        elif key in extra:
            rest[key] = value
        else:
            raise ConfigError(f"unknown config key: {key}")
    try:
        return cls(**kwargs), rest
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _data_manifest(data: str, split: str) -> Path:
    p = Path(data)
    if p.is_dir():
        return p / f"{split}.tsv"
    return p


# --- subcommands --------------------------------------------------------


def cmd_rf(args: argparse.Namespace) -> int:
    arch = archspec.load_arch(args.arch)
    prof = archspec.compute_rf_profile(arch)
    print("r S0 P0")
    print(f"{prof.rf} {prof.effective_stride} {prof.effective_padding}")
    if args.oracle:
        size = 2 * prof.rf + 4 * prof.effective_stride + 1
        bf = archspec.brute_force_rf(arch, size)
        c, _ = archspec.rf_center(prof, bf.probed, 0)
        ok = bf.rf == prof.rf and bf.centers[bf.probed] == c
        print(f"oracle rf={bf.rf} center[{bf.probed}]={bf.centers[bf.probed]} {'OK' if ok else 'MISMATCH'}")
        if not ok:
            return 1
    if args.input is not None:
        h, w = args.input
        grid = GridSpec(args.grid)
        assign = archspec.cell_assignment(prof, (h, w), grid)
        counts = np.bincount(assign.ravel(), minlength=grid.num_cells).reshape(grid.side, grid.side)
        print(f"feature map {assign.shape[0]}x{assign.shape[1]}; feature pixels per cell:")
        for row in counts:
            print(" ".join(str(int(c)) for c in row))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(args.images, args.size, args.classes, args.seed, args.val_fraction)
    paths = generate_synthetic_corpus(spec, args.out)
    write_config(Path(args.out) / "resolved-config", asdict(spec))
    print(f"wrote {spec.num_images} images to {args.out} ({paths['train'].name}, {paths['val'].name})")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    from .train import TrainConfig, load_checkpoint, train_jigsaw

    raw = read_config(args.config)
    cfg, rest = build_dataclass(TrainConfig, raw, extra=("data", "out", "resume"))
    data = args.data or rest.get("data")
    out = Path(args.out or rest.get("out") or "runs/pretrain")
    if not data:
        raise ConfigError("no dataset: set 'data' in the config or pass --data")
    out.mkdir(parents=True, exist_ok=True)
    resolved = asdict(cfg) | {"data": data, "out": str(out)}
    write_config(out / "resolved-config", resolved)
    ds = load_dataset(load_manifest(_data_manifest(data, "train")))
    resume = args.resume or rest.get("resume")
    ckpt = load_checkpoint(resume) if resume else None
    _, rows = train_jigsaw(cfg, ds, out, resume=ckpt)
    last = rows[-1] if rows else {"step": 0, "loss": "-", "patch_acc": "-"}
    print(f"step {last['step']} loss {last['loss']} patch_acc {last['patch_acc']} -> {out}")
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    from .train import Checkpoint, load_checkpoint, save_checkpoint
    from .transfer import SegConfig, build_transfer, finetune_seg, load_plan, write_rows

    raw = read_config(args.config) if args.config else {}
    cfg, rest = build_dataclass(SegConfig, raw, extra=("backbone", "norm", "labeled"))
    plan = load_plan(args.plan)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    backbone = rest.get("backbone") or (ckpt.meta["config"]["backbone"] if ckpt else "tinyfcn")
    norm = rest.get("norm", "true").lower() in ("true", "1", "yes")
    if ckpt is not None:
        norm = bool(ckpt.meta["config"].get("norm", norm))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "resolved-config", asdict(cfg) | {
        "backbone": backbone, "norm": norm, "plan": args.plan, "ckpt": args.ckpt or "",
        "data": args.data, "labeled": rest.get("labeled", "all"),
    })
    (out / "plan.txt").write_text(plan.to_text())
    train_m = load_manifest(_data_manifest(args.data, "train"))
    if "labeled" in rest:
        train_m = DatasetManifest(train_m.entries[: int(rest["labeled"])], train_m.split, train_m.root)
    train_set = load_dataset(train_m, need_masks=True)
    val_set = load_dataset(load_manifest(_data_manifest(args.data, "val")), need_masks=True)
    model, frozen = build_transfer(plan, ckpt, backbone, cfg.num_classes, seed=cfg.seed, norm=norm)
    res = finetune_seg(model, frozen, cfg, train_set, val_set, out / "metrics.csv")
    save_checkpoint(
        Checkpoint(cfg.steps, {k: v.clone() for k, v in model.state_dict().items()}, {}, {},
                   model.backbone.fingerprint(),
                   {"kind": "seg", "backbone": backbone, "norm": norm, "num_classes": cfg.num_classes}),
        out / "seg-final.ckpt",
    )
    write_rows(out / "miou.csv", ("class", "iou", "intersection", "union"), [
        {"class": c, "iou": repr(float(i)), "intersection": int(a), "union": int(u)}
        for c, (i, a, u) in enumerate(zip(res.final.per_class_iou, res.final.intersection, res.final.union))
    ])
    print(f"mIoU {res.final.mean_iou:.4f} -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .model import SegModel, build_backbone
    from .train import load_checkpoint, load_jigsaw_model
    from .transfer import evaluate_seg, puzzle_accuracy, write_rows

    ckpt = load_checkpoint(args.ckpt)
    manifest = load_manifest(_data_manifest(args.data, args.split))
    out_rows: list[dict]
    if args.task == "puzzle":
        model = load_jigsaw_model(ckpt)
        ds = load_dataset(manifest)
        crop = args.crop or ckpt.meta["config"]["crop_size"]
        acc = puzzle_accuracy(model, ds.images, model.grid, args.seed, crop)
        out_rows = [{"task": "puzzle", "step": ckpt.step, "images": len(ds), "grid": model.grid.side,
                     "seed": args.seed, "accuracy": repr(acc)}]
        fieldnames = ("task", "step", "images", "grid", "seed", "accuracy")
    else:
        if ckpt.meta.get("kind") != "seg":
            raise ConfigError("--task seg needs a segmentation checkpoint (seg-final.ckpt)")
        model = SegModel(build_backbone(ckpt.meta["backbone"], norm=ckpt.meta["norm"]), ckpt.meta["num_classes"])
        model.load_state_dict(ckpt.params)
        ds = load_dataset(manifest, need_masks=True)
        rep = evaluate_seg(model, ds, ckpt.meta["num_classes"])
        out_rows = [{"task": "seg", "step": ckpt.step, "images": len(ds), "class": c, "iou": repr(float(i))}
                    for c, i in enumerate(rep.per_class_iou)]
        out_rows.append({"task": "seg", "step": ckpt.step, "images": len(ds), "class": "mean",
                         "iou": repr(rep.mean_iou)})
        fieldnames = ("task", "step", "images", "class", "iou")
    if args.out:
        write_rows(args.out, fieldnames, out_rows)
    w = csv.DictWriter(sys.stdout, fieldnames=fieldnames)
    w.writeheader()
    w.writerows(out_rows)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    paths: list[Path] = []
    for p in map(Path, args.inputs):
        paths.extend(sorted(p.rglob("*.csv")) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("no CSV files to report")
    tables = {}
    for p in paths:
        with p.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        tables[p] = rows
        print(f"== {p} ({len(rows)} rows)")
        if not rows:
            continue
        cols = list(rows[0])
        print(" | ".join(cols))
        shown = rows if len(rows) <= 2 * args.tail else rows[: args.tail] + rows[-args.tail :]
        for r in shown:
            print(" | ".join(_short(r[c]) for c in cols))
    if args.plot:
        _plot(tables, Path(args.plot))
        print(f"plot -> {args.plot}")
    return 0


def _short(v: str) -> str:
    try:
        f = float(v)
    except (TypeError, ValueError):
        return str(v)
    return f"{f:.4g}"


def _plot(tables: dict[Path, list[dict]], out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = [(p, rows) for p, rows in tables.items() if rows and "step" in rows[0]]
    fig, axes = plt.subplots(1, max(1, len(series)), figsize=(5 * max(1, len(series)), 3.5), squeeze=False)
    for ax, (p, rows) in zip(axes[0], series):
        steps = [int(r["step"]) for r in rows]
        for col in rows[0]:
            if col in ("step", "lr"):
                continue
            vals = [float(r[col]) if r[col] not in ("", None) else np.nan for r in rows]
            ax.plot(steps, vals, label=col)
        ax.set_title(p.parent.name + "/" + p.name, fontsize=8)
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchforge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rf", help="receptive-field table for an architecture")
    p.add_argument("--arch", required=True, help="architecture file or preset name")
    p.add_argument("--input", nargs=2, type=int, metavar=("H", "W"))
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--oracle", action="store_true", help="cross-check with the dependency oracle")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("synth", help="generate a synthetic segmentation corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="jigsaw pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", help="segmentation fine-tuning from a checkpoint")
    p.add_argument("--plan", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", default="runs/transfer")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="puzzle accuracy or segmentation mIoU")
    p.add_argument("--task", choices=("puzzle", "seg"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize metric CSVs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--plot")
    p.add_argument("--tail", type=int, default=3)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"patchforge {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
