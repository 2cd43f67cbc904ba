"""Block-wise transfer from jigsaw checkpoints to segmentation, plus evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .archspec import NUM_BLOCKS
from .dataio import (
    IGNORE_INDEX,
    AugmentConfig,
    LoadedDataset,
    center_crop,
    sample_training_crop,
)
from .model import Backbone, JigsawModel, SegModel, build_backbone, init_weights
from .puzzle import GridSpec, assemble, divide, sample_permutation
from .train import (
    Checkpoint,
    CheckpointError,
    OptimizerConfig,
    TrainingError,
    lr_at,
    sgd_step,
)

log = logging.getLogger(__name__)

SEG_METRIC_FIELDS = ("step", "lr", "loss", "miou")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class BlockPlan:
    init: str = "random"  # random | checkpoint
    trainable: bool = True

    def __post_init__(self) -> None:
        if self.init not in ("random", "checkpoint"):
            raise PlanError(f"init source must be 'random' or 'checkpoint', got {self.init!r}")


@dataclass(frozen=True)
class TransferPlan:
    """Per-block init source and trainability; the classifier is always fresh."""

    blocks: tuple[BlockPlan, ...] = tuple(BlockPlan() for _ in range(NUM_BLOCKS))
    control: bool = False

    def __post_init__(self) -> None:
        if len(self.blocks) != NUM_BLOCKS:
            raise PlanError(f"plan needs {NUM_BLOCKS} blocks, got {len(self.blocks)}")
        for i, b in enumerate(self.blocks, 1):
            if not b.trainable and b.init == "random" and not self.control:
                raise PlanError(
                    f"block{i} is frozen at random values; set control=true for that experiment"
                )

    @property
    def uses_checkpoint(self) -> bool:
        return any(b.init == "checkpoint" for b in self.blocks)

    @classmethod
    def table2(cls, trainable: str, init: str) -> "TransferPlan":
        """Plans named like the ablation columns, e.g. ``table2("345", "finetune")``.

        Blocks outside ``trainable`` are frozen from the checkpoint; trainable
        blocks start from the checkpoint (``finetune``) or random (``random``).
        ``table2("12345", "random")`` is the all-random baseline.
        """
        if init not in ("random", "finetune"):
            raise PlanError(f"init must be 'random' or 'finetune', got {init!r}")
        src = "checkpoint" if init == "finetune" else "random"
        blocks = tuple(
            BlockPlan(src, True) if str(i) in trainable else BlockPlan("checkpoint", False)
            for i in range(1, NUM_BLOCKS + 1)
        )
        return cls(blocks)

    def to_text(self) -> str:
        lines = [f"control = {str(self.control).lower()}"]
        for i, b in enumerate(self.blocks, 1):
            lines.append(f"block{i}.init = {b.init}")
            lines.append(f"block{i}.trainable = {str(b.trainable).lower()}")
        return "\n".join(lines) + "\n"


def _parse_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise PlanError(f"{key}: expected true/false, got {value!r}")


def parse_plan(text: str) -> TransferPlan:
    """Parse ``block3.init = checkpoint`` / ``block3.trainable = true`` lines."""
    inits = ["random"] * NUM_BLOCKS
    trainable = [True] * NUM_BLOCKS
    control = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "control":
            control = _parse_bool(value, key)
            continue
        name, _, attr = key.partition(".")
        if not name.startswith("block") or not name[5:].isdigit():
            raise PlanError(f"line {lineno}: unknown key {key!r}")
        idx = int(name[5:]) - 1
        if not 0 <= idx < NUM_BLOCKS:
            raise PlanError(f"line {lineno}: unknown block {name!r}")
        if attr == "init":
            inits[idx] = value
        elif attr == "trainable":
            trainable[idx] = _parse_bool(value, key)
        else:
            raise PlanError(f"line {lineno}: unknown key {key!r}")
    return TransferPlan(tuple(BlockPlan(i, t) for i, t in zip(inits, trainable)), control)


def load_plan(path: str | Path) -> TransferPlan:
    return parse_plan(Path(path).read_text())


def build_transfer(
    plan: TransferPlan,
    checkpoint: Checkpoint | None,
    backbone: Backbone | str,
    num_classes: int,
    seed: int = 0,
    norm: bool = True,
) -> tuple[SegModel, dict[str, bool]]:
    """Segmentation model initialized per ``plan`` and its frozen-parameter mask.

    Random parts use a generator seeded with ``seed``, drawn once for the
    whole model, so two plans with the same seed share their random values.
    """
    if isinstance(backbone, str):
        backbone = build_backbone(backbone, norm=norm)
    model = SegModel(backbone, num_classes)
    init_weights(model, torch.Generator().manual_seed(seed))
    if plan.uses_checkpoint:
        if checkpoint is None:
            raise PlanError("plan copies blocks from a checkpoint but none was given")
        if checkpoint.arch_fingerprint != backbone.fingerprint():
            raise CheckpointError("checkpoint fingerprint does not match the backbone")
        state = backbone.state_dict()
        for i, b in enumerate(plan.blocks):
            if b.init != "checkpoint":
                continue
            prefix = f"blocks.{i}."
            for key in state:
                if key.startswith(prefix):
                    src = checkpoint.params.get("backbone." + key)
                    if src is None:
                        raise CheckpointError(f"checkpoint lacks backbone.{key}")
                    state[key] = src.clone()
        backbone.load_state_dict(state)
    frozen: dict[str, bool] = {}
    model.frozen_blocks = {i for i, b in enumerate(plan.blocks) if not b.trainable}
    for name, p in model.named_parameters():
        is_frozen = False
        if name.startswith("backbone.blocks."):
            is_frozen = int(name.split(".")[2]) in model.frozen_blocks
        p.requires_grad_(not is_frozen)
        frozen[name] = is_frozen
    return model, frozen


# --- metrics ------------------------------------------------------------


@dataclass
class MIoUReport:
    per_class_iou: np.ndarray  # nan where the union is empty
    mean_iou: float
    intersection: np.ndarray
    union: np.ndarray

    def __add__(self, other: "MIoUReport") -> "MIoUReport":
        return report_from_counts(self.intersection + other.intersection, self.union + other.union)


def report_from_counts(intersection: np.ndarray, union: np.ndarray) -> MIoUReport:
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, intersection / np.maximum(union, 1), np.nan)
    valid = union > 0
    mean = float(iou[valid].mean()) if valid.any() else float("nan")
    return MIoUReport(iou, mean, intersection, union)


def confusion_counts(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    keep = truth != ignore_index
    p, t = pred[keep].astype(np.int64), truth[keep].astype(np.int64)
    if p.size and (p.max() >= num_classes or t.max() >= num_classes or min(p.min(), t.min()) < 0):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    p_count = np.bincount(p, minlength=num_classes)
    t_count = np.bincount(t, minlength=num_classes)
    inter = np.bincount(p[p == t], minlength=num_classes)
    return inter, p_count + t_count - inter


def miou(pred: np.ndarray, truth: np.ndarray, num_classes: int,
         ignore_index: int = IGNORE_INDEX) -> MIoUReport:
    """Intersection over union per class; classes absent from both maps are skipped."""
    return report_from_counts(*confusion_counts(pred, truth, num_classes, ignore_index))


def argmax_first(scores: Tensor, dim: int) -> Tensor:
    """Argmax with ties going to the smallest index."""
    best = scores.max(dim=dim, keepdim=True).values
    idx = torch.arange(scores.shape[dim]).view([-1 if d == dim % scores.dim() else 1 for d in range(scores.dim())])
    masked = torch.where(scores == best, idx, torch.full_like(idx, scores.shape[dim]))
    return masked.min(dim=dim).values


@torch.no_grad()
def evaluate_seg(model: SegModel, dataset: LoadedDataset, num_classes: int) -> MIoUReport:
    if dataset.masks is None:
        raise TrainingError("evaluation needs masks")
    was_training = model.training
    model.eval()
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for img, mask in zip(dataset.images, dataset.masks):
        scores = model(torch.from_numpy(img)[None])[0]
        pred = argmax_first(scores, 0).numpy()
        i, u = confusion_counts(pred, mask, num_classes)
        inter += i
        union += u
    model.train(was_training)
    return report_from_counts(inter, union)


# --- puzzle evaluation --------------------------------------------------

Predictor = Callable[[Tensor], Tensor]


@torch.no_grad()
def puzzle_accuracy(
    model: JigsawModel | Predictor,
    images: list[np.ndarray],
    grid: GridSpec,
    seed: int,
    crop_size: int | None = None,
    batch_size: int = 32,
) -> float:
    """Fraction of cells whose location is the row-argmax of the logits.

    Exactly one puzzle per image, built from a center crop, with a
    permutation stream seeded by ``seed``.  The center cell is counted.
    """
    if not images:
        raise ValueError("no images to evaluate")
    rng = np.random.default_rng(seed)
    if isinstance(model, torch.nn.Module):
        was_training = model.training
        model.eval()
    correct = total = 0
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        xs, ys = [], []
        for img in chunk:
            if crop_size is not None:
                img = center_crop(img, (crop_size, crop_size))
            sample = assemble(divide(img, grid), sample_permutation(rng, grid), grid)
            xs.append(sample.image)
            ys.append(sample.labels)
        x = torch.from_numpy(np.stack(xs))
        y = torch.from_numpy(np.stack(ys))
        pred = argmax_first(model(x), -1)
        correct += int((pred == y).sum())
        total += y.numel()
    if isinstance(model, torch.nn.Module):
        model.train(was_training)
    return correct / total


# --- fine-tuning --------------------------------------------------------


@dataclass(frozen=True)
class SegConfig:
    num_classes: int = 4
    crop_size: int = 96
    batch_size: int = 8
    steps: int = 300
    base_lr: float = 0.05
    momentum: float = 0.9
    schedule: tuple[tuple[int, float], ...] = ()
    seed: int = 0
    eval_every: int = 0
    mirror_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 2.0)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.base_lr, self.momentum, self.schedule)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.mirror_prob, self.scale_range, (self.crop_size, self.crop_size))


@dataclass
class FinetuneResult:
    model: SegModel
    rows: list[dict] = field(default_factory=list)
    final: MIoUReport | None = None


def finetune_seg(
    model: SegModel,
    frozen: dict[str, bool],
    cfg: SegConfig,
    train_set: LoadedDataset,
    val_set: LoadedDataset | None = None,
    metrics_path: str | Path | None = None,
) -> FinetuneResult:
    """Per-pixel cross-entropy training of the unfrozen parameters.

    Frozen tensors never receive a gradient and frozen blocks stay in eval
    mode, so they come out bit-identical.
    """
    if train_set.masks is None:
        raise TrainingError("segmentation fine-tuning needs masks")
    names = [n for n, _ in model.named_parameters()]
    if set(names) != set(frozen):
        raise TrainingError("frozen mask does not match the model parameters")
    params = [p for n, p in model.named_parameters() if not frozen[n]]
    velocity = [torch.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    aug = cfg.augment
    opt = cfg.optimizer
    result = FinetuneResult(model)

    def record(step: int, lr: float, loss: float) -> None:
        row = {"step": step, "lr": repr(lr), "loss": repr(loss), "miou": ""}
        if val_set is not None and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            row["miou"] = repr(evaluate_seg(model, val_set, cfg.num_classes).mean_iou)
        result.rows.append(row)

    model.train()
    for step in range(1, cfg.steps + 1):
        lr = lr_at(opt, step - 1)
        idx = rng.integers(0, len(train_set), size=cfg.batch_size)
        pairs = [sample_training_crop(train_set.images[i], aug, rng, train_set.masks[i]) for i in idx]
        x = torch.from_numpy(np.stack([p[0] for p in pairs]))
        y = torch.from_numpy(np.stack([p[1] for p in pairs]))
        scores = model(x)
        loss = F.cross_entropy(scores, y, ignore_index=IGNORE_INDEX)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite segmentation loss at step {step}")
        for p in params:
            p.grad = None
        loss.backward()
        sgd_step(params, [p.grad for p in params], velocity, lr, opt.momentum)
        record(step, lr, loss.item())
    if val_set is not None:
        result.final = evaluate_seg(model, val_set, cfg.num_classes)
    if metrics_path is not None:
        write_rows(metrics_path, SEG_METRIC_FIELDS, result.rows)
    return result


def write_rows(path: str | Path, fields: tuple[str, ...], rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
