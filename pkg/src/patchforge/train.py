"""Jigsaw pretraining: loss, momentum SGD, step schedules and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .dataio import AugmentConfig, LoadedDataset, sample_training_crop
from .model import JigsawModel, build_backbone, init_weights
from .puzzle import GridSpec, assemble, divide, sample_permutation

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PATCHFORGE-CKPT-1\n"
METRIC_FIELDS = ("step", "lr", "loss", "patch_acc")

# lr 0.1, /5 at 10K, then /10 every 10K
PAPER_PRETRAIN_SCHEDULE = ((10_000, 0.2), (20_000, 0.1), (30_000, 0.1), (40_000, 0.1))
# lr 0.05, /10 at 5K, 15K and 25K
PAPER_SEG_SCHEDULE = ((5_000, 0.1), (15_000, 0.1), (25_000, 0.1))


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self) -> None:
        steps = [s for s, _ in self.schedule]
        if any(f <= 0 for _, f in self.schedule):
            raise ValueError("schedule factors must be positive")
        if any(a >= b for a, b in zip(steps, steps[1:])):
            raise ValueError(f"schedule steps must be strictly increasing: {steps}")


def lr_at(config: OptimizerConfig, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    lr = config.base_lr
    for s, factor in config.schedule:
        if s <= step:
            lr *= factor
    return lr


def parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    """``"10000:0.2, 20000:0.1"`` -> ((10000, 0.2), (20000, 0.1))."""
    out = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        step, factor = item.split(":")
        out.append((int(step), float(factor)))
    return tuple(out)


def jigsaw_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy over patches (and the batch, if present)."""
    n = logits.shape[-1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise ValueError(f"labels must lie in [0, {n}), got {labels.tolist()}")
    logp = F.log_softmax(logits.reshape(-1, n), dim=-1)
    return -logp.gather(1, labels.reshape(-1, 1)).mean()


@torch.no_grad()
def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor | None],
    velocity: Sequence[Tensor],
    lr: float,
    momentum: float,
) -> tuple[Sequence[Tensor], Sequence[Tensor]]:
    """Classical momentum, in place: ``v = m*v + g``; ``p -= lr*v``.

    Entries whose gradient is ``None`` are left untouched.
    """
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity differ in length")
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, velocity {tuple(v.shape)}")
        v.mul_(momentum).add_(g)
        p.sub_(lr * v)
    return params, velocity


# --- checkpoints --------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    params: dict[str, Tensor]
    optimizer_state: dict[str, Tensor]
    rng_state: dict
    arch_fingerprint: str
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    buf = io.BytesIO()
    torch.save(asdict(ckpt), buf)
    payload = buf.getvalue()
    path = Path(path)
    path.write_bytes(CKPT_MAGIC + hashlib.sha256(payload).digest() + payload)
    return path


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(CKPT_MAGIC)
    if not raw.startswith(CKPT_MAGIC) or len(raw) < head + 32:
        raise CheckpointError(f"{path}: not a checkpoint file")
    digest, payload = raw[head : head + 32], raw[head + 32 :]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    d = torch.load(io.BytesIO(payload), weights_only=False)
    ckpt = Checkpoint(**d)
    if expected_fingerprint is not None and ckpt.arch_fingerprint != expected_fingerprint:
        raise CheckpointError(
            f"{path}: architecture fingerprint {ckpt.arch_fingerprint[:12]} "
            f"does not match {expected_fingerprint[:12]}"
        )
    return ckpt


def checkpoint_name(step: int) -> str:
    return f"param-at-{step}.ckpt"


# --- training loop ------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    backbone: str = "tinyfcn"
    norm: bool = True
    grid: int = 3
    crop_size: int = 96
    batch_size: int = 8
    steps: int = 1000
    base_lr: float = 0.1
    momentum: float = 0.9
    schedule: tuple[tuple[int, float], ...] = ()
    seed: int = 0
    checkpoint_steps: tuple[int, ...] = ()
    mirror_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 2.0)
    hidden: int = 512

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.base_lr, self.momentum, self.schedule)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.mirror_prob, self.scale_range, (self.crop_size, self.crop_size))


def build_jigsaw_model(cfg: TrainConfig) -> JigsawModel:
    gen = torch.Generator().manual_seed(cfg.seed)
    model = JigsawModel(build_backbone(cfg.backbone, norm=cfg.norm), GridSpec(cfg.grid), cfg.hidden)
    init_weights(model, gen)
    return model


def make_puzzle_batch(
    images: Sequence[np.ndarray], grid: GridSpec, rng: np.random.Generator
) -> tuple[Tensor, Tensor]:
    puzzles = [assemble(divide(img, grid), sample_permutation(rng, grid), grid) for img in images]
    x = torch.from_numpy(np.stack([p.image for p in puzzles]))
    y = torch.from_numpy(np.stack([p.labels for p in puzzles]))
    return x, y


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state}


def _velocity(model: torch.nn.Module) -> dict[str, Tensor]:
    return {n: torch.zeros_like(p) for n, p in model.named_parameters()}


def _read_metrics(path: Path, upto: int) -> list[dict]:
    if not path.is_file():
        return []
    with path.open(newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["step"]) <= upto]


def _fmt(x: float) -> str:
    return repr(float(x))


def train_jigsaw(
    cfg: TrainConfig,
    dataset: LoadedDataset,
    out_dir: str | Path,
    model: JigsawModel | None = None,
    resume: Checkpoint | None = None,
) -> tuple[JigsawModel, list[dict]]:
    """Run jigsaw pretraining, writing ``metrics.csv`` and ``param-at-N.ckpt`` files.

    Step ``n`` logs the loss of the n-th update's batch (before the update);
    ``param-at-n`` holds the parameters after n updates.  A step-0 checkpoint
    is always written.  With ``resume``, training continues from that
    checkpoint and the metrics file is rewritten up to its step first, so the
    result matches an uninterrupted run.
    """
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    grid = GridSpec(cfg.grid)
    model = model if model is not None else build_jigsaw_model(cfg)
    # fails early when grid, crop and stride disagree
    model.assignment(cfg.crop_size, cfg.crop_size)
    fingerprint = model.backbone.fingerprint()
    opt = cfg.optimizer
    aug = cfg.augment
    rng = np.random.default_rng(cfg.seed)
    velocity = _velocity(model)
    start = 0
    rows: list[dict] = []
    if resume is not None:
        if resume.arch_fingerprint != fingerprint:
            raise CheckpointError("resume checkpoint belongs to a different backbone")
        model.load_state_dict(resume.params)
        for name, v in resume.optimizer_state.items():
            velocity[name].copy_(v)
        rng.bit_generator.state = resume.rng_state["numpy"]
        start = resume.step
        rows = _read_metrics(out / "metrics.csv", start)

    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    vel = [velocity[n] for n in names]

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            step=step,
            params={k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizer_state={k: v.clone() for k, v in velocity.items()},
            rng_state=_rng_state(rng),
            arch_fingerprint=fingerprint,
            meta={"config": asdict(cfg), "kind": "jigsaw"},
        )

    wanted = set(cfg.checkpoint_steps) | {0, cfg.steps}
    if start == 0:
        save_checkpoint(snapshot(0), out / checkpoint_name(0))

    metrics_path = out / "metrics.csv"
    with metrics_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
        model.train()
        for step in range(start + 1, cfg.steps + 1):
            lr = lr_at(opt, step - 1)
            idx = rng.integers(0, len(dataset), size=cfg.batch_size)
            crops = [sample_training_crop(dataset.images[i], aug, rng)[0] for i in idx]
            x, y = make_puzzle_batch(crops, grid, rng)
            logits = model(x)
            loss = jigsaw_loss(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at step {step} (lr={lr})")
            for p in params:
                p.grad = None
            loss.backward()
            sgd_step(params, [p.grad for p in params], vel, lr, opt.momentum)
            acc = (logits.detach().argmax(-1) == y).double().mean().item()
            row = {"step": step, "lr": _fmt(lr), "loss": _fmt(loss.item()), "patch_acc": _fmt(acc)}
            writer.writerow(row)
            rows.append(row)
            if step in wanted:
                save_checkpoint(snapshot(step), out / checkpoint_name(step))
            if step % 100 == 0:
                log.info("step %d lr %.4g loss %.4f acc %.3f", step, lr, loss.item(), acc)
    return model, rows


def load_jigsaw_model(ckpt: Checkpoint) -> JigsawModel:
    cfg_d = dict(ckpt.meta["config"])
    cfg = config_from_dict(cfg_d)
    model = build_jigsaw_model(cfg)
    if model.backbone.fingerprint() != ckpt.arch_fingerprint:
        raise CheckpointError("checkpoint fingerprint does not match its recorded backbone")
    model.load_state_dict(ckpt.params)
    return model


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["schedule"] = tuple(tuple(x) for x in d.get("schedule", ()))
    d["checkpoint_steps"] = tuple(d.get("checkpoint_steps", ()))
    d["scale_range"] = tuple(d.get("scale_range", (0.5, 2.0)))
    return TrainConfig(**d)
