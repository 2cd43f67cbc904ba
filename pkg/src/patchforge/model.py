"""FCN backbones, per-cell pooling, the reference-concat jigsaw head and an FCN32 head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .archspec import (
    ArchSpec,
    RFProfile,
    cell_assignment,
    compute_rf_profile,
    load_arch,
    output_size,
    preset,
)
from .puzzle import GridSpec

HIDDEN_DIM = 512


class ShapeError(ValueError):
    pass


@dataclass
class FeatureMap:
    values: Tensor  # (B, C, Hf, Wf) or (C, Hf, Wf)
    profile: RFProfile


def _conv_unit(layer, in_ch: int, norm: bool, bias: bool) -> nn.Sequential:
    conv = nn.Conv2d(in_ch, layer.out_channels, layer.kernel, layer.stride, layer.padding,
                     bias=bias and not norm)
    mods: list[nn.Module] = [conv]
    if norm:
        mods.append(nn.BatchNorm2d(layer.out_channels))
    mods.append(nn.ReLU())
    return nn.Sequential(*mods)


class Backbone(nn.Module):
    """Plain conv/pool chain built from an :class:`ArchSpec`, grouped into five blocks.

    ``norm`` adds batch normalization after every conv; ``bias`` can be turned
    off for linearity checks.
    """

    def __init__(self, arch: ArchSpec, norm: bool = True, bias: bool = True) -> None:
        super().__init__()
        self.arch = arch
        self.norm = norm
        self.bias = bias
        self.profile = compute_rf_profile(arch)
        in_ch = arch.input_channels
        blocks = []
        for rows in arch.block_slices():
            mods: list[nn.Module] = []
            for idx in rows:
                layer = arch.layers[idx]
                if layer.kind == "conv":
                    mods.append(_conv_unit(layer, in_ch, norm, bias))
                    in_ch = layer.out_channels
                else:
                    mods.append(nn.MaxPool2d(layer.kernel, layer.stride, layer.padding))
            blocks.append(nn.Sequential(*mods))
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = in_ch

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def fingerprint(self) -> str:
        import hashlib

        tag = f"{type(self).__name__}|norm={self.norm}|bias={self.bias}|{self.arch.fingerprint()}"
        return hashlib.sha256(tag.encode()).hexdigest()

    def check_input(self, h: int, w: int) -> tuple[int, int]:
        try:
            return output_size(self.arch, h), output_size(self.arch, w)
        except ValueError as exc:
            raise ShapeError(f"input {h}x{w} incompatible with {self.arch.name or 'backbone'}: {exc}") from exc


def _make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


class InvertedResidual(nn.Module):
    def __init__(self, inp: int, out: int, stride: int, expand: int) -> None:
        super().__init__()
        hidden = inp * expand
        layers: list[nn.Module] = []
        if expand != 1:
            layers += [nn.Conv2d(inp, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU6()]
        layers += [
            nn.Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU6(),
            nn.Conv2d(hidden, out, 1, bias=False),
            nn.BatchNorm2d(out),
        ]
        self.conv = nn.Sequential(*layers)
        self.residual = stride == 1 and inp == out

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        return x + y if self.residual else y


class MobileNetV2Backbone(Backbone):
    """MobileNetV2 feature extractor (width 0.75, last layer 512 wide).

    Blocks group the stages by output resolution (/2 ... /32).  RF geometry
    comes from the ``mobilenetv2`` preset, which lists the same convolutions.
    """

    SETTINGS = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]

    def __init__(self, width: float = 0.75, last_channels: int = 512) -> None:
        nn.Module.__init__(self)
        self.arch = preset("mobilenetv2")
        self.norm = True
        self.bias = False
        self.profile = compute_rf_profile(self.arch)
        c = _make_divisible(32 * width)
        stages: list[list[nn.Module]] = [[
            nn.Sequential(nn.Conv2d(3, c, 3, 2, 1, bias=False), nn.BatchNorm2d(c), nn.ReLU6())
        ]]
        for t, ch, n, s in self.SETTINGS:
            out = _make_divisible(ch * width)
            for i in range(n):
                stride = s if i == 0 else 1
                if stride > 1:
                    stages.append([])
                stages[-1].append(InvertedResidual(c, out, stride, t))
                c = out
        stages[-1].append(
            nn.Sequential(nn.Conv2d(c, last_channels, 1, bias=False), nn.BatchNorm2d(last_channels), nn.ReLU6())
        )
        self.blocks = nn.ModuleList(nn.Sequential(*s) for s in stages)
        self.out_channels = last_channels


def build_backbone(name: str, norm: bool = True, bias: bool = True) -> Backbone:
    """Backbone from a preset name or an architecture file path."""
    if name == "mobilenetv2":
        return MobileNetV2Backbone()
    return Backbone(load_arch(name), norm=norm, bias=bias)


def backbone_forward(backbone: Backbone, image: Tensor) -> FeatureMap:
    squeeze = image.dim() == 3
    x = image[None] if squeeze else image
    backbone.check_input(x.shape[-2], x.shape[-1])
    values = backbone(x)
    return FeatureMap(values[0] if squeeze else values, backbone.profile)


def pooling_matrix(assignment: np.ndarray, num_cells: int) -> Tensor:
    """``N x (Hf*Wf)`` matrix averaging the feature pixels of each cell."""
    flat = np.asarray(assignment).ravel()
    counts = np.bincount(flat, minlength=num_cells)
    if (counts == 0).any():
        raise ShapeError(f"cells {np.flatnonzero(counts == 0).tolist()} have no feature pixels")
    mat = np.zeros((num_cells, flat.size))
    mat[flat, np.arange(flat.size)] = 1.0 / counts[flat]
    return torch.from_numpy(mat)


def pool_cells(fm: FeatureMap | Tensor, assignment: np.ndarray, num_cells: int | None = None) -> Tensor:
    """Mean feature of every grid cell: ``(B, C, Hf, Wf) -> (B, N, C)``."""
    values = fm.values if isinstance(fm, FeatureMap) else fm
    squeeze = values.dim() == 3
    if squeeze:
        values = values[None]
    if tuple(values.shape[-2:]) != tuple(np.shape(assignment)):
        raise ShapeError(f"feature map {tuple(values.shape[-2:])} vs assignment {np.shape(assignment)}")
    n = int(num_cells if num_cells is not None else np.max(assignment) + 1)
    mat = pooling_matrix(assignment, n).to(values.dtype)
    out = torch.einsum("nk,bck->bnc", mat, values.flatten(2))
    return out[0] if squeeze else out


class JigsawHead(nn.Module):
    """Location classifier over ``[cell feature; center-cell feature]``.

    Shared across positions: reduce 2C -> hidden, ReLU, classify hidden -> N.
    """

    def __init__(self, in_channels: int, num_cells: int, hidden: int = HIDDEN_DIM, bias: bool = True) -> None:
        super().__init__()
        self.num_cells = num_cells
        self.reduce = nn.Linear(2 * in_channels, hidden, bias=bias)
        self.classifier = nn.Linear(hidden, num_cells, bias=bias)

    def forward(self, cell_feats: Tensor, center_index: int | None = None) -> Tensor:
        return jigsaw_head_forward(self, cell_feats, center_index)


def jigsaw_head_forward(head: JigsawHead, cell_feats: Tensor, center_index: int | None = None) -> Tensor:
    squeeze = cell_feats.dim() == 2
    x = cell_feats[None] if squeeze else cell_feats
    b, n, c = x.shape
    if n != head.num_cells or 2 * c != head.reduce.in_features:
        raise ShapeError(
            f"cell features {tuple(cell_feats.shape)} do not fit a head for "
            f"{head.num_cells} cells x {head.reduce.in_features // 2} channels"
        )
    center = (n - 1) // 2 if center_index is None else center_index
    ref = x[:, center : center + 1].expand(b, n, c)
    hidden = F.relu(head.reduce(torch.cat([x, ref], dim=-1)))
    logits = head.classifier(hidden)
    return logits[0] if squeeze else logits


def head_param_count(
    channels: int,
    num_patches: int,
    mode: Literal["reference_concat", "permutation_concat"],
    hidden: int = HIDDEN_DIM,
) -> int:
    """Weights of the first reduction layer (no biases).

    ``permutation_concat`` concatenates all N patch features (permutation-set
    jigsaw); ``reference_concat`` pairs each patch with the center patch only.
    """
    if channels < 1 or num_patches < 1:
        raise ValueError("channels and num_patches must be >= 1")
    if mode == "permutation_concat":
        return num_patches * channels * hidden
    if mode == "reference_concat":
        return 2 * channels * hidden
    raise ValueError(f"unknown mode {mode!r}")


class JigsawModel(nn.Module):
    """Backbone + cell pooling + jigsaw head for one grid size."""

    def __init__(self, backbone: Backbone, grid: GridSpec, hidden: int = HIDDEN_DIM) -> None:
        super().__init__()
        self.backbone = backbone
        self.grid = grid
        self.head = JigsawHead(backbone.out_channels, grid.num_cells, hidden)
        self._assign: dict[tuple[int, int], np.ndarray] = {}

    def assignment(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._assign:
            a = cell_assignment(self.backbone.profile, key, self.grid)
            if a.shape != self.backbone.check_input(h, w):
                raise ShapeError(f"feature map of {a.shape} predicted, backbone gives {self.backbone.check_input(h, w)}")
            self._assign[key] = a
        return self._assign[key]

    def forward(self, images: Tensor) -> Tensor:
        fm = backbone_forward(self.backbone, images)
        assign = self.assignment(images.shape[-2], images.shape[-1])
        cells = pool_cells(fm, assign, self.grid.num_cells)
        return jigsaw_head_forward(self.head, cells, self.grid.center_index)


class SegHead(nn.Module):
    """1x1 classifier on the backbone features, bilinearly upsampled to the input size."""

    def __init__(self, in_channels: int, num_classes: int, upsample_factor: int) -> None:
        super().__init__()
        self.classifier = nn.Conv2d(in_channels, num_classes, 1)
        self.upsample_factor = upsample_factor

    def forward(self, features: Tensor, out_size: tuple[int, int]) -> Tensor:
        scores = self.classifier(features)
        return F.interpolate(scores, size=out_size, mode="bilinear", align_corners=False)


def seg_forward(backbone: Backbone, head: SegHead, image: Tensor) -> Tensor:
    """Per-pixel class scores at input resolution (logits, no softmax)."""
    if head.upsample_factor != backbone.profile.effective_stride:
        raise ShapeError("seg head upsample factor must equal the backbone effective stride")
    squeeze = image.dim() == 3
    x = image[None] if squeeze else image
    fm = backbone_forward(backbone, x)
    scores = head(fm.values, tuple(x.shape[-2:]))
    return scores[0] if squeeze else scores


class SegModel(nn.Module):
    def __init__(self, backbone: Backbone, num_classes: int) -> None:
        super().__init__()
        self.backbone = backbone
        self.head = SegHead(backbone.out_channels, num_classes, backbone.profile.effective_stride)
        self.frozen_blocks: set[int] = set()

    def forward(self, images: Tensor) -> Tensor:
        return seg_forward(self.backbone, self.head, images)

    def train(self, mode: bool = True) -> "SegModel":
        super().train(mode)
        # frozen blocks keep their normalization statistics too
        for b in self.frozen_blocks:
            self.backbone.blocks[b].eval()
        return self


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Kaiming fan-in init for conv/linear weights, zero biases, unit BN."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator, dtype=m.weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
            m.reset_running_stats()
