"""Layer-chain descriptions of CNNs and their receptive-field geometry.

An FCN behaves like a single convolution with kernel ``rf``, stride
``effective_stride`` and padding ``effective_padding``.  The closed forms
below are checked against :func:`brute_force_rf`, which marks input
dependencies layer by layer without using them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .puzzle import GridSpec

NUM_BLOCKS = 5
PRESETS = ("alexnet", "vgg16", "resnet101", "tinyfcn", "mobilenetv2")


class ArchError(ValueError):
    """Malformed or empty architecture."""


class InsufficientInputError(ValueError):
    """Input too small for an interior output pixel."""


class ResolutionMismatchError(ValueError):
    """Some grid cell received no feature pixel."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: int
    stride: int = 1
    padding: int = 0
    out_channels: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("conv", "pool"):
            raise ArchError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ArchError(
                f"{self.name}: need kernel>=1, stride>=1, padding>=0 "
                f"(got k={self.kernel}, s={self.stride}, p={self.padding})"
            )
        if self.kind == "conv" and (self.out_channels is None or self.out_channels < 1):
            raise ArchError(f"{self.name}: conv layers need a positive out_channels")
        if self.kind == "pool" and self.out_channels is not None:
            raise ArchError(f"{self.name}: pool layers keep their input channels")


@dataclass(frozen=True)
class ArchSpec:
    """Ordered layers plus the start index of each of the five blocks.

    A block may be empty when one layer drops the resolution by more than
    two (AlexNet's stride-4 first convolution), but every non-empty block
    after the first must open with a strided layer.
    """

    layers: tuple[LayerSpec, ...]
    block_boundaries: tuple[int, ...] = (0, 0, 0, 0, 0)
    input_channels: int = 3
    name: str = ""

    def __post_init__(self) -> None:
        b = self.block_boundaries
        if len(b) != NUM_BLOCKS:
            raise ArchError(f"need {NUM_BLOCKS} block boundaries, got {len(b)}")
        if b[0] != 0 or any(x > y for x, y in zip(b, b[1:])) or b[-1] > len(self.layers):
            raise ArchError(f"block boundaries {b} must start at 0 and be non-decreasing")
        for idx in range(1, NUM_BLOCKS):
            start = b[idx]
            end = b[idx + 1] if idx + 1 < NUM_BLOCKS else len(self.layers)
            if end > start and self.layers[start].stride == 1:
                raise ArchError(
                    f"block{idx + 1} starts at {self.layers[start].name}, which has stride 1"
                )
        if self.input_channels < 1:
            raise ArchError("input_channels must be positive")

    def block_slices(self) -> list[range]:
        ends = list(self.block_boundaries[1:]) + [len(self.layers)]
        return [range(s, e) for s, e in zip(self.block_boundaries, ends)]

    def channels(self) -> list[int]:
        """Output channel count after every layer."""
        out, c = [], self.input_channels
        for layer in self.layers:
            if layer.kind == "conv":
                c = layer.out_channels
            out.append(c)
        return out

    @property
    def out_channels(self) -> int:
        return self.channels()[-1] if self.layers else self.input_channels

    def to_text(self) -> str:
        lines = [f"input {self.input_channels}"]
        for i, layer in enumerate(self.layers):
            if i in self.block_boundaries[1:]:
                lines.extend("block" for b in self.block_boundaries[1:] if b == i)
            row = f"{layer.name} {layer.kind} {layer.kernel} {layer.stride} {layer.padding}"
            if layer.out_channels is not None:
                row += f" {layer.out_channels}"
            lines.append(row)
        trailing = sum(1 for b in self.block_boundaries[1:] if b == len(self.layers))
        lines.extend(["block"] * trailing)
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


@dataclass(frozen=True)
class RFProfile:
    rf: int
    effective_stride: int
    effective_padding: int

    def __post_init__(self) -> None:
        if self.rf < 1 or self.effective_stride < 1 or self.effective_padding < 0:
            raise ArchError(f"invalid receptive-field profile {self}")


def compute_rf_profile(arch: ArchSpec | Sequence[LayerSpec]) -> RFProfile:
    layers = arch.layers if isinstance(arch, ArchSpec) else tuple(arch)
    if not layers:
        raise ArchError("architecture has no layers")
    rf, padding, jump = 1, 0, 1
    for layer in layers:
        rf += (layer.kernel - 1) * jump
        padding += layer.padding * jump
        jump *= layer.stride
    return RFProfile(rf=rf, effective_stride=jump, effective_padding=padding)


def rf_center(profile: RFProfile, i: int, j: int) -> tuple[Fraction, Fraction]:
    """Input coordinates of the receptive-field center of feature pixel (i, j).

    Exact rationals: an even ``rf`` puts the center between two pixels.
    """
    if i < 0 or j < 0:
        raise ValueError("feature indices must be non-negative")
    base = Fraction(profile.rf - 1, 2) - profile.effective_padding
    return base + i * profile.effective_stride, base + j * profile.effective_stride


def output_size(arch: ArchSpec | Sequence[LayerSpec], size: int) -> int:
    """Spatial output size after chaining every layer (floor convention)."""
    layers = arch.layers if isinstance(arch, ArchSpec) else tuple(arch)
    for layer in layers:
        size = (size + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if size < 1:
            raise InsufficientInputError(f"{layer.name}: spatial size collapses to {size}")
    return size


@dataclass
class BruteForceRF:
    rf: int
    centers: dict[int, Fraction] = field(default_factory=dict)
    output_size: int = 0
    probed: int = 0


def _dependency_matrix(layers: Sequence[LayerSpec], n: int) -> np.ndarray:
    # dep[o, x]: does output o (1-D) read input pixel x.  The extra last
    # column records contact with zero padding at any layer.  Square kernels
    # are separable, so the 1-D pass fully describes the 2-D footprint.
    dep = np.zeros((n, n + 1), dtype=bool)
    dep[:, :n] = np.eye(n, dtype=bool)
    for layer in layers:
        k, s, p = layer.kernel, layer.stride, layer.padding
        padded = np.zeros((dep.shape[0] + 2 * p, n + 1), dtype=bool)
        padded[:p, n] = True
        padded[p + dep.shape[0] :, n] = True
        padded[p : p + dep.shape[0]] = dep
        n_out = (padded.shape[0] - k) // s + 1
        if n_out < 1:
            raise InsufficientInputError(f"{layer.name}: no output for input size {n}")
        out = np.zeros((n_out, n + 1), dtype=bool)
        for t in range(k):
            out |= padded[t : t + s * (n_out - 1) + 1 : s]
        dep = out
    return dep


def brute_force_rf(arch: ArchSpec | Sequence[LayerSpec], input_size: int) -> BruteForceRF:
    """Measure RF size and centers by propagating input-pixel dependencies.

    The RF is measured on the central output pixel; centers are reported for
    every output pixel that never reads zero padding or the image border.
    """
    layers = arch.layers if isinstance(arch, ArchSpec) else tuple(arch)
    if not layers:
        raise ArchError("architecture has no layers")
    n = input_size
    dep = _dependency_matrix(layers, n)
    n_out = dep.shape[0]
    result = BruteForceRF(rf=0, output_size=n_out)
    for o in range(n_out):
        xs = np.flatnonzero(dep[o, :n])
        if dep[o, n] or xs.size == 0 or xs[0] == 0 or xs[-1] == n - 1:
            continue
        result.centers[o] = Fraction(int(xs[0]) + int(xs[-1]), 2)
    mid = n_out // 2
    if mid not in result.centers:
        raise InsufficientInputError(
            f"input size {input_size} too small: output pixel {mid} reaches the border"
        )
    xs = np.flatnonzero(dep[mid, :n])
    result.rf = int(xs[-1] - xs[0] + 1)
    result.probed = mid
    return result


def feature_size(profile: RFProfile, size: int) -> int:
    return (size + 2 * profile.effective_padding - profile.rf) // profile.effective_stride + 1


def _round_half_down(x: Fraction) -> int:
    # ceil(x - 1/2): 2.5 -> 2, 2.6 -> 3
    return -((-(x - Fraction(1, 2))).__floor__())


def cell_assignment(
    profile: RFProfile, input_size: tuple[int, int], grid: GridSpec
) -> np.ndarray:
    """Map every feature pixel to the grid cell containing its RF center.

    Returns an ``Hf x Wf`` integer array of row-major cell indices.
    """
    h, w = input_size
    hf, wf = feature_size(profile, h), feature_size(profile, w)
    g = grid.side
    if hf < g or wf < g:
        raise ResolutionMismatchError(
            f"feature map {hf}x{wf} is smaller than the {g}x{g} grid for input {h}x{w}"
        )

    def cell_of(idx: int, extent: int) -> int:
        c, _ = rf_center(profile, idx, 0)
        c = min(max(_round_half_down(c), 0), extent - 1)
        return min(c * g // extent, g - 1)

    rows = np.array([cell_of(i, h) for i in range(hf)])
    cols = np.array([cell_of(j, w) for j in range(wf)])
    assignment = rows[:, None] * g + cols[None, :]
    counts = np.bincount(assignment.ravel(), minlength=grid.num_cells)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        cell = int(empty[0])
        raise ResolutionMismatchError(
            f"grid cell {cell} (row {cell // g}, col {cell % g}) receives no feature pixel "
            f"for input {h}x{w} with stride {profile.effective_stride}"
        )
    return assignment


# --- architecture files -------------------------------------------------


def parse_arch(text: str, name: str = "") -> ArchSpec:
    """Parse the line format ``name kind kernel stride padding [out_channels]``.

    ``block`` lines open a new block, ``input C`` sets the input channels,
    ``#`` starts a comment.
    """
    layers: list[LayerSpec] = []
    boundaries: list[int] = []
    input_channels = 3
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "block" and len(parts) == 1:
            if layers or boundaries:
                boundaries.append(len(layers))
            continue
        if parts[0] == "input" and len(parts) == 2:
            input_channels = int(parts[1])
            continue
        if len(parts) not in (5, 6):
            raise ArchError(f"line {lineno}: expected 5 or 6 fields, got {len(parts)}: {raw!r}")
        try:
            nums = [int(x) for x in parts[2:]]
        except ValueError as exc:
            raise ArchError(f"line {lineno}: non-integer field in {raw!r}") from exc
        out = nums[3] if len(nums) == 4 else None
        layers.append(LayerSpec(parts[0], parts[1], nums[0], nums[1], nums[2], out))
    if not layers:
        raise ArchError("architecture has no layers")
    boundaries = [0] + boundaries if boundaries else _infer_blocks(layers)
    if len(boundaries) != NUM_BLOCKS:
        raise ArchError(f"expected {NUM_BLOCKS} blocks, found {len(boundaries)}")
    return ArchSpec(tuple(layers), tuple(boundaries), input_channels, name)


def _infer_blocks(layers: Sequence[LayerSpec]) -> list[int]:
    starts = [i for i, layer in enumerate(layers) if i > 0 and layer.stride > 1]
    starts = [0] + starts[: NUM_BLOCKS - 1]
    while len(starts) < NUM_BLOCKS:
        starts.append(len(layers))
    return starts


def load_arch(path: str | Path) -> ArchSpec:
    """Load an architecture file, falling back to the packaged presets.

    ``presets/alexnet.arch``, ``alexnet.arch`` and ``alexnet`` all resolve to
    the shipped AlexNet preset when no such file exists on disk.
    """
    path = Path(path)
    if path.is_file():
        return parse_arch(path.read_text(), path.stem)
    stem = path.name[: -len(".arch")] if path.name.endswith(".arch") else path.name
    if stem in PRESETS:
        return preset(stem)
    raise FileNotFoundError(f"architecture file not found: {path}")


def preset(name: str) -> ArchSpec:
    if name not in PRESETS:
        raise ArchError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("patchforge.presets").joinpath(f"{name}.arch").read_text()
    return parse_arch(text, name)


def random_chain(rng: np.random.Generator, max_layers: int = 6, max_kernel: int = 7,
                 max_stride: int = 3) -> tuple[LayerSpec, ...]:
    n = int(rng.integers(1, max_layers + 1))
    layers = []
    for i in range(n):
        k = int(rng.integers(1, max_kernel + 1))
        s = int(rng.integers(1, max_stride + 1))
        p = int(rng.integers(0, k // 2 + 1))
        if rng.random() < 0.3:
            layers.append(LayerSpec(f"pool{i}", "pool", k, s, p))
        else:
            layers.append(LayerSpec(f"conv{i}", "conv", k, s, p, 1))
    return tuple(layers)


def rf_table(rows: Iterable[tuple[str, RFProfile]]) -> str:
    lines = [f"{'arch':<14}{'r':>7}{'S0':>6}{'P0':>6}"]
    for name, prof in rows:
        lines.append(f"{name:<14}{prof.rf:>7}{prof.effective_stride:>6}{prof.effective_padding:>6}")
    return "\n".join(lines)
