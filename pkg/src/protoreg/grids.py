"""Grid containers (volumes, label maps, one-hot masks) and image pyramids.

All grids are indexed ``data[x, y, z]`` with ``data.shape == dims``.  The
serialized layout (see :mod:`protoreg.io`) is x-fastest / z-slowest, which is
Fortran order for arrays shaped this way.  Instances are treated as immutable
after construction and are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimsMismatchError(ValueError):
    """Two grids that must share a voxel lattice do not."""


def _validate_grid(dims, spacing, data, name):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"{name}: dims must be three counts >= 1, got {dims}")
    if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
        raise ValueError(f"{name}: spacing must be three positive lengths, got {spacing}")
    if data.shape != tuple(dims):
        raise ValueError(f"{name}: data shape {data.shape} != dims {tuple(dims)}")


@dataclass(frozen=True)
class Volume:
    """Scalar 3D intensity grid with voxel spacing in millimetres."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        _validate_grid(self.dims, self.spacing, self.data, "Volume")
        if not np.isfinite(self.data).all():
            raise ValueError("Volume: data contains non-finite values")


@dataclass(frozen=True)
class LabelVolume:
    """Integer anatomical labels; 0 is background, foreground classes are 1..K."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int32))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        _validate_grid(self.dims, self.spacing, self.labels, "LabelVolume")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > self.num_classes:
            raise ValueError(
                f"LabelVolume: labels must lie in [0, {self.num_classes}], "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )


@dataclass(frozen=True)
class OneHotMask:
    """Per-class soft channels in [0, 1]; background has no channel.

    ``channels`` is shaped (K, nx, ny, nz); channel k-1 corresponds to label k.
    Hard masks are {0, 1} valued; warped masks become soft.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    channels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "channels", np.asarray(self.channels, dtype=np.float64))
        if self.channels.ndim != 4 or self.channels.shape[1:] != self.dims:
            raise ValueError(
                f"OneHotMask: channels shape {self.channels.shape} incompatible with dims {self.dims}"
            )
        if self.channels.size and (self.channels.min() < -1e-9 or self.channels.max() > 1 + 1e-9):
            raise ValueError("OneHotMask: channel values must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.channels.shape[0]


@dataclass(frozen=True)
class Pyramid:
    """Multi-resolution stack; levels[0] is full resolution, each level halved."""

    levels: tuple

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("Pyramid: needs at least one level")
        for coarse, fine in zip(self.levels[1:], self.levels):
            expect = halved_dims(fine.dims)
            if coarse.dims != expect:
                raise ValueError(f"Pyramid: level dims {coarse.dims} != ceil-half {expect}")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def halved_dims(dims) -> tuple[int, int, int]:
    return tuple(-(-int(d) // 2) for d in dims)


def one_hot(labels: LabelVolume) -> OneHotMask:
    """Expand integer labels into K hard channels (label k -> channel k-1)."""
    k = labels.num_classes
    channels = np.zeros((k,) + labels.dims, dtype=np.float64)
    for c in range(1, k + 1):
        channels[c - 1] = labels.labels == c
    return OneHotMask(labels.dims, labels.spacing, channels)


def argmax_labels(mask: OneHotMask, threshold: float = 0.5) -> LabelVolume:
    """Invert one_hot: per voxel, the strongest channel wins if it reaches
    ``threshold``, otherwise background."""
    if mask.num_classes == 0:
        return LabelVolume(mask.dims, mask.spacing, np.zeros(mask.dims, np.int32), 0)
    best = mask.channels.max(axis=0)
    labels = np.where(best >= threshold, mask.channels.argmax(axis=0) + 1, 0)
    return LabelVolume(mask.dims, mask.spacing, labels, mask.num_classes)


def _box_mean_axis(data: np.ndarray, axis: int) -> np.ndarray:
    """Mean of non-overlapping pairs along one axis; a trailing odd slab
    passes through unchanged. Axes of size 1 are left alone."""
    n = data.shape[axis]
    if n < 2:
        return data
    idx = np.arange(0, n, 2)
    sums = np.add.reduceat(data, idx, axis=axis)
    counts = np.full(len(idx), 2.0)
    if n % 2 == 1:
        counts[-1] = 1.0
    shape = [1] * data.ndim
    shape[axis] = len(idx)
    return sums / counts.reshape(shape)


def downsample(grid):
    """Halve each axis (ceil) by box-filter averaging.

    Works on Volume and OneHotMask; one-hot channels are averaged
    independently and become soft.
    """
    if isinstance(grid, Volume):
        data = grid.data
        for ax in range(3):
            data = _box_mean_axis(data, ax)
        spacing = tuple(s * 2 if d >= 2 else s for s, d in zip(grid.spacing, grid.dims))
        return Volume(data.shape, spacing, data)
    if isinstance(grid, OneHotMask):
        ch = grid.channels
        for ax in range(1, 4):
            ch = _box_mean_axis(ch, ax)
        spacing = tuple(s * 2 if d >= 2 else s for s, d in zip(grid.spacing, grid.dims))
        return OneHotMask(ch.shape[1:], spacing, np.clip(ch, 0.0, 1.0))
    raise TypeError(f"downsample: unsupported grid type {type(grid).__name__}")


def build_pyramid(grid, levels: int) -> Pyramid:
    """Repeatedly halve ``grid``; rejects schedules that would shrink any axis
    below 2 voxels at the coarsest level."""
    if levels < 1:
        raise ValueError("build_pyramid: levels must be >= 1")
    dims = grid.dims
    for _ in range(levels - 1):
        dims = halved_dims(dims)
    if min(dims) < 2:
        raise ValueError(
            f"build_pyramid: {levels} levels reduce dims {grid.dims} to {dims}; "
            "all axes must stay >= 2"
        )
    out = [grid]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return Pyramid(tuple(out))
