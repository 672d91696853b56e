"""Objective terms for mask-assisted registration.

Five terms are combined into the optimized total: windowed normalized
cross-correlation of intensities (negated so lower is better), diffusion
smoothness of the displacement, soft Dice overlap of warped masks, a
prototype term (voxel-to-prototype contrast plus cross-image prototype
alignment on a fixed 2-channel feature bank), and a symmetric Chamfer loss
between mask contour points.

Conventions fixed here and relied on elsewhere:
  * the correlation term is the negative mean of squared window NCC over all
    full windows, so it lives in [-1, 0]; windows with variance below 1e-5 on
    either side contribute 0;
  * smoothness penalizes the displacement u, not the full map p + u(p);
  * Dice averages over classes present on at least one side and skips classes
    empty on both;
  * alignment sums (1 - cosine) over classes present in both prototype sets;
  * Chamfer is averaged over classes present in both contour collections, and
    the moving-side points are transported by the current field before the
    nearest-neighbor terms are formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial import cKDTree

from .grids import DimsMismatchError, LabelVolume, OneHotMask, Volume
from .warp import (
    DisplacementField,
    central_difference,
    sample_field_at_points,
    warp_onehot,
    warp_volume,
)

VARIANCE_EPS = 1e-5      # window variance floor for the correlation term
DICE_EPS = 1e-7          # soft Dice denominator guard
PRESENCE_EPS = 1e-7      # minimum mask mass for a class to count as present
NORM_EPS = 1e-8          # cosine-similarity norm guard


# ------------------------------------------------------------------- types

@dataclass(frozen=True)
class LossWeights:
    """Weights for (similarity, smoothness, segmentation, prototype, contour)."""

    sim: float = 1.0
    smooth: float = 4.0
    seg: float = 1.0
    prototype: float = 1.0
    contour: float = 0.1

    def __post_init__(self):
        for name, w in self.as_dict().items():
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"LossWeights: {name} must be finite and >= 0, got {w}")

    def as_dict(self) -> dict:
        return {
            "sim": self.sim,
            "smooth": self.smooth,
            "seg": self.seg,
            "prototype": self.prototype,
            "contour": self.contour,
        }

    def without_masks(self) -> "LossWeights":
        return LossWeights(self.sim, self.smooth, 0.0, 0.0, 0.0)

    @property
    def uses_masks(self) -> bool:
        return self.seg > 0 or self.prototype > 0 or self.contour > 0


TERM_NAMES = ("sim", "smooth", "seg", "prototype", "contour")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values, their weights, and the weighted total."""

    values: dict
    weights: LossWeights
    total: float

    @classmethod
    def from_terms(cls, values: dict, weights: LossWeights) -> "LossBreakdown":
        wd = weights.as_dict()
        total = sum(wd[name] * values[name] for name in TERM_NAMES)
        return cls(dict(values), weights, float(total))

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "terms": {
                name: {"value": self.values[name], "weight": self.weights.as_dict()[name]}
                for name in TERM_NAMES
            },
        }


@dataclass(frozen=True)
class FeatureVolume:
    """Per-voxel feature channels, shaped (C, nx, ny, nz)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    channels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "channels", np.asarray(self.channels, dtype=np.float64))
        if self.channels.ndim != 4 or self.channels.shape[1:] != self.dims:
            raise ValueError(
                f"FeatureVolume: channels shape {self.channels.shape} vs dims {self.dims}"
            )
        if not np.isfinite(self.channels).all():
            raise ValueError("FeatureVolume: non-finite feature values")

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]


@dataclass(frozen=True)
class PrototypeSet:
    """One feature vector per class; absent classes carry no usable vector."""

    vectors: np.ndarray        # (K, C)
    present: np.ndarray        # (K,) bool

    def __post_init__(self):
        object.__setattr__(self, "vectors", np.asarray(self.vectors, dtype=np.float64))
        object.__setattr__(self, "present", np.asarray(self.present, dtype=bool))
        if self.vectors.ndim != 2 or self.present.shape != (self.vectors.shape[0],):
            raise ValueError("PrototypeSet: vectors must be (K, C) with matching present flags")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class ContourPointSet:
    """Sampled boundary points (voxel-center coordinates) of one class region."""

    class_label: int
    points: np.ndarray         # (N, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


# ------------------------------------------------------- similarity (LNCC)

def _box_sum(data: np.ndarray, window: int) -> np.ndarray:
    """Sum over the centered window at every voxel (zero outside the volume)."""
    return uniform_filter(data, size=window, mode="constant", cval=0.0) * float(window ** 3)


def _check_window(dims, window: int) -> None:
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if window > min(dims):
        raise ValueError(f"window {window} exceeds smallest dim of {dims}")


def _lncc_stats(fixed: np.ndarray, moved: np.ndarray, window: int) -> dict:
    """Window statistics for the correlation term, on the full-window centers."""
    w3 = float(window ** 3)
    r = window // 2
    center = tuple(slice(r, n - r) for n in fixed.shape)
    s_i = _box_sum(fixed, window)[center]
    s_j = _box_sum(moved, window)[center]
    s_ii = _box_sum(fixed * fixed, window)[center]
    s_jj = _box_sum(moved * moved, window)[center]
    s_ij = _box_sum(fixed * moved, window)[center]
    a = s_ij - s_i * s_j / w3
    b = s_ii - s_i * s_i / w3
    c = s_jj - s_j * s_j / w3
    valid = (b / w3 >= VARIANCE_EPS) & (c / w3 >= VARIANCE_EPS)
    ncc2 = np.zeros_like(a)
    np.divide(a * a, b * c, out=ncc2, where=valid)
    count = int(np.prod([n - window + 1 for n in fixed.shape]))
    return {
        "a": a, "b": b, "c": c, "valid": valid, "ncc2": ncc2,
        "mean_i": s_i / w3, "mean_j": s_j / w3,
        "count": count, "center": center, "window": window,
    }


def lncc(fixed: Volume, moved: Volume, window: int = 9) -> float:
    """Negative mean squared local NCC over all full windows; in [-1, 0]."""
    if fixed.dims != moved.dims:
        raise DimsMismatchError(f"lncc: {fixed.dims} vs {moved.dims}")
    _check_window(fixed.dims, window)
    stats = _lncc_stats(fixed.data, moved.data, window)
    return float(-stats["ncc2"].sum() / stats["count"])


# ---------------------------------------------------------------- smoothness

def _forward_diffs(u: np.ndarray) -> np.ndarray:
    """Forward differences of (3, nx, ny, nz) along each axis -> (3, 3, ...).

    The trailing border along each axis is zero.
    """
    d = np.zeros((3,) + u.shape)
    for a in range(3):
        src = [slice(None)] * 4
        dst = [slice(None)] * 4
        src[1 + a] = slice(1, None)
        dst[1 + a] = slice(0, -1)
        d[a][tuple(dst)] = u[tuple(src)] - u[tuple(dst)]
    return d


def smoothness(field: DisplacementField) -> float:
    """Mean over voxels of the squared forward-difference gradient of u."""
    n = float(np.prod(field.dims))
    d = _forward_diffs(field.u)
    return float((d * d).sum() / n)


# --------------------------------------------------------------------- Dice

def _dice_stats(fixed_channels: np.ndarray, moved_channels: np.ndarray) -> dict:
    k = fixed_channels.shape[0]
    inter = np.array([(fixed_channels[i] * moved_channels[i]).sum() for i in range(k)])
    sum_f = fixed_channels.reshape(k, -1).sum(axis=1)
    sum_m = moved_channels.reshape(k, -1).sum(axis=1)
    present = (sum_f > PRESENCE_EPS) | (sum_m > PRESENCE_EPS)
    denom = sum_f + sum_m + DICE_EPS
    dice = 2.0 * inter / denom
    return {"inter": inter, "sum_f": sum_f, "sum_m": sum_m,
            "present": present, "denom": denom, "dice": dice}


def dice_loss(fixed: OneHotMask, moved_soft: OneHotMask) -> float:
    """1 - mean soft Dice over classes present on either side."""
    if fixed.num_classes != moved_soft.num_classes:
        raise ValueError(
            f"dice_loss: class counts differ ({fixed.num_classes} vs {moved_soft.num_classes})"
        )
    if fixed.dims != moved_soft.dims:
        raise DimsMismatchError(f"dice_loss: {fixed.dims} vs {moved_soft.dims}")
    st = _dice_stats(fixed.channels, moved_soft.channels)
    if not st["present"].any():
        return 0.0
    return float(1.0 - st["dice"][st["present"]].mean())


# --------------------------------------------------------------- prototypes

def _standardize_cached(data: np.ndarray) -> tuple[np.ndarray, float]:
    mu = data.mean()
    sigma = np.sqrt(((data - mu) ** 2).mean() + 1e-12)
    return (data - mu) / sigma, float(sigma)


def standardize(data: np.ndarray) -> np.ndarray:
    return _standardize_cached(data)[0]


def _features_forward(data: np.ndarray) -> tuple[np.ndarray, dict]:
    """Compute the 2-channel feature bank plus the intermediates the analytic
    backward pass needs."""
    ch0, sig0 = _standardize_cached(data)
    grads = [central_difference(data, a) for a in range(3)]
    gm = np.sqrt(grads[0] ** 2 + grads[1] ** 2 + grads[2] ** 2 + 1e-12)
    ch1, sig1 = _standardize_cached(gm)
    cache = {"ch0": ch0, "sig0": sig0, "grads": grads, "gm": gm, "ch1": ch1, "sig1": sig1}
    return np.stack([ch0, ch1]), cache


def feature_volume(vol: Volume) -> FeatureVolume:
    """Fixed 2-channel bank: intensity and central-difference gradient
    magnitude, each standardized to zero mean / unit variance over the volume."""
    channels, _ = _features_forward(vol.data)
    return FeatureVolume(vol.dims, vol.spacing, channels)


def extract_prototypes(features: FeatureVolume, mask: OneHotMask) -> PrototypeSet:
    """Masked average pooling: per class, the mask-weighted mean feature."""
    if features.dims != mask.dims:
        raise DimsMismatchError(f"extract_prototypes: {features.dims} vs {mask.dims}")
    k = mask.num_classes
    c = features.num_channels
    flat_f = features.channels.reshape(c, -1)
    flat_m = mask.channels.reshape(k, -1)
    mass = flat_m.sum(axis=1)
    present = mass >= PRESENCE_EPS
    vectors = np.zeros((k, c))
    for i in np.flatnonzero(present):
        vectors[i] = flat_f @ flat_m[i] / mass[i]
    return PrototypeSet(vectors, present)


def hard_assignments(mask: OneHotMask, threshold: float = 0.5) -> np.ndarray:
    """Per-voxel class id (1..K) by strongest channel, 0 where below threshold."""
    if mask.num_classes == 0:
        return np.zeros(mask.dims, dtype=np.int32)
    best = mask.channels.max(axis=0)
    return np.where(best >= threshold, mask.channels.argmax(axis=0) + 1, 0).astype(np.int32)


def _contrast_stats(features: np.ndarray, assign: np.ndarray, protos: PrototypeSet,
                    temperature: float) -> dict | None:
    """Per-voxel softmax statistics for the contrast term.

    Returns None when fewer than two classes are present (the term is then
    defined as zero).
    """
    rows = np.flatnonzero(protos.present)
    if rows.size < 2:
        return None
    class_ids = rows + 1
    fg = np.isin(assign.ravel(), class_ids)
    fg_idx = np.flatnonzero(fg)
    if fg_idx.size == 0:
        return None
    c = features.shape[0]
    f = features.reshape(c, -1)[:, fg_idx]                     # (C, N)
    norms = np.maximum(np.linalg.norm(f, axis=0), NORM_EPS)
    fhat = f / norms
    p = protos.vectors[rows]                                   # (P, C)
    pnorms = np.maximum(np.linalg.norm(p, axis=1), NORM_EPS)
    phat = p / pnorms[:, None]
    cos = phat @ fhat                                          # (P, N)
    logits = cos / temperature
    shifted = logits - logits.max(axis=0, keepdims=True)
    expv = np.exp(shifted)
    z = expv.sum(axis=0)
    softmax = expv / z
    # row index of each voxel's assigned class within the present-class list
    row_of_class = {cid: i for i, cid in enumerate(class_ids)}
    pos = np.array([row_of_class[a] for a in assign.ravel()[fg_idx]])
    log_prob = shifted[pos, np.arange(fg_idx.size)] - np.log(z)
    value = float(-log_prob.mean())
    return {
        "value": value, "fg_idx": fg_idx, "fhat": fhat, "norms": norms,
        "phat": phat, "cos": cos, "softmax": softmax, "pos": pos,
        "temperature": temperature,
    }


def contrast_loss(features: FeatureVolume, mask: OneHotMask, protos: PrototypeSet,
                  temperature: float = 0.1) -> float:
    """Mean over foreground voxels of -log softmax over cosine similarity to
    the class prototypes; 0 when fewer than two classes are present."""
    if features.dims != mask.dims:
        raise DimsMismatchError(f"contrast_loss: {features.dims} vs {mask.dims}")
    stats = _contrast_stats(features.channels, hard_assignments(mask), protos, temperature)
    return 0.0 if stats is None else stats["value"]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = max(float(np.linalg.norm(a)), NORM_EPS)
    nb = max(float(np.linalg.norm(b)), NORM_EPS)
    return float(a @ b) / (na * nb)


def align_loss(protos_f: PrototypeSet, protos_m: PrototypeSet) -> float:
    """Sum of (1 - cosine) over classes present in both sets; one-sided
    classes are skipped."""
    if protos_f.num_classes != protos_m.num_classes:
        raise ValueError("align_loss: prototype sets cover different class universes")
    both = protos_f.present & protos_m.present
    total = 0.0
    for k in np.flatnonzero(both):
        total += 1.0 - _cosine(protos_f.vectors[k], protos_m.vectors[k])
    return float(total)


def prototype_loss(moved_feats: FeatureVolume, fixed_feats: FeatureVolume,
                   fixed_mask: OneHotMask, moved_mask: OneHotMask,
                   temperature: float = 0.1) -> float:
    """Contrast plus alignment.

    The contrast half averages the warped-moving features and the fixed
    features, both scored against the fixed image's prototypes under the
    fixed mask's hard assignments (so prototypes and assignments are
    constants of the deformation).  Alignment compares fixed prototypes with
    prototypes pooled from the warped moving features under the warped
    moving mask.
    """
    protos_f = extract_prototypes(fixed_feats, fixed_mask)
    contrast = 0.5 * (
        contrast_loss(moved_feats, fixed_mask, protos_f, temperature)
        + contrast_loss(fixed_feats, fixed_mask, protos_f, temperature)
    )
    protos_m = extract_prototypes(moved_feats, moved_mask)
    return contrast + align_loss(protos_f, protos_m)


# ------------------------------------------------------------------ contours

def extract_contour_points(mask, class_label: int, max_points: int = 2048,
                           seed: int = 0) -> ContourPointSet:
    """Boundary voxels of one class region, optionally subsampled.

    A voxel is a boundary voxel when it is foreground and at least one of its
    six face neighbors is background; neighbors outside the volume count as
    background.  When more than ``max_points`` boundary voxels exist, a
    seeded uniform subsample is taken.
    """
    if isinstance(mask, LabelVolume):
        fg = mask.labels == class_label
    elif isinstance(mask, OneHotMask):
        fg = mask.channels[class_label - 1] >= 0.5
    else:
        raise TypeError(f"extract_contour_points: unsupported mask type {type(mask).__name__}")

    interior = np.ones_like(fg)
    for a in range(3):
        for off in (-1, 1):
            neighbor = np.zeros_like(fg)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if off == 1:
                src[a], dst[a] = slice(1, None), slice(0, -1)
            else:
                src[a], dst[a] = slice(0, -1), slice(1, None)
            neighbor[tuple(dst)] = fg[tuple(src)]
            interior &= neighbor
    boundary = fg & ~interior
    pts = np.argwhere(boundary).astype(np.float64)
    if pts.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(pts.shape[0], size=max_points, replace=False))
        pts = pts[keep]
    return ContourPointSet(class_label, pts)


def _chamfer_arrays(a: np.ndarray, b: np.ndarray) -> float:
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float((da ** 2).mean() + (db ** 2).mean())


def chamfer(set_m: ContourPointSet | np.ndarray, set_f: ContourPointSet | np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance between two point sets."""
    a = set_m.points if isinstance(set_m, ContourPointSet) else np.asarray(set_m, dtype=np.float64)
    b = set_f.points if isinstance(set_f, ContourPointSet) else np.asarray(set_f, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer: both point sets must be nonempty")
    return _chamfer_arrays(a, b)


def contour_loss(moving_contours, fixed_contours, field: DisplacementField) -> float:
    """Per-class Chamfer between the two contour sets under the current map,
    averaged over classes with points on both sides.

    The map phi(p) = p + u(p) sends output-grid coordinates to moving-image
    coordinates (the same pull-back convention the warps use), so the fixed
    contour points are the ones carried through the field and matched against
    the moving contours.  Transport samples u at the (static) fixed points,
    which keeps the loss differentiable in u.
    """
    moving_by_class = {c.class_label: c for c in moving_contours if len(c) > 0}
    values = []
    for cf in fixed_contours:
        cm = moving_by_class.get(cf.class_label)
        if cm is None or len(cf) == 0:
            continue
        carried = cf.points + sample_field_at_points(field, cf.points)
        values.append(_chamfer_arrays(carried, cm.points))
    return float(np.mean(values)) if values else 0.0


# ------------------------------------------------------------------- total

def total_loss(fixed: Volume, moving: Volume, field: DisplacementField,
               weights: LossWeights,
               fixed_mask: OneHotMask | None = None,
               moving_mask: OneHotMask | None = None,
               window: int = 9, temperature: float = 0.1,
               max_points: int = 2048, seed: int = 0) -> LossBreakdown:
    """Evaluate every active term at the given field and report the breakdown.

    Terms with zero weight are skipped (reported as 0.0); mask-dependent
    terms require both masks.
    """
    if fixed.dims != moving.dims or fixed.dims != field.dims:
        raise DimsMismatchError(
            f"total_loss: dims differ (fixed {fixed.dims}, moving {moving.dims}, "
            f"field {field.dims})"
        )
    wd = weights.as_dict()
    if weights.uses_masks and (fixed_mask is None or moving_mask is None):
        raise ValueError("total_loss: mask-dependent weights are active but masks are missing")

    values = {name: 0.0 for name in TERM_NAMES}
    moved = warp_volume(moving, field) if (wd["sim"] > 0 or wd["prototype"] > 0) else None

    if wd["sim"] > 0:
        values["sim"] = lncc(fixed, moved, window)
    if wd["smooth"] > 0:
        values["smooth"] = smoothness(field)

    moved_mask = None
    if wd["seg"] > 0 or wd["prototype"] > 0:
        moved_mask = warp_onehot(moving_mask, field) if fixed_mask is not None else None
    if wd["seg"] > 0:
        values["seg"] = dice_loss(fixed_mask, moved_mask)
    if wd["prototype"] > 0:
        values["prototype"] = prototype_loss(
            feature_volume(moved), feature_volume(fixed), fixed_mask, moved_mask, temperature
        )
    if wd["contour"] > 0:
        k = fixed_mask.num_classes
        fixed_contours = [
            extract_contour_points(fixed_mask, c, max_points, seed) for c in range(1, k + 1)
        ]
        moving_contours = [
            extract_contour_points(moving_mask, c, max_points, seed) for c in range(1, k + 1)
        ]
        values["contour"] = contour_loss(moving_contours, fixed_contours, field)
    return LossBreakdown.from_terms(values, weights)
