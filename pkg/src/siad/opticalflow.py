"""Dense optical flow and its reduction to a scalar change-rate map.

A pair of registered images taken some years apart is turned into a
per-pixel velocity field with the classic Horn-Schunck scheme (brightness
constancy plus a smoothness penalty, solved by Jacobi iteration), and the
field is reduced to its divergence: positive where the image content
locally expands, negative where it contracts.  Flow is expressed per year
so subjects with different scan gaps are comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

HS_DEFAULT_SMOOTHNESS = 0.5
HS_DEFAULT_ITERATIONS = 200

# Horn-Schunck neighbourhood average: 1/6 edges, 1/12 corners.
_AVG_WEIGHTS = (
    (-1, -1, 1 / 12), (-1, 0, 1 / 6), (-1, 1, 1 / 12),
    (0, -1, 1 / 6), (0, 1, 1 / 6),
    (1, -1, 1 / 12), (1, 0, 1 / 6), (1, 1, 1 / 12),
)


@dataclass(frozen=True)
class ImagePair:
    """Two same-shape scans of one subject plus the conditioning scalars."""

    first: np.ndarray
    second: np.ndarray
    time_gap: float
    age_at_first: float

    def __post_init__(self):
        first = _as_plane_3d(self.first)
        second = _as_plane_3d(self.second)
        if first.shape != second.shape:
            raise ShapeError(f"image shapes differ: {first.shape} vs {second.shape}")
        if not self.time_gap > 0:
            raise DataError(f"time gap must be positive, got {self.time_gap}")
        object.__setattr__(self, "first", first)
        object.__setattr__(self, "second", second)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel velocity in pixels per year: u horizontal, v vertical."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise ShapeError(f"flow components must be equal 2-D arrays, got {u.shape}, {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise DataError("non-finite flow values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class ScalarFlowMap:
    """Signed change-rate map: positive = local growth, negative = shrinkage."""

    values: np.ndarray

    def __post_init__(self):
        values = _as_plane_3d(self.values)
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite map values")
        object.__setattr__(self, "values", values)


def _as_plane_3d(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise ShapeError(f"expected a single-channel image, got shape {arr.shape}")
    return arr


def _neighbor_average(f: np.ndarray) -> np.ndarray:
    padded = np.pad(f, 1, mode="reflect")
    h, w = f.shape
    out = np.zeros_like(f)
    for di, dj, wgt in _AVG_WEIGHTS:
        out += wgt * padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
    return out


def _central_gradients(img: np.ndarray):
    padded = np.pad(img, 1, mode="reflect")
    h, w = img.shape
    gx = 0.5 * (padded[1:1 + h, 2:2 + w] - padded[1:1 + h, 0:w])
    gy = 0.5 * (padded[2:2 + h, 1:1 + w] - padded[0:h, 1:1 + w])
    return gx, gy


def horn_schunck(pair: ImagePair, smoothness: float = HS_DEFAULT_SMOOTHNESS,
                 iterations: int = HS_DEFAULT_ITERATIONS) -> FlowField:
    """Horn-Schunck flow between the pair, in pixels per year.

    Spatial gradients are central differences of the two-frame mean with
    reflective borders; the temporal gradient is the forward difference.
    Starting from zero flow, each Jacobi sweep replaces the field by its
    neighbourhood average corrected along the image gradient.  The raw
    displacement is divided by the scan gap, so identical images yield an
    exactly zero field.
    """
    if not smoothness > 0:
        raise DataError(f"smoothness must be positive, got {smoothness}")
    if iterations < 1:
        raise DataError(f"need at least one iteration, got {iterations}")
    i1 = pair.first[0]
    i2 = pair.second[0]
    gx, gy = _central_gradients(0.5 * (i1 + i2))
    gt = i2 - i1
    denom = smoothness ** 2 + gx * gx + gy * gy

    u = np.zeros_like(i1)
    v = np.zeros_like(i1)
    for _ in range(iterations):
        u_avg = _neighbor_average(u)
        v_avg = _neighbor_average(v)
        scale = (gx * u_avg + gy * v_avg + gt) / denom
        u = u_avg - gx * scale
        v = v_avg - gy * scale
    return FlowField(u / pair.time_gap, v / pair.time_gap)


def divergence(flow: FlowField) -> ScalarFlowMap:
    """du/dx + dv/dy, central differences inside, one-sided at the borders."""
    u, v = flow.u, flow.v
    dudx = np.empty_like(u)
    dudx[:, 1:-1] = 0.5 * (u[:, 2:] - u[:, :-2])
    dudx[:, 0] = u[:, 1] - u[:, 0]
    dudx[:, -1] = u[:, -1] - u[:, -2]
    dvdy = np.empty_like(v)
    dvdy[1:-1, :] = 0.5 * (v[2:, :] - v[:-2, :])
    dvdy[0, :] = v[1, :] - v[0, :]
    dvdy[-1, :] = v[-1, :] - v[-2, :]
    return ScalarFlowMap(dudx + dvdy)


def standardize_cohort(maps):
    """Centers and scales all maps by the pooled scalar mean and std.

    The statistics are computed over every pixel of every map (population
    std) and returned so future inputs can be put on the same scale.
    """
    if len(maps) < 2:
        raise DataError(f"need at least two maps to standardize, got {len(maps)}")
    pooled = np.concatenate([m.values.reshape(-1) for m in maps])
    mean = float(pooled.mean())
    std = float(pooled.std())
    if std == 0.0:
        raise DataError("cohort has zero variance; cannot standardize")
    standardized = [ScalarFlowMap((m.values - mean) / std) for m in maps]
    return standardized, mean, std


def standardize_conditions(conditions):
    """Standardizes each condition column to mean 0, variance 1.

    ``conditions`` is (n, k) with one row per subject (for this pipeline
    k = 2: age at first scan, scan time gap).  Returns the standardized
    array plus the per-column means and stds for reuse on new subjects.
    """
    conds = np.asarray(conditions, dtype=np.float64)
    if conds.ndim != 2 or conds.shape[0] < 2:
        raise DataError(f"need an (n >= 2, k) condition array, got {conds.shape}")
    means = conds.mean(axis=0)
    stds = conds.std(axis=0)
    if np.any(stds == 0.0):
        raise DataError("a condition column has zero variance")
    return (conds - means) / stds, means, stds


def conditions_of(pairs) -> np.ndarray:
    """(age, time_gap) rows extracted from a list of image pairs."""
    return np.array([[p.age_at_first, p.time_gap] for p in pairs], dtype=np.float64)
