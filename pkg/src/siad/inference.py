"""Hypothesis tests for detected anomaly regions.

Three p-values are computed for the mean contrast between flagged and
unflagged ROI pixels: the naive two-sided normal test (which ignores that
the region was chosen by looking at the same data and is therefore badly
anti-conservative), a Bonferroni correction over every mask the detector
could have produced, and the selective test, which conditions on the event
that the detector reproduces the observed mask.  The selective test works
along the line through the observation in the direction of the contrast:
the detector is decomposed into exact linear pieces there, the set of line
parameters that reproduce the mask is assembled interval by interval, and
the p-value comes from the normal distribution truncated to that set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .anomaly import AnomalyMask, RoiMask, Threshold, detect
from .errors import (DataError, DegenerateMaskError, NumericalDiagnosticError,
                     ShapeError)
from .model import ModelWeights
from .parametric import DEFAULT_PIECE_CAP, AffineLine, parametric_infer

DEFAULT_WINDOW_SIGMAS = 20.0
STATUS_TESTED = "tested"
STATUS_SKIPPED = "degenerate-skip"


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic pixel noise: covariance sigma2 times the identity."""

    sigma2: float
    provenance: str = "known-by-construction"

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise DataError(f"noise variance must be positive, got {self.sigma2}")
        if self.provenance not in ("known-by-construction", "estimated"):
            raise DataError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class TestSpec:
    """Contrast vector and statistic scale for one detected mask."""

    eta: np.ndarray
    sigma_t: float
    mask: AnomalyMask
    roi: RoiMask


@dataclass(frozen=True)
class TruncationSet:
    """Disjoint sorted z-intervals on which the detector output is the
    observed mask."""

    intervals: tuple

    def __post_init__(self):
        ivals = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        for lo, hi in ivals:
            if not lo < hi:
                raise DataError(f"empty truncation interval [{lo}, {hi}]")
        for (_, prev_hi), (lo, _) in zip(ivals[:-1], ivals[1:]):
            if not prev_hi < lo:
                raise DataError("truncation intervals overlap or are unsorted")
        object.__setattr__(self, "intervals", ivals)

    def __len__(self) -> int:
        return len(self.intervals)

    def contains(self, z: float, tol: float = 0.0) -> bool:
        return any(lo - tol <= z <= hi + tol for lo, hi in self.intervals)

    def total_length(self) -> float:
        return sum(hi - lo for lo, hi in self.intervals)


@dataclass(frozen=True)
class TestOutcome:
    """Everything the harness records for one subject."""

    status: str
    mask_size: int
    t_obs: float | None = None
    sigma_t: float | None = None
    p_naive: float | None = None
    p_bonferroni: float | None = None
    p_selective: float | None = None
    truncation: TruncationSet | None = None

    @property
    def tested(self) -> bool:
        return self.status == STATUS_TESTED

    @property
    def interval_count(self) -> int:
        return 0 if self.truncation is None else len(self.truncation)


def contrast_vector(mask: AnomalyMask, roi: RoiMask) -> np.ndarray:
    """Weights +1/|mask| on flagged ROI pixels, -1/|complement| on the rest
    of the ROI, zero outside; sums to zero by construction."""
    n = roi.member.size
    in_mask = mask.as_bool(n)
    if np.any(in_mask & ~roi.member):
        raise ShapeError("mask contains pixels outside the ROI")
    comp = roi.member & ~in_mask
    n_mask = int(in_mask.sum())
    n_comp = int(comp.sum())
    if n_mask == 0 or n_comp == 0:
        raise DegenerateMaskError(
            f"mask size {n_mask} of ROI {roi.count}: no testable contrast")
    eta = np.zeros(n, dtype=np.float64)
    eta[in_mask] = 1.0 / n_mask
    eta[comp] = -1.0 / n_comp
    return eta


def test_statistic(x: np.ndarray, eta: np.ndarray) -> float:
    """Inner product of image and contrast: mean over the mask minus mean
    over the in-ROI complement."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    eta = np.asarray(eta, dtype=np.float64).reshape(-1)
    if x.shape != eta.shape:
        raise ShapeError(f"lengths differ: {x.shape} vs {eta.shape}")
    return float(eta @ x)


def sigma_of_contrast(eta: np.ndarray, noise: NoiseModel) -> float:
    """Standard deviation of the contrast statistic under the noise model."""
    eta = np.asarray(eta, dtype=np.float64).reshape(-1)
    return float(math.sqrt(noise.sigma2 * float(eta @ eta)))


def make_test_spec(mask: AnomalyMask, roi: RoiMask, noise: NoiseModel) -> TestSpec:
    eta = contrast_vector(mask, roi)
    return TestSpec(eta=eta, sigma_t=sigma_of_contrast(eta, noise), mask=mask, roi=roi)


def estimate_noise(images) -> NoiseModel:
    """Pixelwise sample variance averaged over pixels, from held-out images."""
    stack = np.stack([np.asarray(im, dtype=np.float64).reshape(-1) for im in images])
    if stack.shape[0] < 2:
        raise DataError(f"need at least two images, got {stack.shape[0]}")
    per_pixel = stack.var(axis=0, ddof=1)
    return NoiseModel(sigma2=float(per_pixel.mean()), provenance="estimated")


def naive_pvalue(t_obs: float, sigma_t: float) -> float:
    """Two-sided normal tail probability, erfc-based for stability."""
    if not sigma_t > 0:
        raise DataError(f"sigma must be positive, got {sigma_t}")
    return float(math.erfc(abs(t_obs) / (sigma_t * math.sqrt(2.0))))


def bonferroni_pvalue(p_naive: float, roi_size: int) -> float:
    """Correction over all 2^roi_size masks the detector could output.

    Evaluated in log space so the astronomically large multiplicity cannot
    overflow: min(1, 2^K * p) = exp(min(0, ln p + K ln 2)).
    """
    if roi_size < 1:
        raise DataError(f"ROI size must be >= 1, got {roi_size}")
    if not 0 <= p_naive <= 1:
        raise DataError(f"p-value out of range: {p_naive}")
    if p_naive == 0.0:
        return 0.0
    return float(math.exp(min(0.0, math.log(p_naive) + roi_size * math.log(2.0))))


def line_decomposition(x: np.ndarray, eta: np.ndarray, noise: NoiseModel,
                       window_sigmas: float = DEFAULT_WINDOW_SIGMAS):
    """Splits the observation into the contrast coordinate and its nuisance.

    Returns ``(line, z_obs)`` with ``line.at(z_obs) == x`` and
    ``eta . line.at(z) == z`` for every z.  The window extends
    ``window_sigmas`` standard deviations past the observation on both
    sides of the origin, symmetric so each tail of the two-sided test is
    covered.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    eta = np.asarray(eta, dtype=np.float64).reshape(-1)
    sig = noise.sigma2 * float(eta @ eta)
    if sig <= 0:
        raise DataError("degenerate contrast: zero variance")
    sigma_t = math.sqrt(sig)
    z_obs = float(eta @ x)
    direction = (noise.sigma2 * eta) / sig
    offset = x - direction * z_obs
    half_width = abs(z_obs) + window_sigmas * sigma_t
    line = AffineLine(offset, direction, (-half_width, half_width))
    return line, z_obs


def truncation_region(line: AffineLine, cond, weights: ModelWeights,
                      threshold: Threshold, roi: RoiMask,
                      observed: AnomalyMask, z_obs: float,
                      max_pieces: int = DEFAULT_PIECE_CAP) -> TruncationSet:
    """All z in the window where the detector reproduces the observed mask.

    Each linear piece of the reconstruction gives affine per-pixel errors;
    their |error| = threshold crossings split the piece into sub-intervals
    of constant mask, and the sub-intervals whose mask equals the observed
    one are merged into maximal disjoint intervals.  The interval containing
    ``z_obs`` must be found, otherwise something is numerically wrong.
    """
    pieces = parametric_infer(line, cond, weights, max_pieces=max_pieces)
    roi_idx = roi.indices
    a_roi = line.a[roi_idx]
    b_roi = line.b[roi_idx]
    obs_roi = observed.as_bool(roi.member.size)[roi_idx]
    t = threshold.value

    merge_tol = 1e-12 * max(1.0, abs(line.window[0]), abs(line.window[1]))
    matched = []
    for piece in pieces:
        e_off = a_roi - piece.recon_offset[roi_idx]
        e_slope = b_roi - piece.recon_slope[roi_idx]
        sloped = e_slope != 0.0
        cands = []
        if np.any(sloped):
            eo, es = e_off[sloped], e_slope[sloped]
            for level in (t, -t):
                zc = (level - eo) / es
                cands.append(zc[(zc > piece.lo) & (zc < piece.hi)])
        bounds = np.concatenate([[piece.lo], np.sort(np.concatenate(cands))
                                 if cands else [], [piece.hi]])
        mids = 0.5 * (bounds[:-1] + bounds[1:])
        errs = e_off[:, None] + e_slope[:, None] * mids[None, :]
        agrees = np.all((np.abs(errs) > t) == obs_roi[:, None], axis=0)
        for k in np.flatnonzero(agrees):
            lo, hi = float(bounds[k]), float(bounds[k + 1])
            if hi <= lo:
                continue
            if matched and lo <= matched[-1][1] + merge_tol:
                matched[-1] = (matched[-1][0], max(matched[-1][1], hi))
            else:
                matched.append((lo, hi))

    if not matched:
        raise NumericalDiagnosticError("no interval reproduces the observed mask")
    cover_tol = 1e-9 * max(1.0, abs(z_obs))
    if not any(lo - cover_tol <= z_obs <= hi + cover_tol for lo, hi in matched):
        raise NumericalDiagnosticError(
            f"observation z={z_obs} not covered by its truncation set")
    return TruncationSet(tuple(matched))


def _right_tail_mass(lo: float, hi: float) -> float:
    """P(lo <= Z <= hi) for standard Z and 0 <= lo < hi, via stable log tails."""
    log_upper = log_ndtr(-lo)   # log P(Z >= lo)
    log_lower = log_ndtr(-hi)   # log P(Z >= hi)
    return float(math.exp(log_upper) * -math.expm1(log_lower - log_upper))


def _interval_mass(lo: float, hi: float) -> float:
    """Standard normal mass of [lo, hi], split at zero to avoid cancellation."""
    if lo >= 0.0:
        return _right_tail_mass(lo, hi)
    if hi <= 0.0:
        return _right_tail_mass(-hi, -lo)
    return _right_tail_mass(0.0, hi) + _right_tail_mass(0.0, -lo)


def truncated_normal_pvalue(z_obs: float, sigma_t: float,
                            trunc: TruncationSet) -> float:
    """Two-sided selective p-value from the truncated normal distribution.

    Computes P(|Z| >= |z_obs| and Z in S) / P(Z in S) for Z centered with
    standard deviation ``sigma_t`` and S the truncation set.  Interval
    masses come from differences of stable log tails and are accumulated
    with exact summation; the result is clamped to [0, 1].
    """
    if not sigma_t > 0:
        raise DataError(f"sigma must be positive, got {sigma_t}")
    cut = abs(z_obs) / sigma_t
    den_parts, num_parts = [], []
    for lo, hi in trunc.intervals:
        lo_u, hi_u = lo / sigma_t, hi / sigma_t
        den_parts.append(_interval_mass(lo_u, hi_u))
        # intersection with {|u| >= cut}: a left and a right segment
        right_lo = max(lo_u, cut)
        if right_lo < hi_u:
            num_parts.append(_interval_mass(right_lo, hi_u))
        left_hi = min(hi_u, -cut)
        if lo_u < left_hi:
            num_parts.append(_interval_mass(lo_u, left_hi))
    denominator = math.fsum(sorted(den_parts))
    if denominator < 1e-300:
        raise NumericalDiagnosticError("truncation set carries no probability mass")
    numerator = math.fsum(sorted(num_parts))
    return float(min(1.0, max(0.0, numerator / denominator)))


def selective_pvalue(x: np.ndarray, cond, weights: ModelWeights,
                     threshold: Threshold, roi: RoiMask, noise: NoiseModel,
                     window_sigmas: float = DEFAULT_WINDOW_SIGMAS,
                     max_pieces: int = DEFAULT_PIECE_CAP) -> TestOutcome:
    """Runs the detector once and computes all three p-values from its mask.

    An empty mask or a mask covering the whole ROI admits no contrast, so
    the subject is reported as a degenerate skip with no p-values.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mask = detect(x, cond, weights, threshold, roi)
    if len(mask) == 0 or len(mask) == roi.count:
        return TestOutcome(status=STATUS_SKIPPED, mask_size=len(mask))

    spec = make_test_spec(mask, roi, noise)
    t_obs = test_statistic(x, spec.eta)
    p_naive = naive_pvalue(t_obs, spec.sigma_t)
    p_bonf = bonferroni_pvalue(p_naive, roi.count)
    line, z_obs = line_decomposition(x, spec.eta, noise, window_sigmas)
    trunc = truncation_region(line, cond, weights, threshold, roi, mask,
                              z_obs, max_pieces=max_pieces)
    p_sel = truncated_normal_pvalue(z_obs, spec.sigma_t, trunc)
    return TestOutcome(status=STATUS_TESTED, mask_size=len(mask), t_obs=t_obs,
                       sigma_t=spec.sigma_t, p_naive=p_naive,
                       p_bonferroni=p_bonf, p_selective=p_sel, truncation=trunc)


def ks_statistic(pvals) -> float:
    """Sup distance between the empirical CDF of the p-values and U(0,1)."""
    arr = np.sort(np.asarray(pvals, dtype=np.float64).reshape(-1))
    if arr.size == 0:
        raise DataError("no p-values given")
    if np.any(arr < 0) or np.any(arr > 1):
        raise DataError("p-values must lie in [0, 1]")
    n = arr.size
    grid = np.arange(1, n + 1, dtype=np.float64) / n
    d_plus = float(np.max(grid - arr))
    d_minus = float(np.max(arr - (grid - 1.0 / n)))
    return max(d_plus, d_minus)
