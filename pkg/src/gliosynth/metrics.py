"""Image-quality and segmentation metrics, growth-map construction, and the
paired signed-rank test.

Pinned conventions (these vary across the literature, so they are fixed
here and mirrored by brute-force oracles in the tests):

* Otsu: histogram of ``n_bins`` equal-width bins over [min, max]; the
  returned threshold is the bin edge maximizing between-class variance;
  ties break toward the lower edge.
* HD95: boundaries are mask pixels with any background 8-neighbor (image
  border counts as background); directed distance is the 95th percentile
  (linear interpolation) of nearest-boundary distances; symmetrized by
  max and scaled by pixel spacing.
* SSIM: 7x7 uniform window, reflect padding, data range 1.0, population
  (divide-by-N) moments; region value is the mean of the SSIM map over
  pixels whose window center lies in the region.
* Signed-rank test: zero differences dropped, mid-ranks for ties, exact
  null by enumeration for n <= 20 (tie-aware), normal approximation with
  continuity correction above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion, uniform_filter
from scipy.spatial import cKDTree
from scipy.stats import norm, rankdata

from .errors import DegenerateInputError, InvalidInputError
from .image import BinaryMask, Image2D

SSIM_WINDOW = 7
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2
EXACT_WILCOXON_MAX_N = 20


# ---------------------------------------------------------------------------
# thresholding and morphology

def otsu_threshold(img: Image2D, n_bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance."""
    if n_bins < 2:
        raise InvalidInputError(f"n_bins must be >= 2, got {n_bins}")
    values = img.pixels
    vmin, vmax = float(values.min()), float(values.max())
    if vmin == vmax:
        raise DegenerateInputError("constant image has no threshold")
    hist, edges = np.histogram(values, bins=n_bins, range=(vmin, vmax))
    p = hist.astype(float) / hist.sum()
    omega = np.cumsum(p)                      # class-0 weight up to bin k-1
    mids = (edges[:-1] + edges[1:]) / 2.0
    mu = np.cumsum(p * mids)
    mu_total = mu[-1]
    # split k: class 0 = bins [0, k), class 1 = bins [k, n_bins)
    w0 = omega[:-1]
    w1 = 1.0 - w0
    with np.errstate(invalid="ignore", divide="ignore"):
        between = (mu_total * w0 - mu[:-1]) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -np.inf
    k = int(np.argmax(between))               # first max: lower threshold on ties
    return float(edges[k + 1])


@dataclass(frozen=True)
class DilationResult:
    mask: BinaryMask
    saturated: bool
    n_iterations: int


_STRUCT8 = np.ones((3, 3), dtype=bool)


def dilate_to_double_area(mask: BinaryMask) -> DilationResult:
    """Iterated 8-connected dilation until the area at least doubles.

    Saturates (flag set) when the image fills before doubling is reached.
    """
    area0 = mask.count()
    if area0 == 0:
        raise InvalidInputError("cannot dilate an empty mask")
    target = 2 * area0
    bits = mask.bits.copy()
    total = bits.size
    iterations = 0
    while bits.sum() < target and bits.sum() < total:
        bits = binary_dilation(bits, structure=_STRUCT8)
        iterations += 1
    final = int(bits.sum())
    return DilationResult(mask=BinaryMask(bits=bits, pixel_spacing=mask.pixel_spacing),
                          saturated=final < target, n_iterations=iterations)


# ---------------------------------------------------------------------------
# similarity

def _ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    win = SSIM_WINDOW
    mu_a = uniform_filter(a, size=win, mode="reflect")
    mu_b = uniform_filter(b, size=win, mode="reflect")
    var_a = uniform_filter(a * a, size=win, mode="reflect") - mu_a * mu_a
    var_b = uniform_filter(b * b, size=win, mode="reflect") - mu_b * mu_b
    cov = uniform_filter(a * b, size=win, mode="reflect") - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim_region(a: Image2D, b: Image2D, region: BinaryMask) -> float:
    """Mean structural similarity over window centers inside ``region``."""
    if a.pixels.shape != b.pixels.shape:
        raise InvalidInputError("images must share a shape")
    if region.bits.shape != a.pixels.shape:
        raise InvalidInputError("region must match image shape")
    n_region = region.count()
    if n_region == 0:
        raise InvalidInputError("region is empty")
    if n_region < SSIM_WINDOW * SSIM_WINDOW:
        raise DegenerateInputError(
            f"region smaller than one {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if min(a.pixels.shape) < SSIM_WINDOW:
        raise DegenerateInputError("image smaller than the filter window")
    smap = _ssim_map(a.pixels, b.pixels)
    return float(smap[region.bits].mean())


# ---------------------------------------------------------------------------
# boundary distance

def mask_boundary(mask: BinaryMask) -> np.ndarray:
    """Mask pixels with any 8-neighbor outside the mask (image border is
    outside); returned as an (n, 2) array of (row, col) indices."""
    eroded = binary_erosion(mask.bits, structure=_STRUCT8, border_value=0)
    return np.argwhere(mask.bits & ~eroded)


def _directed_d95(from_pts: np.ndarray, to_pts: np.ndarray) -> float:
    dists, _ = cKDTree(to_pts).query(from_pts)
    return float(np.percentile(dists, 95, method="linear"))


def hd95(a: BinaryMask, b: BinaryMask, spacing: float = None) -> float:
    """Symmetrized 95th-percentile boundary distance in millimetres."""
    if a.bits.shape != b.bits.shape:
        raise InvalidInputError("masks must share a shape")
    if a.count() == 0 or b.count() == 0:
        raise InvalidInputError("hd95 requires two nonempty masks")
    if spacing is None:
        spacing = a.pixel_spacing
    pa = mask_boundary(a)
    pb = mask_boundary(b)
    return max(_directed_d95(pa, pb), _directed_d95(pb, pa)) * spacing


# ---------------------------------------------------------------------------
# growth probability maps

@dataclass(frozen=True)
class ProbabilityMap:
    values: np.ndarray           # (H, W) in [0, 1]
    n_aggregated: int
    mode: str                    # "static" | "dynamic"
    pixel_spacing: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise InvalidInputError("probability map must be 2D")
        if np.any(v < 0) or np.any(v > 1):
            raise InvalidInputError("probability values must lie in [0, 1]")
        if self.n_aggregated < 1:
            raise InvalidInputError("n_aggregated must be >= 1")
        if self.mode not in ("static", "dynamic"):
            raise InvalidInputError(f"mode must be static|dynamic, got {self.mode!r}")

    def to_image(self) -> Image2D:
        return Image2D(pixels=self.values, pixel_spacing=self.pixel_spacing)


def binarized_difference(gen: Image2D, orig: Image2D) -> BinaryMask:
    """Otsu-binarized positive part of (generated - original).

    All-zero differences give an empty mask; a constant positive
    difference marks every pixel.
    """
    if gen.pixels.shape != orig.pixels.shape:
        raise InvalidInputError("images must share a shape")
    diff = np.maximum(gen.pixels - orig.pixels, 0.0)
    dmax, dmin = float(diff.max()), float(diff.min())
    if dmax == 0.0:
        return BinaryMask(bits=np.zeros_like(diff, dtype=bool),
                          pixel_spacing=orig.pixel_spacing)
    if dmax == dmin:
        return BinaryMask(bits=np.ones_like(diff, dtype=bool),
                          pixel_spacing=orig.pixel_spacing)
    thr = otsu_threshold(Image2D(pixels=diff, pixel_spacing=orig.pixel_spacing))
    return BinaryMask(bits=diff > thr, pixel_spacing=orig.pixel_spacing)


def aggregate_probability_map(masks, mode: str) -> ProbabilityMap:
    """Pixelwise mean of binary masks."""
    masks = list(masks)
    if not masks:
        raise InvalidInputError("need at least one mask to aggregate")
    shape = masks[0].bits.shape
    spacing = masks[0].pixel_spacing
    for m in masks[1:]:
        if m.bits.shape != shape:
            raise InvalidInputError("all masks must share a shape")
    stack = np.stack([m.bits for m in masks]).astype(float)
    return ProbabilityMap(values=stack.mean(axis=0), n_aggregated=len(masks),
                          mode=mode, pixel_spacing=spacing)


def threshold_probability_map(pm: ProbabilityMap, theta: float = 0.5) -> BinaryMask:
    """Pixels with consensus probability >= theta."""
    if not (0.0 <= theta <= 1.0):
        raise InvalidInputError(f"theta must be in [0, 1], got {theta}")
    return BinaryMask(bits=pm.values >= theta, pixel_spacing=pm.pixel_spacing)


# ---------------------------------------------------------------------------
# paired test

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float      # min(W+, W-)
    p_two_sided: float
    n: int                # nonzero differences used
    method: str           # "exact" | "normal"


def _exact_tail_probs(ranks: np.ndarray, w_plus: float):
    """P(W+ <= w) and P(W+ >= w) by subset-sum counting over sign flips.

    Mid-ranks are multiples of 0.5, so doubling gives integer weights.
    """
    scaled = np.rint(ranks * 2).astype(np.int64)
    total = int(scaled.sum())
    counts = np.zeros(total + 1, dtype=object)  # exact integer counts
    counts[0] = 1
    for s in scaled:
        new = counts.copy()
        new[s:] += counts[: total + 1 - s]
        counts = new
    denom = sum(counts)
    w2 = int(np.rint(w_plus * 2))
    p_le = sum(counts[: w2 + 1]) / denom
    p_ge = sum(counts[w2:]) / denom
    return float(p_le), float(p_ge)


def wilcoxon_signed_rank(x, y) -> WilcoxonResult:
    """Two-sided paired signed-rank test."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError("x and y must be 1D arrays of equal length")
    diff = x - y
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        raise DegenerateInputError("all paired differences are zero")
    if n < 5:
        raise InvalidInputError(f"need >= 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(diff))           # mid-ranks for ties
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= EXACT_WILCOXON_MAX_N:
        p_le, p_ge = _exact_tail_probs(ranks, w_plus)
        p = min(1.0, 2.0 * min(p_le, p_ge))
        return WilcoxonResult(statistic=statistic, p_two_sided=p, n=n, method="exact")

    mean = n * (n + 1) / 4.0
    # variance with tie correction over groups of equal |difference|
    _, tie_counts = np.unique(np.abs(diff), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(
        tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0:
        raise DegenerateInputError("zero variance in signed-rank statistic")
    delta = w_plus - mean
    z = (delta - 0.5 * np.sign(delta)) / np.sqrt(var) if delta != 0 else 0.0
    p = min(1.0, 2.0 * norm.sf(abs(z)))
    return WilcoxonResult(statistic=statistic, p_two_sided=float(p), n=n,
                          method="normal")
