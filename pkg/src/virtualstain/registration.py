"""Co-registration of autofluorescence images to brightfield stained images.

Coordinates are ``(y, x)`` pixels. Every transform maps a point ``p`` on the
fixed (reference) grid to a point in the moving image, and resampling reads
``moving(T(p))``. The pipeline runs coarse cross-correlation matching, then
mutual-information affine registration, then block-wise elastic registration.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from .datapipe import AF_PALETTE, PALETTES, from_tensor4, to_tensor4, ycbcr_to_rgb
from .engine import frozen


class RegistrationError(RuntimeError):
    """Base class; ``stage`` names the pipeline stage that failed."""

    stage = "registration"


class EmptyTissueError(RegistrationError):
    stage = "tissue_mask"


class DegenerateInputError(RegistrationError):
    stage = "normalize"


class LowConfidenceError(RegistrationError):
    stage = "coarse_match"


class NonConvergenceError(RegistrationError):
    stage = "affine"


class ElasticRegistrationError(RegistrationError):
    stage = "elastic"


class PipelineStageError(RegistrationError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"registration stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


# --------------------------------------------------------------------------
# tissue detection and normalization
# --------------------------------------------------------------------------


@dataclass
class TissueMask:
    mask: np.ndarray
    threshold: float

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(values, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = s0 / w0
        m1 = (s0[-1] - s0) / w1
        between = w0 * w1 * (m0 - m1) ** 2
    between = np.nan_to_num(between[:-1], nan=-1.0)
    return float(edges[1:][np.argmax(between)]) if between.size else float(edges[0])


def tissue_mask(
    img: np.ndarray,
    bright_background: bool = True,
    floor: float = 0.05,
    cap: float = 0.2,
    min_coverage: float = 0.01,
) -> TissueMask:
    """Tissue pixels of a grayscale image in [0, 1].

    Brightfield tissue is darker than the glass, so the signal is the inverted
    luminance; set ``bright_background=False`` for fluorescence. The Otsu
    threshold on that signal is clipped to ``[floor, cap]``: the floor keeps
    pure background from being split in two, the cap keeps an all-tissue
    image from being split along its own stain contrast.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"tissue_mask expects a non-empty 2-D image, got shape {img.shape}")
    signal = 1.0 - img if bright_background else img
    t = min(max(otsu_threshold(signal), floor), cap)
    mask = ndimage.binary_opening(signal > t, structure=np.ones((3, 3), bool))
    out = TissueMask(mask, t)
    if out.coverage < min_coverage:
        raise EmptyTissueError(f"tissue covers {out.coverage:.2%} of the image, below {min_coverage:.0%}")
    return out


def normalize_autofluorescence(img: np.ndarray, mask: TissueMask | np.ndarray) -> np.ndarray:
    """Subtract the tissue mean and divide by the tissue standard deviation."""
    img = np.asarray(img, dtype=np.float64)
    m = mask.mask if isinstance(mask, TissueMask) else np.asarray(mask, bool)
    if m.shape != img.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {img.shape[:2]}")
    if m.mean() < 0.01:
        raise EmptyTissueError("mask covers less than 1% of the image")
    vals = img[m]
    mu = vals.mean(axis=0)
    sd = vals.std(axis=0)
    if np.any(sd <= 1e-8):
        raise DegenerateInputError("tissue region has zero variance")
    return (img - mu) / sd


# --------------------------------------------------------------------------
# transforms and resampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineTransform:
    """``T(p) = M[:, :2] @ p + M[:, 2]`` with ``p = (y, x)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix has non-finite entries")
        if abs(np.linalg.det(m[:, :2])) <= 1e-6:
            raise ValueError("affine linear part is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, dy: float, dx: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, dy], [0.0, 1.0, dx]]))

    @classmethod
    def about_center(cls, center, angle_deg: float = 0.0, scale: float = 1.0, shift=(0.0, 0.0)) -> "AffineTransform":
        """Rotation and isotropic scale about ``center``, followed by ``shift``."""
        a = math.radians(angle_deg)
        lin = scale * np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        c = np.asarray(center, dtype=np.float64)
        t = c - lin @ c + np.asarray(shift, dtype=np.float64)
        return cls(np.column_stack([lin, t]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:, 2]

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map ``(..., 2)`` points."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.linear.T + self.offset

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """``self ∘ other``: apply ``other`` first."""
        lin = self.linear @ other.linear
        return AffineTransform(np.column_stack([lin, self.linear @ other.offset + self.offset]))

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform(np.column_stack([inv, -inv @ self.offset]))


def corner_error(a: AffineTransform, b: AffineTransform, shape: tuple[int, int]) -> float:
    """Mean distance between where ``a`` and ``b`` send the four image corners."""
    h, w = shape
    corners = np.array([[0, 0], [0, w - 1], [h - 1, 0], [h - 1, w - 1]], dtype=np.float64)
    return float(np.linalg.norm(a.apply(corners) - b.apply(corners), axis=1).mean())


@dataclass
class DeformationField:
    """Shifts ``(dy, dx)`` on a regular node grid, bilinearly interpolated in between.

    Node ``(i, j)`` sits at pixel ``origin + (i, j) * spacing``; beyond the
    outermost nodes the field is held constant.
    """

    shifts: np.ndarray  # (gy, gx, 2)
    spacing: float
    origin: tuple[float, float]
    image_shape: tuple[int, int]
    block_size: int = 16
    order: int = 1
    level_residuals: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.shifts = np.asarray(self.shifts, dtype=np.float64)
        if self.shifts.ndim != 3 or self.shifts.shape[2] != 2:
            raise ValueError(f"shift grid must be (gy, gx, 2), got {self.shifts.shape}")
        if not np.all(np.isfinite(self.shifts)):
            raise ValueError("deformation field has non-finite shifts")

    @classmethod
    def zeros(cls, image_shape, spacing: float = 8.0, block_size: int = 16) -> "DeformationField":
        h, w = image_shape
        gy, gx = int(math.ceil((h - 1) / spacing)) + 1, int(math.ceil((w - 1) / spacing)) + 1
        return cls(np.zeros((gy, gx, 2)), spacing, (0.0, 0.0), (h, w), block_size)

    def at(self, pts: np.ndarray) -> np.ndarray:
        """Shift at arbitrary ``(..., 2)`` pixel positions."""
        pts = np.asarray(pts, dtype=np.float64)
        c = [(pts[..., 0] - self.origin[0]) / self.spacing, (pts[..., 1] - self.origin[1]) / self.spacing]
        return np.stack(
            [ndimage.map_coordinates(self.shifts[..., k], c, order=self.order, mode="nearest") for k in range(2)], -1
        )

    def dense(self) -> np.ndarray:
        """Per-pixel ``(h, w, 2)`` shift."""
        return self.at(_grid(self.image_shape))


def _grid(shape) -> np.ndarray:
    h, w = shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([yy, xx], axis=-1)


def sample(img: np.ndarray, coords: np.ndarray, order: int = 1) -> np.ndarray:
    """Bilinear samples of ``img`` (2-D or channels-last) at ``(..., 2)`` coordinates; border-clamped."""
    img = np.asarray(img)
    c = [coords[..., 0], coords[..., 1]]
    if img.ndim == 2:
        return ndimage.map_coordinates(img.astype(np.float64, copy=False), c, order=order, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[..., k].astype(np.float64, copy=False), c, order=order, mode="nearest") for k in range(img.shape[2])],
        axis=-1,
    )


def warp(img: np.ndarray, transform, output_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Resample ``img`` at ``T(p)`` for every output pixel ``p``; out-of-bounds reads clamp to the border."""
    if isinstance(transform, AffineTransform):
        shape = output_shape or img.shape[:2]
        coords = transform.apply(_grid(shape))
    elif isinstance(transform, DeformationField):
        coords = _grid(transform.image_shape) + transform.dense()
    else:
        coords = np.asarray(transform, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise ValueError("a raw transform must be a (h, w, 2) coordinate map")
    if not np.all(np.isfinite(coords)):
        raise ValueError("transform produced non-finite coordinates")
    return sample(img, coords)


# --------------------------------------------------------------------------
# coarse matching
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CoarseMatch:
    offset: tuple[int, int]
    confidence: float

    def transform(self) -> AffineTransform:
        return AffineTransform.translation(*self.offset)


def ncc_surface(moving: np.ndarray, fixed: np.ndarray, min_overlap: float = 0.25):
    """NCC of the overlap for every integer offset ``d`` with ``moving[q]`` paired to ``fixed[q - d]``.

    Returns ``(ncc, dys, dxs)``; offsets whose overlap is smaller than
    ``min_overlap`` of the smaller image are set to -inf.
    """
    m = np.asarray(moving, dtype=np.float64)
    f = np.asarray(fixed, dtype=np.float64)
    hm, wm = m.shape
    hf, wf = f.shape
    S = (hm + hf - 1, wm + wf - 1)
    fft, ifft = np.fft.rfft2, np.fft.irfft2

    def xcorr(a, b):  # sum_q a[q] b[q - d], circular index d mod S
        return ifft(fft(a, S) * np.conj(fft(b, S)), S)

    om, of = np.ones_like(m), np.ones_like(f)
    n = np.round(xcorr(om, of))
    sm, sf = xcorr(m, of), xcorr(om, f)
    smm, sff = xcorr(m * m, of), xcorr(om, f * f)
    smf = xcorr(m, f)
    with np.errstate(divide="ignore", invalid="ignore"):
        num = smf - sm * sf / n
        den = np.sqrt(np.maximum(smm - sm * sm / n, 0) * np.maximum(sff - sf * sf / n, 0))
        ncc = num / den
    valid = (n >= min_overlap * min(m.size, f.size)) & (den > 1e-9 * n)
    ncc = np.where(valid, ncc, -np.inf)
    # unwrap circular offsets: index i stands for d = i for i < hm, else i - S
    dys = np.arange(S[0])
    dys = np.where(dys < hm, dys, dys - S[0])
    dxs = np.arange(S[1])
    dxs = np.where(dxs < wm, dxs, dxs - S[1])
    return ncc, dys, dxs


def coarse_match(moving: np.ndarray, fixed: np.ndarray, min_confidence: float = 0.2, min_overlap: float = 0.25) -> CoarseMatch:
    """Integer offset ``d`` with ``moving(p + d) ≈ fixed(p)`` at the global NCC peak."""
    ncc, dys, dxs = ncc_surface(moving, fixed, min_overlap)
    i, j = np.unravel_index(np.argmax(ncc), ncc.shape)
    conf = float(np.clip(ncc[i, j], -1.0, 1.0))
    if not conf >= min_confidence:
        raise LowConfidenceError(f"coarse match peak NCC {conf:.3f} below {min_confidence}")
    return CoarseMatch((int(dys[i]), int(dxs[j])), conf)


# --------------------------------------------------------------------------
# mutual-information affine registration
# --------------------------------------------------------------------------


def _bin_coords(v: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    return np.clip((v - lo) / max(hi - lo, 1e-12) * (bins - 1), 0.0, bins - 1 - 1e-9)


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 50, ranges=None) -> float:
    """MI in nats from a joint histogram with linear (two-bin) soft assignment on both axes."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if ranges is None:
        ranges = ((a.min(), a.max()), (b.min(), b.max()))
    ca = _bin_coords(a, *ranges[0], bins)
    cb = _bin_coords(b, *ranges[1], bins)
    ia, ib = ca.astype(np.intp), cb.astype(np.intp)
    ta, tb = ca - ia, cb - ib
    joint = np.zeros(bins * bins)
    for da, wa in ((0, 1 - ta), (1, ta)):
        for db, wb in ((0, 1 - tb), (1, tb)):
            joint += np.bincount((ia + da) * bins + ib + db, weights=wa * wb, minlength=bins * bins)
    p = joint.reshape(bins, bins) / joint.sum()
    pa, pb = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz])).sum())


@dataclass(frozen=True)
class AffineSearchConfig:
    levels: tuple[int, ...] = (4, 2, 1)  # sampling strides, coarse to fine
    bins: int = 50
    sigma0: float = 2.0  # initial mutation size in pixels of corner displacement
    sigma_min: float = 0.01
    max_evals: int = 1500  # per level
    grow: float = 1.5
    min_gain: float = 0.05  # nats above the shuffled baseline
    seed: int = 0


class _AffineObjective:
    """MI between ``fixed`` and ``moving`` warped by a parametrised affine, on a strided grid.

    Parameters are a 6-vector in pixel units: the first four perturb the
    linear part, scaled by the image radius so a unit step moves the corners
    by about a pixel; the last two are the translation. The linear part acts
    about the image centre.
    """

    def __init__(self, moving, fixed, base: AffineTransform, stride: int, bins: int):
        smooth = max(stride / 2.0, 0.5)
        self.moving = ndimage.gaussian_filter(np.asarray(moving, np.float64), smooth)
        fixed_s = ndimage.gaussian_filter(np.asarray(fixed, np.float64), smooth)
        h, w = fixed_s.shape
        self.center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        self.radius = 0.5 * math.hypot(h, w)
        ys, xs = np.arange(0, h, stride), np.arange(0, w, stride)
        self.pts = np.stack(np.meshgrid(ys, xs, indexing="ij"), -1).reshape(-1, 2).astype(np.float64)
        self.fvals = fixed_s[ys][:, xs].ravel()
        self.base = base
        self.bins = bins
        self.mshape = self.moving.shape
        self.ranges = ((self.fvals.min(), self.fvals.max()), (self.moving.min(), self.moving.max()))

    def transform(self, theta: np.ndarray) -> AffineTransform:
        lin = np.eye(2) + theta[:4].reshape(2, 2) / self.radius
        c = self.center
        local = AffineTransform(np.column_stack([lin, c - lin @ c + theta[4:]]))
        return self.base.compose(local)

    def __call__(self, theta: np.ndarray) -> float:
        t = self.transform(theta)
        q = t.apply(self.pts)
        inside = (q[:, 0] >= 0) & (q[:, 0] <= self.mshape[0] - 1) & (q[:, 1] >= 0) & (q[:, 1] <= self.mshape[1] - 1)
        if inside.mean() < 0.25:
            return -np.inf
        mv = ndimage.map_coordinates(self.moving, [q[inside, 0], q[inside, 1]], order=1, mode="nearest")
        return mutual_information(self.fvals[inside], mv, self.bins, self.ranges)


@dataclass
class AffineResult:
    transform: AffineTransform
    mi_init: float
    mi_final: float
    mi_shuffled: float
    evals: int


def affine_register(
    moving: np.ndarray,
    fixed: np.ndarray,
    init: AffineTransform | None = None,
    cfg: AffineSearchConfig = AffineSearchConfig(),
    *,
    return_result: bool = False,
):
    """Affine ``T`` maximising MI between ``fixed(p)`` and ``moving(T(p))``.

    A (1+1) evolution strategy with the one-fifth success rule searches the
    six affine parameters, coarse to fine over sampling strides. The result
    never scores below ``init``. Raises :class:`NonConvergenceError` when the
    step size fails to collapse within the budget, or when the best MI is
    within ``cfg.min_gain`` nats of the MI obtained after shuffling the moving
    samples (no shared structure).
    """
    init = init or AffineTransform.identity()
    rng = np.random.default_rng(cfg.seed)
    base = init
    total_evals = 0
    shrink = cfg.grow ** -0.25
    for stride in cfg.levels:
        obj = _AffineObjective(moving, fixed, base, stride, cfg.bins)
        theta = np.zeros(6)
        best = obj(theta)
        sigma = cfg.sigma0 if stride == cfg.levels[0] else cfg.sigma0 * stride / cfg.levels[0]
        sigma = max(sigma, 4 * cfg.sigma_min)
        evals = 0
        while sigma > cfg.sigma_min and evals < cfg.max_evals:
            cand = theta + sigma * rng.standard_normal(6)
            val = obj(cand)
            evals += 1
            if val > best:
                theta, best = cand, val
                sigma *= cfg.grow
            else:
                sigma *= shrink
        total_evals += evals
        if sigma > cfg.sigma_min:
            raise NonConvergenceError(f"affine search did not converge within {cfg.max_evals} evaluations at stride {stride}")
        base = obj.transform(theta)

    # score init and result under the same finest-level objective; never return worse than init
    final = _AffineObjective(moving, fixed, AffineTransform.identity(), cfg.levels[-1], cfg.bins)

    def score(t: AffineTransform):
        q = t.apply(final.pts)
        mv = ndimage.map_coordinates(final.moving, [q[:, 0], q[:, 1]], order=1, mode="nearest")
        return mutual_information(final.fvals, mv, cfg.bins, final.ranges), mv

    mi_init, _ = score(init)
    mi_final, mv = score(base)
    if mi_init > mi_final:
        base, (mi_final, mv) = init, score(init)
    mi_shuf = mutual_information(final.fvals, rng.permutation(mv), cfg.bins, final.ranges)
    if mi_final - mi_shuf < cfg.min_gain:
        raise NonConvergenceError(
            f"mutual information {mi_final:.4f} is within {cfg.min_gain} nats of the shuffled baseline {mi_shuf:.4f}"
        )
    res = AffineResult(base, float(mi_init), float(mi_final), float(mi_shuf), total_evals)
    return res if return_result else base


# --------------------------------------------------------------------------
# elastic pyramidal registration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ElasticConfig:
    block_sizes: tuple[int, ...] = (64, 32, 16)
    iterations: int = 3
    min_ncc: float = 0.5
    min_texture: float = 1e-3  # template std relative to the image std
    max_low_confidence: float = 0.5
    outlier_px: float = 1.0  # deviation from the neighbourhood median that voids a match...
    outlier_per_spacing: float = 0.125  # ...raised in proportion to the node spacing


def _ncc_search(window: np.ndarray, template: np.ndarray) -> np.ndarray:
    """NCC of ``template`` against every same-size sub-block of ``window`` (valid positions)."""
    b0, b1 = template.shape
    t = template - template.mean()
    tn = math.sqrt(float((t * t).sum()))
    num = fftconvolve(window, t[::-1, ::-1], mode="valid")
    ii = np.pad(window, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    ii2 = np.pad(window * window, ((1, 0), (1, 0))).cumsum(0).cumsum(1)

    def box(a):
        return a[b0:, b1:] - a[:-b0, b1:] - a[b0:, :-b1] + a[:-b0, :-b1]

    s, s2 = box(ii), box(ii2)
    var = np.maximum(s2 - s * s / (b0 * b1), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / (np.sqrt(var) * tn)
    return np.where(var > 1e-12, out, -1.0)


def _parabolic(cm: float, c0: float, cp: float) -> float:
    den = cm - 2.0 * c0 + cp
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (cm - cp) / den, -0.5, 0.5))


def _median_filter(inc: np.ndarray, ok: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Void matches that disagree with the median of their confident 3x3 neighbourhood."""
    vals = np.where(ok[..., None], inc, np.nan)
    padded = np.pad(vals, ((1, 1), (1, 1), (0, 0)), constant_values=np.nan)
    gy, gx = ok.shape
    stack = np.stack([padded[i : i + gy, j : j + gx] for i in range(3) for j in range(3)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN neighbourhoods
        med = np.nanmedian(stack, axis=0)
    bad = ok & (np.linalg.norm(np.nan_to_num(inc - med), axis=-1) > tol)
    keep = ok & ~bad
    return np.where(keep[..., None], inc, 0.0), keep


def _residual(a: np.ndarray, b: np.ndarray, margin: int) -> float:
    sl = (slice(margin, a.shape[0] - margin or None), slice(margin, a.shape[1] - margin or None))
    return float(np.mean((a[sl] - b[sl]) ** 2))


def _match_blocks(warped: np.ndarray, fixed: np.ndarray, b: int, r: int, cfg: ElasticConfig, gstd: float):
    ys, xs, origin, step = _node_coords(fixed.shape, b)
    padded = np.pad(warped, r, mode="edge")
    inc = np.zeros((len(ys), len(xs), 2))
    ok = np.zeros((len(ys), len(xs)), bool)
    for i, y0 in enumerate(ys):
        for j, x0 in enumerate(xs):
            tmpl = fixed[y0 : y0 + b, x0 : x0 + b]
            if tmpl.std() < cfg.min_texture * gstd:
                continue
            win = padded[y0 : y0 + b + 2 * r, x0 : x0 + b + 2 * r]
            c = _ncc_search(win, tmpl)
            pi, pj = np.unravel_index(np.argmax(c), c.shape)
            if c[pi, pj] < cfg.min_ncc or pi in (0, 2 * r) or pj in (0, 2 * r):
                continue
            dy = pi - r + _parabolic(c[pi - 1, pj], c[pi, pj], c[pi + 1, pj])
            dx = pj - r + _parabolic(c[pi, pj - 1], c[pi, pj], c[pi, pj + 1])
            inc[i, j] = (dy, dx)
            ok[i, j] = True
    inc, ok = _median_filter(inc, ok, max(cfg.outlier_px, cfg.outlier_per_spacing * step))
    return inc, ok, origin, step


def _node_coords(shape, b: int):
    step = b // 2
    ys = np.arange(0, shape[0] - b + 1, step)
    xs = np.arange(0, shape[1] - b + 1, step)
    return ys, xs, (ys[0] + (b - 1) / 2.0, xs[0] + (b - 1) / 2.0), float(step)


def elastic_register(moving: np.ndarray, fixed: np.ndarray, cfg: ElasticConfig = ElasticConfig()) -> DeformationField:
    """Coarse-to-fine block NCC matching; returns ``u`` with ``moving(p + u(p)) ≈ fixed(p)``.

    At each level the image is cut into half-overlapping blocks. Each block's
    best shift (refined to subpixel by a parabola through the peak) is added
    to the current field; blocks without texture or with a weak peak add
    nothing and so keep the shift inherited from the coarser level. An update
    that makes the intensity residual worse is rejected, so the residual never
    increases from level to level.

    The field lives on the node lattice of the finest block size; coarser
    lattices coincide with subsets of its nodes, so coarse updates transfer
    exactly.
    """
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape:
        raise ValueError(f"elastic registration needs equal shapes, got {moving.shape} and {fixed.shape}")
    h, w = fixed.shape
    bf = cfg.block_sizes[-1]
    if any(b % bf for b in cfg.block_sizes):
        raise ValueError("every block size must be a multiple of the finest one")
    if min(h, w) < max(cfg.block_sizes):
        raise ValueError(f"image {h}x{w} is smaller than the coarsest block size {max(cfg.block_sizes)}")
    ys, xs, origin, step = _node_coords((h, w), bf)
    nodes = np.stack(np.meshgrid(ys + (bf - 1) / 2.0, xs + (bf - 1) / 2.0, indexing="ij"), -1)
    U = DeformationField(np.zeros(nodes.shape), step, origin, (h, w), bf)
    gstd = float(fixed.std()) or 1.0
    margin = bf // 2
    grid = _grid((h, w))
    current = moving
    res_current = _residual(moving, fixed, margin)
    residuals = [res_current]
    for level, b in enumerate(cfg.block_sizes):
        r = max(b // 4, 2)
        for it in range(cfg.iterations):
            inc, ok, inc_origin, inc_step = _match_blocks(current, fixed, b, r, cfg, gstd)
            if level == 0 and it == 0 and (1.0 - ok.mean()) > cfg.max_low_confidence:
                raise ElasticRegistrationError(f"{1.0 - ok.mean():.0%} of blocks are low-confidence at the coarsest level")
            if not ok.any():
                break
            inc_field = DeformationField(inc, inc_step, inc_origin, (h, w), b)
            cand = DeformationField(U.shifts + inc_field.at(nodes), step, origin, (h, w), bf)
            warped = sample(moving, grid + cand.dense())
            res = _residual(warped, fixed, margin)
            if res >= res_current:
                break
            U, current, res_current = cand, warped, res
        residuals.append(res_current)
    U.level_residuals = residuals
    return U


# --------------------------------------------------------------------------
# multi-step pipeline
# --------------------------------------------------------------------------


class PaletteStainer:
    """Fixed colour mapping from autofluorescence to an H&E-like rendering.

    Each pixel takes the H&E colour of its nearest autofluorescence palette
    entry. It stands in for a trained rough virtual staining network when
    none is available; any callable mapping ``(h, w, 2)`` to ``(h, w, 3)``
    (or a generator :class:`~virtualstain.nets.NetworkState`) can replace it.
    """

    def __init__(self, af_palette: np.ndarray = AF_PALETTE, rgb_palette: np.ndarray = PALETTES["HE"]):
        self.af_palette = np.asarray(af_palette, dtype=np.float64)
        self.rgb_palette = np.asarray(rgb_palette, dtype=np.float64)

    def __call__(self, af: np.ndarray) -> np.ndarray:
        d = ((np.asarray(af)[..., None, :] - self.af_palette) ** 2).sum(-1)
        return self.rgb_palette[np.argmin(d, axis=-1)]


def _network_stainer(net) -> Callable[[np.ndarray], np.ndarray]:
    def run(af: np.ndarray) -> np.ndarray:
        with frozen(net.parameters()):
            out = net(to_tensor4(af.astype(np.float32))).data
        return ycbcr_to_rgb(from_tensor4(out)[0])

    return run


def histogram_match(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Monotone remapping of ``source`` so its value distribution matches ``reference``."""
    s = np.asarray(source, dtype=np.float64)
    ranks = np.argsort(np.argsort(s.ravel(), kind="stable"), kind="stable")
    q = (ranks + 0.5) / s.size
    ref = np.sort(np.asarray(reference, dtype=np.float64).ravel())
    return np.interp(q, (np.arange(ref.size) + 0.5) / ref.size, ref).reshape(s.shape)


@dataclass
class RegistrationResult:
    affine: AffineTransform
    field: DeformationField
    registered_af: np.ndarray  # autofluorescence resampled onto the stained grid
    stained: np.ndarray
    report: dict

    def coordinates(self) -> np.ndarray:
        """Composite map ``p -> A(p + u(p))`` on the stained grid."""
        return self.affine.apply(_grid(self.field.image_shape) + self.field.dense())


def register_pipeline(
    af_stack: np.ndarray,
    stained: np.ndarray,
    rough_stainer=None,
    *,
    affine_cfg: AffineSearchConfig = AffineSearchConfig(),
    elastic_cfg: ElasticConfig = ElasticConfig(),
) -> RegistrationResult:
    """Align a 2-channel autofluorescence image (DAPI, Texas Red) to a stained RGB image.

    The stained image is the fixed reference. Stages: coarse NCC match of the
    normalised DAPI channel against the inverted stained luminance, MI affine
    refinement, then elastic registration. With a ``rough_stainer`` the
    elastic stage compares the rough virtual stain of the affine-aligned
    autofluorescence with the stained image (same modality); without one it
    compares the DAPI channel histogram-matched to the stained luminance,
    which is less accurate where the two modalities disagree in contrast.
    """
    af = np.asarray(af_stack, dtype=np.float64)
    st = np.asarray(stained, dtype=np.float64)
    if af.ndim != 3 or af.shape[2] != 2:
        raise ValueError(f"autofluorescence stack must be (h, w, 2), got {af.shape}")
    if st.ndim != 3 or st.shape[2] != 3:
        raise ValueError(f"stained image must be (h, w, 3), got {st.shape}")
    ratio = np.array(af.shape[:2]) / np.array(st.shape[:2])
    if np.any(ratio > 2) or np.any(ratio < 0.5):
        raise ValueError("images differ in size by more than a factor of two")

    def stage(name, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc

    report: dict = {}
    inv_lum = 1.0 - luminance(st)
    fixed_n = stage("tissue_mask", lambda: normalize_autofluorescence(inv_lum, tissue_mask(luminance(st))))
    dapi = af[..., 0]
    moving_n = stage("normalize", lambda: normalize_autofluorescence(dapi, tissue_mask(dapi, bright_background=False)))

    cm = stage("coarse_match", coarse_match, moving_n, fixed_n)
    report["coarse_offset"] = cm.offset
    report["coarse_confidence"] = cm.confidence
    aff = stage("affine", affine_register, moving_n, fixed_n, cm.transform(), affine_cfg, return_result=True)
    A = aff.transform
    report["mi_init"], report["mi_final"] = aff.mi_init, aff.mi_final

    af_aff = warp(af, A, st.shape[:2])
    if rough_stainer is not None:
        stainer = rough_stainer if callable(rough_stainer) and not hasattr(rough_stainer, "config") else _network_stainer(rough_stainer)
        rendered = stage("rough_stain", stainer, af_aff)
        moving_e = 1.0 - luminance(rendered)
        fixed_e = inv_lum
        report["elastic_modality"] = "rough_stain"
    else:
        moving_e = histogram_match(af_aff[..., 0], inv_lum)
        fixed_e = inv_lum
        report["elastic_modality"] = "histogram_matched"
    fld = stage("elastic", elastic_register, moving_e, fixed_e, elastic_cfg)
    report["elastic_residuals"] = list(fld.level_residuals)

    coords = A.apply(_grid(st.shape[:2]) + fld.dense())
    registered = sample(af, coords)
    return RegistrationResult(A, fld, registered, st, report)


# --------------------------------------------------------------------------
# plain-text transform files
# --------------------------------------------------------------------------


def dumps_transform(t) -> str:
    """Text form: an ``affine`` header and two matrix rows, or a ``field`` header and one node per line."""
    if isinstance(t, AffineTransform):
        rows = "\n".join(" ".join(repr(float(v)) for v in row) for row in t.matrix)
        return f"affine\n{rows}\n"
    if isinstance(t, DeformationField):
        gy, gx, _ = t.shifts.shape
        head = (
            f"field rows={gy} cols={gx} spacing={float(t.spacing)!r} origin={float(t.origin[0])!r},{float(t.origin[1])!r} "
            f"image={t.image_shape[0]},{t.image_shape[1]} block={t.block_size} order={t.order}"
        )
        lines = [head, "# row col dy dx"]
        for i in range(gy):
            for j in range(gx):
                lines.append(f"{i} {j} {float(t.shifts[i, j, 0])!r} {float(t.shifts[i, j, 1])!r}")
        return "\n".join(lines) + "\n"
    raise TypeError(f"cannot serialise {type(t).__name__}")


def loads_transform(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError("empty transform file")
    kind, *fields = lines[0].split()
    if kind == "affine":
        return AffineTransform(np.array([[float(v) for v in ln.split()] for ln in lines[1:3]]))
    if kind == "field":
        kv = dict(f.split("=", 1) for f in fields)
        gy, gx = int(kv["rows"]), int(kv["cols"])
        shifts = np.zeros((gy, gx, 2))
        for ln in lines[1:]:
            i, j, dy, dx = ln.split()
            shifts[int(i), int(j)] = (float(dy), float(dx))
        oy, ox = (float(v) for v in kv["origin"].split(","))
        h, w = (int(v) for v in kv["image"].split(","))
        return DeformationField(shifts, float(kv["spacing"]), (oy, ox), (h, w), int(kv["block"]), int(kv["order"]))
    raise ValueError(f"unknown transform kind '{kind}'")


def save_transform(path, t) -> Path:
    path = Path(path)
    path.write_text(dumps_transform(t))
    return path


def load_transform(path):
    return loads_transform(Path(path).read_text())
