"""Subject-centric crops and gradient-domain paste-back.

The crop rectangle itself is the blend region: its outermost pixel ring is the
Dirichlet boundary (taken from the target) and every pixel inside that ring is
an unknown of a 4-neighbour discrete Poisson equation, solved per channel by
Jacobi-preconditioned conjugate gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse

from .imgcore import Image
from .matching import MatchSet

BLEND_MODES = ("seamless", "mixed", "direct")
FEATHER_PX = 4


class SubjectNotLocalizedError(ValueError):
    def __init__(self, msg: str = "subject not localized"):
        super().__init__(msg)


class RegionError(ValueError):
    pass


class PoissonConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"conjugate gradient did not converge: relative residual {residual:.3e} "
                         f"after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class CropConfig:
    margin: float = 0.15
    snap: int = 8
    min_size: int = 64
    min_inliers: int = 4

    def __post_init__(self):
        if self.margin < 0 or self.snap < 1 or self.min_size < 1:
            raise ValueError("invalid crop configuration")


@dataclass(frozen=True)
class CropRegion:
    x0: int
    y0: int
    w: int
    h: int
    source_w: int
    source_h: int
    margin_applied: float = 0.0
    snap: int = 1
    clamped: bool = False

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise RegionError("region must be at least 1x1")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.w > self.source_w or self.y0 + self.h > self.source_h:
            raise RegionError(f"region {self.box} outside {self.source_w}x{self.source_h} image")

    @property
    def box(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x0 + self.w, self.y0 + self.h

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CropRegion":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def full(cls, img: Image) -> "CropRegion":
        return cls(0, 0, img.width, img.height, img.width, img.height)


def _snap_axis(lo: float, hi: float, size: int, cfg: CropConfig) -> tuple[int, int, bool]:
    """One axis of :func:`subject_crop`: returns (start, length, clamped)."""
    extent = hi - lo
    start = math.floor(lo - cfg.margin * extent)
    stop = math.ceil(hi + cfg.margin * extent) + 1
    if stop - start < cfg.min_size:
        centre = (lo + hi + 1) / 2.0
        start = math.floor(centre - cfg.min_size / 2.0)
        stop = start + cfg.min_size
    half = max(1, cfg.snap // 2)
    start = (start // half) * half
    length = math.ceil((stop - start) / cfg.snap) * cfg.snap
    # Keep a one-pixel ring of the image outside the region for the Dirichlet boundary.
    avail = size - 2
    clamped = False
    max_len = (avail // cfg.snap) * cfg.snap
    if max_len < 1:
        raise RegionError(f"image side {size} too small for a crop with snap {cfg.snap}")
    if length > max_len:
        length, clamped = max_len, True
    if start < 1:
        start, clamped = 1, True
    if start + length > size - 1:
        start, clamped = size - 1 - length, True
    return start, length, clamped


def crop_from_points(pts: np.ndarray, img_dims: tuple[int, int], cfg: CropConfig | None = None) -> CropRegion:
    """Snapped, margin-expanded bounding box of ``pts`` inside a ``(width, height)`` image."""
    cfg = cfg or CropConfig()
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    if len(pts) < cfg.min_inliers:
        raise SubjectNotLocalizedError(f"subject not localized ({len(pts)} inliers < {cfg.min_inliers})")
    width, height = img_dims
    x0, w, cx = _snap_axis(pts[:, 0].min(), pts[:, 0].max(), width, cfg)
    y0, h, cy = _snap_axis(pts[:, 1].min(), pts[:, 1].max(), height, cfg)
    return CropRegion(x0, y0, w, h, width, height, cfg.margin, cfg.snap, cx or cy)


def subject_crop(verified: MatchSet, kps_gen=None, img_dims: tuple[int, int] | None = None,
                 cfg: CropConfig | None = None, subject_dims: tuple[int, int] | None = None) -> CropRegion:
    """Crop around the verified inliers as seen in the generated (``b``) image.

    The inlier bounding box is expanded by ``margin`` times its extent on every
    side (floor/ceil to whole pixels, end inclusive), widened to ``min_size``
    around its centre if smaller, its origin aligned down to ``snap // 2`` and
    its size rounded up to a multiple of ``snap``. The result is then shifted,
    or shrunk by whole snaps, to leave a one-pixel ring of the image outside
    it; ``clamped`` records that this happened.

    Inliers never sit within the descriptor border of the subject's edges
    and may cluster on part of it. Passing ``subject_dims`` (the reference
    image's ``(width, height)``) adds the subject frame's corners, mapped by
    the verified model and clipped to the image, to the point set, so the
    box covers the whole subject.
    """
    if img_dims is None:
        if kps_gen is None:
            raise ValueError("img_dims or kps_gen is required")
        img_dims = (kps_gen.width, kps_gen.height)
    if kps_gen is not None and len(verified.matches) and len(kps_gen):
        idx = [m.idx_b for m, keep in zip(verified.matches, verified.inlier_mask) if keep]
        pts = kps_gen.xy[idx] if idx else np.zeros((0, 2))
    else:
        pts = verified.pts_b[verified.inlier_mask]
    cfg = cfg or CropConfig()
    if subject_dims is not None and verified.model is not None and len(pts) >= cfg.min_inliers:
        sw, sh = subject_dims
        corners = verified.model.apply(np.array([[0.0, 0.0], [sw - 1, 0.0], [0.0, sh - 1], [sw - 1, sh - 1]]))
        if np.all(np.isfinite(corners)):
            corners = np.clip(corners, 0.0, [img_dims[0] - 1, img_dims[1] - 1])
            pts = np.vstack([pts, corners])
    return crop_from_points(pts, img_dims, cfg)


def extract_crop(img: Image, r: CropRegion) -> Image:
    if r.x0 + r.w > img.width or r.y0 + r.h > img.height or r.x0 < 0 or r.y0 < 0:
        raise RegionError(f"region {r.box} outside {img.width}x{img.height} image")
    ys, xs = r.slices
    return Image(img.data[ys, xs])


def paste_crop(img: Image, patch: Image, r: CropRegion) -> Image:
    """Plain copy of ``patch`` into ``img`` at ``r`` (no blending)."""
    _check_patch(img, patch, r, need_ring=False)
    out = img.data.copy()
    ys, xs = r.slices
    out[ys, xs] = patch.data
    return Image(out)


@dataclass(eq=False)
class LinearSystem:
    """Discrete Poisson system over an ``interior_shape`` grid, one RHS column per channel."""

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    interior_shape: tuple[int, int]

    @property
    def n_unknowns(self) -> int:
        return self.matrix.shape[0]


@dataclass(eq=False)
class PoissonSolution:
    x: np.ndarray
    iterations: int
    residual: float


def laplacian_matrix(ih: int, iw: int) -> sparse.csr_matrix:
    """5-point negative Laplacian (4 on the diagonal) with Dirichlet neighbours eliminated."""
    def tri(n):
        return sparse.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    return (sparse.kron(sparse.identity(ih), tri(iw)) + sparse.kron(tri(ih), sparse.identity(iw))).tocsr()


def _edge_guidance(patch: np.ndarray, target: np.ndarray | None, mode: str) -> np.ndarray:
    """Sum over the four neighbours q of v_pq at interior pixels p, shape (ih, iw, C)."""
    c = patch[1:-1, 1:-1]
    total = np.zeros_like(c)
    shifts = ((slice(0, -2), slice(1, -1)), (slice(2, None), slice(1, -1)),
              (slice(1, -1), slice(0, -2)), (slice(1, -1), slice(2, None)))
    for ys, xs in shifts:
        v = c - patch[ys, xs]
        if mode == "mixed":
            vt = target[1:-1, 1:-1] - target[ys, xs]
            v = np.where(np.abs(vt) > np.abs(v), vt, v)
        total += v
    return total


def build_poisson_system(boundary: np.ndarray, patch: np.ndarray, mode: str = "seamless") -> LinearSystem:
    """System for ``laplacian(f) = div(g)`` inside a rectangle.

    ``boundary`` supplies the Dirichlet values on the rectangle's outer ring
    (its interior values are ignored except by ``mixed`` guidance); ``patch``
    supplies the guidance gradients. Both are (h, w, C) with h, w >= 3.
    """
    if boundary.shape != patch.shape:
        raise ValueError("boundary and patch shapes differ")
    if mode not in ("seamless", "mixed"):
        raise ValueError(f"unknown guidance mode {mode!r}")
    h, w = boundary.shape[:2]
    if h < 3 or w < 3:
        raise ValueError("need at least one interior pixel")
    ring = boundary.copy()
    ring[1:-1, 1:-1] = 0.0
    bsum = ring[:-2, 1:-1] + ring[2:, 1:-1] + ring[1:-1, :-2] + ring[1:-1, 2:]
    rhs = _edge_guidance(patch, boundary, mode) + bsum
    ih, iw = h - 2, w - 2
    return LinearSystem(laplacian_matrix(ih, iw), rhs.reshape(ih * iw, -1), (ih, iw))


def conjugate_gradient(a, b: np.ndarray, tol: float = 1e-6, max_iters: int | None = None,
                       x0: np.ndarray | None = None) -> tuple[np.ndarray, int, float]:
    """Jacobi-preconditioned CG for one right-hand side.

    Stops once ``||r|| / ||b|| <= tol``; raises :class:`PoissonConvergenceError`
    after ``max_iters`` (default ``10 * n``).
    """
    n = b.shape[0]
    max_iters = 10 * n if max_iters is None else max_iters
    inv_diag = 1.0 / a.diagonal()
    x = np.zeros(n) if x0 is None else x0.astype(np.float64).copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    r = b - a @ x
    res = np.linalg.norm(r) / bnorm
    if res <= tol:
        return x, 0, res
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iters + 1):
        ap = a @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, it, res
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise PoissonConvergenceError(res, max_iters)


def solve_poisson(system: LinearSystem, tol: float = 1e-6, max_iters: int | None = None) -> PoissonSolution:
    if system.n_unknowns < 1:
        raise ValueError("system has no unknowns")
    cols, iters, worst = [], 0, 0.0
    for c in range(system.rhs.shape[1]):
        x, it, res = conjugate_gradient(system.matrix, system.rhs[:, c], tol, max_iters)
        cols.append(x)
        iters = max(iters, it)
        worst = max(worst, res)
    return PoissonSolution(np.stack(cols, axis=1), iters, worst)


def _check_patch(target: Image, patch: Image, r: CropRegion, need_ring: bool) -> None:
    if (patch.width, patch.height) != (r.w, r.h):
        raise RegionError(f"patch is {patch.width}x{patch.height}, region is {r.w}x{r.h}")
    if patch.channels != target.channels:
        raise RegionError("patch and target channel counts differ")
    if (r.source_w, r.source_h) != (target.width, target.height):
        raise RegionError("region was computed for a different image size")
    if need_ring and (r.x0 < 1 or r.y0 < 1 or r.x0 + r.w > target.width - 1 or r.y0 + r.h > target.height - 1):
        raise RegionError(f"region {r.box} touches the image border")


def feather_weights(h: int, w: int, width: int = FEATHER_PX) -> np.ndarray:
    """Linear ramp from 0 on the region's outer ring to 1 at ``width`` px inside."""
    dy = np.minimum(np.arange(h), np.arange(h)[::-1])
    dx = np.minimum(np.arange(w), np.arange(w)[::-1])
    d = np.minimum(dy[:, None], dx[None, :])
    return np.minimum(1.0, d / float(width))


def poisson_blend(target: Image, patch: Image, r: CropRegion, mode: str = "seamless", tol: float = 1e-6,
                  max_iters: int | None = None) -> Image:
    """Blend ``patch`` into ``target`` over region ``r``.

    ``seamless`` follows the patch gradients, ``mixed`` takes whichever of the
    patch and target gradients is larger per edge, ``direct`` skips the solve
    and feathers linearly over 4 px. Pixels outside ``r`` and on its outer ring
    are left bit-identical; the solved interior is clamped to [0, 1].
    """
    if mode not in BLEND_MODES:
        raise ValueError(f"unknown blend mode {mode!r}")
    _check_patch(target, patch, r, need_ring=True)
    ys, xs = r.slices
    region = target.data[ys, xs]
    out = target.data.copy()
    if mode == "direct":
        a = feather_weights(r.h, r.w)[:, :, None]
        out[ys, xs] = a * patch.data + (1.0 - a) * region
        return Image(out)
    if r.w < 3 or r.h < 3:
        return target
    system = build_poisson_system(region, patch.data, mode)
    sol = solve_poisson(system, tol, max_iters)
    ih, iw = system.interior_shape
    out[r.y0 + 1:r.y0 + 1 + ih, r.x0 + 1:r.x0 + 1 + iw] = np.clip(sol.x.reshape(ih, iw, -1), 0.0, 1.0)
    return Image(out)
