"""Oriented FAST-9 corners over a scale pyramid with steered 256-bit BRIEF.

This is the built-in front end of the matcher. Everything is deterministic:
the BRIEF sampling pattern is generated from a fixed seed and tagged with
:data:`PATTERN_VERSION`; changing either is a breaking format change.
"""

from __future__ import annotations

import base64
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .imgcore import Image, blur_array, check_image, gaussian_blur, resize, to_grayscale

PATTERN_VERSION = "fk-brief256-v1"
PATTERN_SEED = 0x5EEDB21E
DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8

MIN_LEVEL_DIM = 16
PYRAMID_SIGMA = 1.0
DESCRIPTOR_SIGMA = 2.0
DESCRIPTOR_BORDER = 20
ORIENTATION_RADIUS = 15
FAST_ARC = 9

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])


def _make_pattern() -> np.ndarray:
    rng = np.random.default_rng(PATTERN_SEED)
    pts = rng.normal(0.0, 31.0 / 5.0, size=(DESCRIPTOR_BITS, 4))
    return np.clip(np.round(pts), -13, 13)


# (256, 4): x1, y1, x2, y2 offsets relative to the keypoint, before steering.
BRIEF_PATTERN = _make_pattern()
BRIEF_PATTERN.setflags(write=False)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    orientation: float
    response: float
    octave: int


@dataclass(frozen=True)
class DetectorConfig:
    threshold: float = 20.0 / 255.0
    n_levels: int = 8
    scale_factor: float = 1.2
    max_per_level: int = 500
    max_total: int = 2000

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.scale_factor <= 1:
            raise ValueError("scale_factor must be > 1")
        if self.max_per_level < 1 or self.max_total < 1:
            raise ValueError("keypoint caps must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class KeypointSet:
    """Keypoints of one image with a parallel (N, 32) uint8 array of packed descriptors.

    Bits are packed most-significant-first within each byte (``np.packbits``).
    """

    image_id: str
    width: int
    height: int
    keypoints: list[Keypoint] = field(default_factory=list)
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, DESCRIPTOR_BYTES), np.uint8))
    pattern_version: str = PATTERN_VERSION

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError(f"{len(self.keypoints)} keypoints but {len(self.descriptors)} descriptors")

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def xy(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, 2))
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "dims": [self.width, self.height],
            "keypoints": [
                {"x": k.x, "y": k.y, "angle": k.orientation, "response": k.response, "octave": k.octave}
                for k in self.keypoints
            ],
            "descriptors": base64.b64encode(self.descriptors.tobytes()).decode("ascii"),
            "pattern_version": self.pattern_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeypointSet":
        if d.get("pattern_version") != PATTERN_VERSION:
            raise ValueError(f"unsupported descriptor pattern {d.get('pattern_version')!r}")
        kps = [Keypoint(float(k["x"]), float(k["y"]), float(k["angle"]), float(k["response"]), int(k["octave"]))
               for k in d["keypoints"]]
        raw = np.frombuffer(base64.b64decode(d["descriptors"]), dtype=np.uint8)
        w, h = d["dims"]
        return cls(d["image_id"], int(w), int(h), kps, raw.reshape(-1, DESCRIPTOR_BYTES).copy())

    def equals(self, other: "KeypointSet") -> bool:
        return self.to_dict() == other.to_dict()


def pyramid_dims(width: int, height: int, n_levels: int, scale_factor: float) -> list[tuple[int, int]]:
    """Level sizes ``floor(d / scale_factor**k)``, stopping before any side drops below 16."""
    dims = [(width, height)]
    for k in range(1, n_levels):
        s = scale_factor ** k
        w, h = int(math.floor(width / s + 1e-9)), int(math.floor(height / s + 1e-9))
        if w < MIN_LEVEL_DIM or h < MIN_LEVEL_DIM:
            break
        dims.append((w, h))
    return dims


def build_pyramid(img: Image, levels: int, scale_factor: float) -> list[Image]:
    """Level 0 is ``img``; each further level is the previous one blurred (sigma 1) and area-downsampled."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if scale_factor <= 1:
        raise ValueError("scale_factor must be > 1")
    if img.channels != 1:
        raise ValueError("build_pyramid needs a 1-channel image")
    out = [img]
    for w, h in pyramid_dims(img.width, img.height, levels, scale_factor)[1:]:
        out.append(resize(gaussian_blur(out[-1], PYRAMID_SIGMA), w, h))
    return out


def _has_arc(mask: np.ndarray, n: int = FAST_ARC) -> np.ndarray:
    ext = np.concatenate([mask, mask[: n - 1]], axis=0).astype(np.int16)
    csum = np.concatenate([np.zeros_like(ext[:1]), np.cumsum(ext, axis=0)], axis=0)
    windows = csum[n:n + 16] - csum[:16]
    return (windows == n).any(axis=0)


def fast_score_map(a: np.ndarray, threshold: float) -> np.ndarray:
    """FAST-9 corner scores (0 where the segment test fails) for a 2-D array.

    The score is the sum of absolute deviations from the centre over the
    circle pixels on the passing side of the threshold.
    """
    h, w = a.shape
    score = np.zeros((h, w))
    if h < 7 or w < 7:
        return score
    centre = a[3:h - 3, 3:w - 3]
    # Any 9-arc covers at least two of the four compass pixels.
    n_bright = np.zeros(centre.shape, dtype=np.int8)
    n_dark = np.zeros(centre.shape, dtype=np.int8)
    for i in (0, 4, 8, 12):
        dx, dy = CIRCLE[i]
        d = a[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] - centre
        n_bright += d > threshold
        n_dark += d < -threshold
    cy, cx = np.nonzero((n_bright >= 2) | (n_dark >= 2))
    if len(cy) == 0:
        return score
    cy, cx = cy + 3, cx + 3
    ring = a[cy[None] + CIRCLE[:, 1, None], cx[None] + CIRCLE[:, 0, None]]
    diff = ring - a[cy, cx][None]
    bright = diff > threshold
    dark = diff < -threshold
    s_bright = np.where(bright, diff, 0.0).sum(axis=0)
    s_dark = np.where(dark, -diff, 0.0).sum(axis=0)
    score[cy, cx] = np.where(_has_arc(bright), s_bright, np.where(_has_arc(dark), s_dark, 0.0))
    return score


def nonmax_suppress(score: np.ndarray) -> np.ndarray:
    """3x3 non-maximum suppression; plateaus keep their first pixel in raster order."""
    h, w = score.shape
    padded = np.pad(score, 1, mode="constant", constant_values=-1.0)
    keep = score > 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            if dy < 0 or (dy == 0 and dx < 0):
                keep &= score > nb
            else:
                keep &= score >= nb
    return keep


_yy, _xx = np.mgrid[-ORIENTATION_RADIUS:ORIENTATION_RADIUS + 1, -ORIENTATION_RADIUS:ORIENTATION_RADIUS + 1]
_DISC = (_xx ** 2 + _yy ** 2) <= ORIENTATION_RADIUS ** 2
_DISC_DX = _xx[_DISC].astype(np.float64)
_DISC_DY = _yy[_DISC].astype(np.float64)


def intensity_centroid_angle(a: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """atan2(m01, m10) over a radius-15 disc; pixels beyond the border are clamped."""
    if len(xs) == 0:
        return np.zeros(0)
    h, w = a.shape
    px = np.clip(xs[:, None] + _DISC_DX[None].astype(int), 0, w - 1)
    py = np.clip(ys[:, None] + _DISC_DY[None].astype(int), 0, h - 1)
    vals = a[py, px]
    m10 = (vals * _DISC_DX[None]).sum(axis=1)
    m01 = (vals * _DISC_DY[None]).sum(axis=1)
    return np.arctan2(m01, m10)


def _level_scale(pyramid: list[Image], k: int) -> tuple[float, float]:
    return pyramid[0].width / pyramid[k].width, pyramid[0].height / pyramid[k].height


def detect_keypoints(pyramid: list[Image], threshold: float, max_per_level: int) -> list[Keypoint]:
    """FAST-9 with non-max suppression on every level, coordinates in level-0 space.

    Per level, the strongest ``max_per_level`` corners are kept (ties broken by
    row, then column). The result is ordered by level, then by that ranking.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    out: list[Keypoint] = []
    for k, level in enumerate(pyramid):
        a = level.plane(0)
        score = fast_score_map(a, threshold)
        ys, xs = np.nonzero(nonmax_suppress(score))
        if len(xs) == 0:
            continue
        resp = score[ys, xs]
        order = np.lexsort((xs, ys, -resp))[:max_per_level]
        xs, ys, resp = xs[order], ys[order], resp[order]
        theta = intensity_centroid_angle(a, xs, ys)
        sx, sy = _level_scale(pyramid, k)
        w0, h0 = pyramid[0].width, pyramid[0].height
        for x, y, r, t in zip(xs, ys, resp, theta):
            x0 = min(float(x) * sx, w0 - 1.0)
            y0 = min(float(y) * sy, h0 - 1.0)
            out.append(Keypoint(x0, y0, float(t), float(r), k))
    return out


def _level_coords(pyramid: list[Image], kps: list[Keypoint]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    octs = np.array([k.octave for k in kps], dtype=int)
    lx = np.empty(len(kps), dtype=int)
    ly = np.empty(len(kps), dtype=int)
    for i, kp in enumerate(kps):
        sx, sy = _level_scale(pyramid, kp.octave)
        lx[i] = int(round(kp.x / sx))
        ly[i] = int(round(kp.y / sy))
    return octs, lx, ly


def compute_descriptors(pyramid, kps: list[Keypoint]) -> tuple[list[Keypoint], np.ndarray, int]:
    """Steered BRIEF for ``kps``.

    ``pyramid`` is the list returned by :func:`build_pyramid` (a single
    :class:`Image` is treated as a one-level pyramid). Keypoints closer than
    20 px to the border of their octave image are dropped.

    Returns ``(kept_keypoints, packed_descriptors, n_dropped)``.
    """
    if isinstance(pyramid, Image):
        pyramid = [pyramid]
    if not kps:
        return [], np.zeros((0, DESCRIPTOR_BYTES), np.uint8), 0
    if any(k.octave >= len(pyramid) for k in kps):
        raise ValueError("keypoint octave beyond pyramid depth")
    octs, lx, ly = _level_coords(pyramid, kps)
    dims = np.array([(pyramid[o].width, pyramid[o].height) for o in octs])
    inside = ((lx >= DESCRIPTOR_BORDER) & (ly >= DESCRIPTOR_BORDER)
              & (lx < dims[:, 0] - DESCRIPTOR_BORDER) & (ly < dims[:, 1] - DESCRIPTOR_BORDER))
    idx = np.flatnonzero(inside)
    bits = np.zeros((len(idx), DESCRIPTOR_BITS), dtype=bool)
    p = BRIEF_PATTERN
    for o in np.unique(octs[idx]):
        sel = idx[octs[idx] == o]
        rows = np.flatnonzero(octs[idx] == o)
        smooth = blur_array(pyramid[o].plane(0), DESCRIPTOR_SIGMA)
        theta = np.array([kps[i].orientation for i in sel])
        c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
        x1 = lx[sel, None] + np.rint(c * p[None, :, 0] - s * p[None, :, 1]).astype(int)
        y1 = ly[sel, None] + np.rint(s * p[None, :, 0] + c * p[None, :, 1]).astype(int)
        x2 = lx[sel, None] + np.rint(c * p[None, :, 2] - s * p[None, :, 3]).astype(int)
        y2 = ly[sel, None] + np.rint(s * p[None, :, 2] + c * p[None, :, 3]).astype(int)
        bits[rows] = smooth[y1, x1] < smooth[y2, x2]
    kept = [kps[i] for i in idx]
    return kept, np.packbits(bits, axis=1), len(kps) - len(idx)


def detect_and_describe(img, cfg: DetectorConfig | None = None, image_id: str = "") -> KeypointSet:
    """Grayscale, pyramid, FAST-9, steered BRIEF; keeps the ``max_total`` strongest."""
    cfg = cfg or DetectorConfig()
    img = check_image(img)
    gray = to_grayscale(img)
    pyramid = build_pyramid(gray, cfg.n_levels, cfg.scale_factor)
    kps = detect_keypoints(pyramid, cfg.threshold, cfg.max_per_level)
    kps, desc, _ = compute_descriptors(pyramid, kps)
    if len(kps) > cfg.max_total:
        order = np.lexsort((
            np.array([k.x for k in kps]), np.array([k.y for k in kps]),
            np.array([k.octave for k in kps]), -np.array([k.response for k in kps]),
        ))[: cfg.max_total]
        kps = [kps[i] for i in order]
        desc = desc[order]
    return KeypointSet(image_id, img.width, img.height, kps, desc)


class FastBriefDetector(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform`` maps a sequence of images to KeypointSets.

    Stateless; ``fit`` only validates parameters.
    """

    def __init__(self, threshold=20.0 / 255.0, n_levels=8, scale_factor=1.2,
                 max_per_level=500, max_total=2000):
        self.threshold = threshold
        self.n_levels = n_levels
        self.scale_factor = scale_factor
        self.max_per_level = max_per_level
        self.max_total = max_total

    def _config(self) -> DetectorConfig:
        return DetectorConfig(self.threshold, self.n_levels, self.scale_factor,
                              self.max_per_level, self.max_total)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X) -> list[KeypointSet]:
        cfg = getattr(self, "config_", None) or self._config()
        return [detect_and_describe(img, cfg, image_id=str(i)) for i, img in enumerate(X)]

