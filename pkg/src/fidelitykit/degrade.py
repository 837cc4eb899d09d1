"""Pseudo-pair synthesis: degraders, reference augmentation and variance-map checks.

The built-in degrader is a band-split approximation of one-step diffusion
denoising: it attenuates the detail band and injects noise gated by local
gradient strength, so damage concentrates on edges and texture while the
sigma-3 low band is left alone. A real denoiser can be plugged in through
:func:`degrade_external`.
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .imgcore import (FloatMap, Image, blur_array, check_image, load_image, resize, save_image,
                      sobel_magnitude, to_grayscale)

LEVELS = (1.0, 0.5, 0.25)
LOW_BAND_SIGMA = 3.0
DEFAULT_NOISE_SCALE = 0.15
DETAIL_PASSES = 5
DEFAULT_VARIANTS = 10


class ExternalDegraderError(RuntimeError):
    pass


@dataclass(frozen=True)
class DegradeSpec:
    level: float | None = None
    method: str = "builtin"
    strength: float = 0.5
    seed: int = 0
    external_cmd: str | None = None
    noise_scale: float = DEFAULT_NOISE_SCALE
    timeout: float = 300.0

    def __post_init__(self):
        if self.level is not None and self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level}")
        if self.method not in ("builtin", "external"):
            raise ValueError(f"unknown degrade method {self.method!r}")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must be in [0, 1]")
        if self.method == "external" and not self.external_cmd:
            raise ValueError("external method needs external_cmd")


@dataclass(frozen=True)
class AugmentSpec:
    crop_fraction: tuple[float, float] = (0.8, 1.0)
    rotation: tuple[float, float] = (-15.0, 15.0)
    gain: tuple[float, float] = (0.8, 1.2)
    offset: tuple[float, float] = (-0.05, 0.05)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_fraction
        if not (0.5 < lo <= hi <= 1.0):
            raise ValueError("crop_fraction must lie in (0.5, 1.0]")
        if not (-30.0 <= self.rotation[0] <= self.rotation[1] <= 30.0):
            raise ValueError("rotation must lie in [-30, 30] degrees")
        if not (0.0 < self.gain[0] <= self.gain[1]):
            raise ValueError("gains must be positive and ordered")
        if not (self.offset[0] <= self.offset[1]):
            raise ValueError("offset range must be ordered")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentSpec":
        return cls((1.0, 1.0), (0.0, 0.0), (1.0, 1.0), (0.0, 0.0), seed)


@dataclass(frozen=True)
class AugmentParams:
    """What :func:`augment_reference` actually applied."""

    crop_box: tuple[int, int, int, int]
    angle: float
    gains: tuple[float, ...]
    offsets: tuple[float, ...]


@dataclass
class PseudoPair:
    degraded: Image
    reference: Image
    level: float
    augment: AugmentParams
    swapped: bool


@dataclass
class PairRecord:
    clean_path: str
    degraded_path: str
    reference_path: str
    degrade_spec: dict
    augment_spec: dict
    augment_params: dict
    level: float
    role_swapped: bool = False
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PairRecord":
        return cls(**json.loads(line))


def _gradient_gate(img: Image) -> np.ndarray:
    """Per-pixel gradient strength of the luma, normalised to [0, 1]."""
    g = sobel_magnitude(to_grayscale(img).plane(0))
    peak = g.max()
    return g / peak if peak > 0 else g


def degrade_builtin(img: Image, strength: float, seed: int, noise_scale: float = DEFAULT_NOISE_SCALE) -> Image:
    """Band-split perturbation.

    With ``hp(x) = x - blur(x, 3)`` and ``D(x)`` the high-pass applied
    ``DETAIL_PASSES`` times, the detail band is attenuated by ``strength``
    and gated noise is added::

        out = img - strength * D(img) + strength * noise_scale * D(eta * A)

    clamped to [0, 1]. ``eta`` is seeded standard normal noise and ``A`` the
    normalised gradient magnitude of the input luma. A single ``hp`` leaks
    into the sigma-3 band because the Gaussian is not a projector; repeated
    passes push that leak to frequencies where images carry little energy.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must be in [0, 1]")
    img = check_image(img)
    if strength == 0.0:
        return img
    gate = _gradient_gate(img)[:, :, None]
    noise = np.random.default_rng(seed).standard_normal(img.data.shape) * gate
    out = img.data + strength * (noise_scale * _detail(noise) - _detail(img.data))
    return Image(np.clip(out, 0.0, 1.0))


def _detail(x: np.ndarray) -> np.ndarray:
    for _ in range(DETAIL_PASSES):
        x = x - blur_array(x, LOW_BAND_SIGMA)
    return x


def level_roundtrip(img: Image, level: float) -> Image:
    """Downscale by ``level`` and back, standing in for encoding at reduced resolution."""
    if level == 1.0:
        return img
    w, h = max(1, round(img.width * level)), max(1, round(img.height * level))
    return resize(resize(img, w, h), img.width, img.height)


def degrade_external(img: Image, cmd: str, level: float = 1.0, seed: int = 0, timeout: float = 300.0) -> Image:
    """Run ``cmd`` as ``<tool> {in} {out} [{seed}] [{level}]`` on PNG files.

    The input is first taken through the level round trip; the tool's output
    must have the same dimensions as ``img``. No shell is involved: the
    template is split with :func:`shlex.split` and each token formatted.
    """
    if "{in}" not in cmd or "{out}" not in cmd:
        raise ValueError("command template needs {in} and {out} placeholders")
    img = check_image(img)
    prepared = level_roundtrip(img, level)
    with tempfile.TemporaryDirectory(prefix="fk-degrade-") as tmp:
        src, dst = os.path.join(tmp, "in.png"), os.path.join(tmp, "out.png")
        save_image(prepared, src)
        argv = [tok.format(**{"in": src, "out": dst, "seed": seed, "level": level}) for tok in shlex.split(cmd)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            raise ExternalDegraderError(f"degrader timed out after {timeout}s") from exc
        except OSError as exc:
            raise ExternalDegraderError(f"cannot run degrader: {exc}") from exc
        if proc.returncode != 0:
            raise ExternalDegraderError(f"degrader exited {proc.returncode}: {proc.stderr.strip()}")
        if not os.path.exists(dst):
            raise ExternalDegraderError("degrader produced no output file")
        out = load_image(dst)
    if (out.width, out.height) != (img.width, img.height):
        raise ExternalDegraderError(f"degrader output is {out.width}x{out.height}, expected {img.width}x{img.height}")
    if out.channels != img.channels:
        out = to_grayscale(out) if img.channels == 1 else Image(np.repeat(out.data, 3, axis=2))
    return out


def degrade(img: Image, spec: DegradeSpec, level: float | None = None) -> Image:
    """Apply ``spec`` at ``level`` (defaults to ``spec.level``, else 1.0)."""
    level = spec.level if level is None else level
    level = 1.0 if level is None else level
    if spec.method == "external":
        return degrade_external(img, spec.external_cmd, level, spec.seed, spec.timeout)
    return degrade_builtin(level_roundtrip(img, level), spec.strength, spec.seed, spec.noise_scale)


def augment_reference(img: Image, spec: AugmentSpec) -> tuple[Image, AugmentParams]:
    """Seeded crop (resized back to the input size), rotation and per-channel colour map."""
    img = check_image(img)
    rng = np.random.default_rng(spec.seed)
    frac = rng.uniform(*spec.crop_fraction)
    angle = rng.uniform(*spec.rotation)
    gains = tuple(float(g) for g in rng.uniform(*spec.gain, size=img.channels))
    offsets = tuple(float(o) for o in rng.uniform(*spec.offset, size=img.channels))

    cw, ch = max(1, round(img.width * frac)), max(1, round(img.height * frac))
    cx0 = int(rng.integers(0, img.width - cw + 1))
    cy0 = int(rng.integers(0, img.height - ch + 1))
    data = img.data
    if (cw, ch) != (img.width, img.height):
        data = resize(Image(data[cy0:cy0 + ch, cx0:cx0 + cw]), img.width, img.height).data
    if angle != 0.0:
        data = rotate_array(data, angle)
    if any(g != 1.0 for g in gains) or any(o != 0.0 for o in offsets):
        data = np.clip(data * np.array(gains) + np.array(offsets), 0.0, 1.0)
    params = AugmentParams((cx0, cy0, cw, ch), float(angle), gains, offsets)
    return Image(data), params


def rotate_array(data: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate (H, W, C) samples about the image centre; bilinear, clamped borders."""
    h, w = data.shape[:2]
    t = np.deg2rad(angle_deg)
    # Output (row, col) -> input (row, col) for a counter-clockwise visual rotation.
    rot = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - rot @ centre
    out = np.empty_like(data)
    for c in range(data.shape[2]):
        out[:, :, c] = ndimage.affine_transform(data[:, :, c], rot, offset=offset, order=1, mode="nearest")
    return out


def draw_level(seed: int) -> float:
    """Uniform choice among the three downscale levels for an unset spec."""
    rng = np.random.default_rng([seed, 0x1E7E1])
    return LEVELS[int(rng.integers(len(LEVELS)))]


def make_pseudo_pair(clean: Image, dspec: DegradeSpec, aspec: AugmentSpec, swap: bool = False) -> PseudoPair:
    """Degraded input and augmented reference from one clean image.

    Unswapped: degrade the clean image, augment it for the reference. Swapped:
    degrade the augmented view and use the clean image as the reference.
    """
    clean = check_image(clean)
    level = dspec.level if dspec.level is not None else draw_level(dspec.seed)
    augmented, params = augment_reference(clean, aspec)
    if swap:
        return PseudoPair(degrade(augmented, dspec, level), clean, level, params, True)
    return PseudoPair(degrade(clean, dspec, level), augmented, level, params, False)


def write_pseudo_pair(pair: PseudoPair, clean_path, out_dir, stem: str, dspec: DegradeSpec,
                      aspec: AugmentSpec) -> PairRecord:
    out_dir = Path(out_dir)
    deg_path = out_dir / f"{stem}_degraded.png"
    ref_path = out_dir / f"{stem}_reference.png"
    save_image(pair.degraded, deg_path)
    save_image(pair.reference, ref_path)
    return PairRecord(str(clean_path), str(deg_path), str(ref_path), asdict(dspec), asdict(aspec),
                      asdict(pair.augment), pair.level, pair.swapped)


def variance_map(variants: list[Image]) -> FloatMap:
    """Per-pixel population variance of the luma across ``variants``."""
    if len(variants) < 2:
        raise ValueError("need at least 2 variants")
    dims = {(v.width, v.height) for v in variants}
    if len(dims) != 1:
        raise ValueError(f"variants differ in size: {sorted(dims)}")
    stack = np.stack([to_grayscale(check_image(v)).plane(0) for v in variants])
    # shift by the first variant so identical stacks give exact zeros
    return (stack - stack[0]).var(axis=0)


@dataclass(frozen=True)
class ValidationReport:
    pearson_r: float | None
    hi_lo_ratio: float | None
    total_variance: float
    degenerate: bool

    def to_dict(self) -> dict:
        return asdict(self)


def validate_degradation(clean: Image, variants: list[Image], decile: float = 0.1) -> ValidationReport:
    """Check that variance across variants follows the clean image's gradients.

    ``pearson_r`` correlates the variance map with the gradient magnitude of
    the clean luma; ``hi_lo_ratio`` divides the mean variance over the top
    gradient decile by that over the bottom decile (tiny floor on the
    denominator). Fewer than 1e-8 total variance is flagged degenerate.
    """
    var = variance_map(variants)
    grad = sobel_magnitude(to_grayscale(check_image(clean)).plane(0))
    if grad.shape != var.shape:
        raise ValueError("clean image and variants differ in size")
    total = float(var.sum())
    if total < 1e-8 or grad.std() == 0:
        return ValidationReport(None, None, total, True)
    r = float(np.corrcoef(var.ravel(), grad.ravel())[0, 1])
    order = np.argsort(grad.ravel(), kind="stable")
    k = max(1, int(round(decile * order.size)))
    lo = var.ravel()[order[:k]].mean()
    hi = var.ravel()[order[-k:]].mean()
    return ValidationReport(r, float(hi / max(lo, 1e-12)), total, False)


def uniform_noise_variants(img: Image, n: int = DEFAULT_VARIANTS, sigma: float = 0.02, seed: int = 0) -> list[Image]:
    """Control: i.i.d. Gaussian noise everywhere, unclamped, ``n`` seeds."""
    img = check_image(img)
    rng = np.random.default_rng(seed)
    return [Image(img.data + sigma * rng.standard_normal(img.data.shape)) for _ in range(n)]


def builtin_variants(img: Image, n: int = DEFAULT_VARIANTS, strength: float = 0.5, seed: int = 0,
                     level: float = 1.0) -> list[Image]:
    img = level_roundtrip(check_image(img), level)
    return [degrade_builtin(img, strength, seed + i) for i in range(n)]


class BandSplitDegrader(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`degrade_builtin`; image ``i`` uses seed ``random_state + i``."""

    def __init__(self, strength=0.5, level=1.0, noise_scale=DEFAULT_NOISE_SCALE, random_state=0):
        self.strength = strength
        self.level = level
        self.noise_scale = noise_scale
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must be in [0, 1]")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")
        return self

    def transform(self, X) -> list[Image]:
        return [degrade_builtin(level_roundtrip(check_image(img), self.level), self.strength,
                                int(self.random_state) + i, self.noise_scale)
                for i, img in enumerate(X)]
