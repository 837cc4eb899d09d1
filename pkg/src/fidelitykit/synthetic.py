"""Seeded procedural images used as fixtures, controls and the desk-scale corpus.

Nothing here is loaded from disk, so every fixture is reproducible from its
seed alone.
"""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw
from scipy import ndimage

from .imgcore import Image, blur_array

if TYPE_CHECKING:
    from .bench import Manifest


def _rand_color(rng, channels):
    return tuple(int(v) for v in rng.integers(0, 256, size=channels))


def textured_image(width: int = 512, height: int | None = None, seed: int = 0, channels: int = 3,
                   n_shapes: int | None = None) -> Image:
    """Overlapping flat-coloured shapes and strokes on a smooth gradient.

    Corner-rich and free of large flat ties, so FAST and BRIEF behave well.
    """
    height = width if height is None else height
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(width, height)
    base = np.empty((height, width, channels))
    for c in range(channels):
        a, b, off = rng.uniform(-0.3, 0.3, size=3)
        base[:, :, c] = 0.5 + off * 0.5 + a * xx + b * yy
    pil = PILImage.fromarray(np.clip(base * 255, 0, 255).astype(np.uint8)[:, :, 0] if channels == 1
                             else np.clip(base * 255, 0, 255).astype(np.uint8), "L" if channels == 1 else "RGB")
    draw = ImageDraw.Draw(pil)
    n_shapes = n_shapes or max(8, int(60 * width * height / 512 ** 2))
    fill = (lambda: _rand_color(rng, channels)[0]) if channels == 1 else (lambda: _rand_color(rng, channels))
    scale = min(width, height)
    for _ in range(n_shapes):
        kind = rng.integers(0, 4)
        x0, y0 = rng.uniform(0, width), rng.uniform(0, height)
        size = rng.uniform(0.03, 0.15) * scale
        if kind == 0:
            draw.rectangle([x0, y0, x0 + size, y0 + size * rng.uniform(0.4, 1.6)], fill=fill())
        elif kind == 1:
            draw.ellipse([x0, y0, x0 + size, y0 + size * rng.uniform(0.5, 1.5)], fill=fill())
        elif kind == 2:
            n = int(rng.integers(3, 7))
            ang = np.sort(rng.uniform(0, 2 * math.pi, n))
            rad = size * rng.uniform(0.5, 1.0, n)
            draw.polygon([(x0 + r * math.cos(t), y0 + r * math.sin(t)) for r, t in zip(rad, ang)], fill=fill())
        else:
            x1, y1 = x0 + rng.uniform(-1, 1) * size * 2, y0 + rng.uniform(-1, 1) * size * 2
            draw.line([x0, y0, x1, y1], fill=fill(), width=int(rng.integers(1, 4)))
    arr = np.asarray(pil).astype(np.float64) / 255.0
    return Image(arr)


def smooth_scene(width: int, height: int, seed: int = 0, channels: int = 3) -> Image:
    """Low-frequency background with few corners (heavily blurred noise plus a gradient)."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=(height, width, channels))
    low = blur_array(noise, 12.0)
    low = (low - low.mean()) / (low.std() + 1e-12)
    yy, xx = np.mgrid[0:height, 0:width] / max(width, height)
    out = 0.5 + 0.08 * low
    for c in range(channels):
        out[:, :, c] += rng.uniform(-0.15, 0.15) * xx + rng.uniform(-0.15, 0.15) * yy
    return Image(np.clip(out, 0.0, 1.0))


def similarity_matrix(scale: float, angle_deg: float, tx: float, ty: float, cx: float = 0.0,
                      cy: float = 0.0) -> np.ndarray:
    """3x3 map ``p -> s R (p - c) + t`` in (x, y) pixel coordinates."""
    t = math.radians(angle_deg)
    r = scale * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    m = np.eye(3)
    m[:2, :2] = r
    m[:2, 2] = np.array([tx, ty]) - r @ np.array([cx, cy])
    return m


def warp_into(canvas: Image, src: Image, matrix: np.ndarray) -> tuple[Image, np.ndarray]:
    """Bilinear-warp ``src`` into ``canvas`` by ``matrix`` (src xy -> canvas xy).

    Returns the composited image and the boolean coverage mask.
    """
    inv = np.linalg.inv(matrix)
    h, w = canvas.height, canvas.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = inv[2, 0] * xx + inv[2, 1] * yy + inv[2, 2]
    sx = (inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]) / denom
    sy = (inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]) / denom
    mask = (sx >= 0) & (sx <= src.width - 1) & (sy >= 0) & (sy <= src.height - 1)
    out = canvas.data.copy()
    for c in range(canvas.channels):
        sc = src.data[:, :, min(c, src.channels - 1)]
        vals = ndimage.map_coordinates(sc, [sy, sx], order=1, mode="nearest")
        out[:, :, c] = np.where(mask, vals, out[:, :, c])
    return Image(out), mask


def build_corpus(out_dir, n: int = 50, seed: int = 0, subject_size: int = 192, scene_size: int = 384,
                 strength: float = 0.4, level: float = 1.0, method_tag: str = "synthetic",
                 backbone_tag: str = "planted") -> "Manifest":
    """Subjects warped into smooth scenes, then degraded; writes PNGs and ``manifest.json``.

    Each generated image holds one subject under a random similarity
    transform (scale 0.9-1.2, rotation +-25 degrees), after which the whole
    image goes through the level round trip and the built-in degrader.
    Ground-truth transforms are written to ``truth.json``.
    """
    import json
    from pathlib import Path

    from .bench import Manifest, ManifestEntry, save_manifest
    from .degrade import degrade_builtin, level_roundtrip
    from .imgcore import save_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries, truth = [], {}
    for i in range(n):
        sid = f"s{i:03d}"
        subject = textured_image(subject_size, seed=int(rng.integers(1 << 31)), n_shapes=30)
        scene = smooth_scene(scene_size, scene_size, seed=int(rng.integers(1 << 31)))
        scale = rng.uniform(0.9, 1.2)
        angle = rng.uniform(-25.0, 25.0)
        half = 0.5 * subject_size * scale * math.sqrt(2.0)
        lo, hi = half + 12, scene_size - half - 12
        tx, ty = rng.uniform(lo, hi, size=2)
        c = (subject_size - 1) / 2.0
        m = similarity_matrix(scale, angle, tx, ty, c, c)
        composite, _ = warp_into(scene, subject, m)
        generated = degrade_builtin(level_roundtrip(composite, level), strength, int(rng.integers(1 << 31)))
        save_image(subject, out / f"{sid}_subject.png")
        save_image(generated, out / f"{sid}_generated.png")
        entries.append(ManifestEntry(sid, f"{sid}_subject.png", f"{sid}_generated.png", None,
                                     method_tag, backbone_tag))
        truth[sid] = m.tolist()
    manifest = Manifest(entries, base_dir=str(out))
    save_manifest(manifest, out / "manifest.json")
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    return manifest
