"""Manifests, evaluation and refinement runners, quality filtering and reports.

Per-sample failures never abort a batch: they are recorded as skips with a
reason, and every manifest entry ends up either in the results or in the
skips. Reports are assembled in ``sample_id`` order so repeated runs with the
same inputs and seeds are byte-identical apart from the ``timestamps`` block.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import __version__
from .cropblend import (BLEND_MODES, CropConfig, CropRegion, RegionError, SubjectNotLocalizedError,
                        extract_crop, poisson_blend, subject_crop)
from .imgcore import Image, ImageIOError, load_image, save_image
from .keypoints import detect_and_describe
from .matching import MatcherConfig, match_keypoint_sets
from .metrics import (EmbeddingVector, ReportSummary, SampleResult, aggregate,
                      aggregate_groups, cosine_similarity)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "fk-manifest-v1"
REPORT_SCHEMA = "fk-report-v1"
CROPS_SCHEMA = "fk-crops-v1"


class ManifestError(ValueError):
    pass


class AllSamplesSkippedError(RuntimeError):
    pass


class RefinerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    subject_path: str
    generated_path: str
    refined_path: str | None = None
    method_tag: str = ""
    backbone_tag: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["refined_path"] is None:
            del d["refined_path"]
        return d


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    schema_version: str = MANIFEST_SCHEMA
    base_dir: str = "."

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {e.sample_id!r}")
            seen.add(e.sample_id)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        return Path(os.path.abspath(Path(self.base_dir) / p))

    def missing_files(self) -> list[str]:
        out = []
        for e in self.entries:
            for key in ("subject_path", "generated_path", "refined_path"):
                p = self.resolve(getattr(e, key))
                if p is not None and not p.is_file():
                    out.append(f"{e.sample_id}.{key}: {p}")
        return out

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "entries": [e.to_dict() for e in self.entries]}

    def absolute(self) -> "Manifest":
        """Same entries with every path resolved, so the manifest can be saved anywhere."""
        return Manifest([_absolute(self, e) for e in self.entries], self.schema_version, self.base_dir)

    def __eq__(self, other) -> bool:
        return isinstance(other, Manifest) and self.to_dict() == other.to_dict()


_REQUIRED = ("sample_id", "subject_path", "generated_path")
_OPTIONAL = ("refined_path", "method_tag", "backbone_tag")


def parse_manifest(doc, base_dir: str = ".") -> Manifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest: expected a JSON object")
    entries = doc.get("entries")
    if not isinstance(entries, list):
        raise ManifestError("manifest.entries: expected a list")
    version = doc.get("schema_version", MANIFEST_SCHEMA)
    if version != MANIFEST_SCHEMA:
        raise ManifestError(f"manifest.schema_version: unsupported {version!r}")
    out, seen = [], set()
    for i, e in enumerate(entries):
        where = f"entries[{i}]"
        if not isinstance(e, dict):
            raise ManifestError(f"{where}: expected an object")
        for k in _REQUIRED:
            if not isinstance(e.get(k), str) or not e[k]:
                raise ManifestError(f"{where}.{k}: required non-empty string")
        for k in _OPTIONAL:
            if e.get(k) is not None and not isinstance(e[k], str):
                raise ManifestError(f"{where}.{k}: expected a string")
        unknown = set(e) - set(_REQUIRED) - set(_OPTIONAL)
        if unknown:
            raise ManifestError(f"{where}: unknown field(s) {sorted(unknown)}")
        if e["sample_id"] in seen:
            raise ManifestError(f"{where}.sample_id: duplicate sample_id {e['sample_id']!r}")
        seen.add(e["sample_id"])
        out.append(ManifestEntry(e["sample_id"], e["subject_path"], e["generated_path"], e.get("refined_path"),
                                 e.get("method_tag") or "", e.get("backbone_tag") or ""))
    return Manifest(out, version, base_dir)


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"{path}: not found") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_manifest(doc, str(path.parent))


def save_manifest(m: Manifest, path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2) + "\n")


def _absolute(m: Manifest, e: ManifestEntry) -> ManifestEntry:
    r = m.resolve
    return replace(e, subject_path=str(r(e.subject_path)), generated_path=str(r(e.generated_path)),
                   refined_path=str(r(e.refined_path)) if e.refined_path else None)


def _map(fn: Callable, items: list, workers: int | None) -> list:
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class Skip:
    sample_id: str
    reason: str


class _RefCache:
    """Reference detections keyed by subject path (subjects repeat across methods)."""

    def __init__(self, cfg: MatcherConfig):
        self.cfg = cfg
        self._cache: dict[str, object] = {}

    def get(self, path: str):
        if path not in self._cache:
            self._cache[path] = detect_and_describe(load_image(path), self.cfg.detector, "ref")
        return self._cache[path]


def _count(cache: _RefCache, subject: str, img: Image):
    kps = detect_and_describe(img, cache.cfg.detector, "other")
    return match_keypoint_sets(cache.get(subject), kps, cache.cfg)


def quality_filter(m: Manifest, min_matches: int = 10, cfg: MatcherConfig | None = None,
                   workers: int | None = None) -> tuple[Manifest, list[dict]]:
    """Keep entries whose subject/generated inlier count reaches ``min_matches``.

    Returns the filtered manifest and a per-sample log. Unreadable entries are
    dropped and logged with the error.
    """
    cfg = cfg or MatcherConfig()
    if min_matches <= 0:
        return Manifest(list(m.entries), m.schema_version, m.base_dir), [
            {"sample_id": e.sample_id, "count": None, "kept": True} for e in m.entries]
    cache = _RefCache(cfg)

    def one(e: ManifestEntry) -> dict:
        a = _absolute(m, e)
        try:
            res = _count(cache, a.subject_path, load_image(a.generated_path))
        except (ImageIOError, ValueError) as exc:
            return {"sample_id": e.sample_id, "count": None, "kept": False, "error": str(exc)}
        return {"sample_id": e.sample_id, "count": res.count, "kept": res.count >= min_matches}

    logs = _map(one, list(m.entries), workers)
    kept = [e for e, row in zip(m.entries, logs) if row["kept"]]
    return Manifest(kept, m.schema_version, m.base_dir), logs


@dataclass(frozen=True)
class EvalConfig:
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    tau: int = 0
    on_crop: bool = False
    crop: CropConfig = field(default_factory=CropConfig)

    def to_dict(self) -> dict:
        return {"matcher": self.matcher.to_dict(), "tau": self.tau, "on_crop": self.on_crop,
                "crop": asdict(self.crop), "seed": self.matcher.seed}


@dataclass
class EvalReport:
    config: dict
    samples: list[SampleResult]
    skips: list[Skip]
    groups: list[ReportSummary]
    overall: ReportSummary
    tool_version: str = __version__
    timestamps: dict = field(default_factory=dict)

    def to_dict(self, with_timestamps: bool = True) -> dict:
        d = {
            "schema_version": REPORT_SCHEMA,
            "tool_version": self.tool_version,
            "config": self.config,
            "summary": self.overall.to_dict(),
            "groups": [g.to_dict() for g in self.groups],
            "samples": [s.to_dict() for s in self.samples],
            "skips": [asdict(s) for s in self.skips],
        }
        if with_timestamps:
            d["timestamps"] = self.timestamps
        return d

    def to_json(self, with_timestamps: bool = True) -> str:
        return json.dumps(self.to_dict(with_timestamps), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        samples = [SampleResult.from_dict(s) for s in d["samples"]]
        tau = int(d["config"].get("tau", 0))
        return cls(d["config"], samples, [Skip(**s) for s in d.get("skips", [])],
                   aggregate_groups(samples, tau) if samples else [],
                   aggregate(samples, tau), d.get("tool_version", __version__), d.get("timestamps", {}))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def image_key(sample_id: str, role: str) -> str:
    """Embedding/crop image id for a sample role (subject, generated, refined)."""
    return f"{sample_id}:{role}"


def _similarity(embeddings: dict[str, EmbeddingVector] | None, sample_id: str) -> float | None:
    if not embeddings:
        return None
    a = embeddings.get(image_key(sample_id, "subject"))
    b = embeddings.get(image_key(sample_id, "refined"))
    if a is None or b is None:
        return None
    return cosine_similarity(a, b)


def run_eval(m: Manifest, cfg: EvalConfig | None = None, *, workers: int | None = None,
             embeddings: dict[str, dict[str, EmbeddingVector]] | None = None) -> EvalReport:
    """AKI per entry and K_Gain per (method, backbone) group.

    ``embeddings`` maps a similarity name (``clip_i``, ``dino``) to vectors keyed
    by :func:`image_key`; subject/refined cosine similarities are attached when
    both vectors exist.
    """
    cfg = cfg or EvalConfig()
    embeddings = embeddings or {}
    cache = _RefCache(cfg.matcher)

    def one(e: ManifestEntry):
        if not e.refined_path:
            return Skip(e.sample_id, "no refined_path")
        a = _absolute(m, e)
        try:
            gen = load_image(a.generated_path)
            ref = load_image(a.refined_path)
            if (gen.width, gen.height) != (ref.width, ref.height):
                return Skip(e.sample_id, "generated/refined size mismatch")
            base = _count(cache, a.subject_path, gen)
            if cfg.on_crop:
                region = subject_crop(base.matchset, base.kps_other, (gen.width, gen.height), cfg.crop)
                base = _count(cache, a.subject_path, extract_crop(gen, region))
                refined = _count(cache, a.subject_path, extract_crop(ref, region))
            else:
                refined = _count(cache, a.subject_path, ref)
        except ImageIOError as exc:
            return Skip(e.sample_id, f"unreadable image: {exc}")
        except SubjectNotLocalizedError as exc:
            return Skip(e.sample_id, str(exc))
        except (ValueError, RegionError) as exc:
            return Skip(e.sample_id, f"error: {exc}")
        return SampleResult(e.sample_id, base.count, refined.count, e.method_tag, e.backbone_tag,
                            base.raw_count, refined.raw_count,
                            _similarity(embeddings.get("clip_i"), e.sample_id),
                            _similarity(embeddings.get("dino"), e.sample_id))

    started = datetime.now(timezone.utc).isoformat()
    out = _map(one, list(m.entries), workers)
    pairs = sorted(zip((e.sample_id for e in m.entries), out), key=lambda t: t[0])
    samples = [r for _, r in pairs if isinstance(r, SampleResult)]
    skips = [r for _, r in pairs if isinstance(r, Skip)]
    for s in skips:
        log.warning("skipped %s: %s", s.sample_id, s.reason)
    if not samples:
        raise AllSamplesSkippedError(f"all {len(m.entries)} samples skipped")
    return EvalReport(cfg.to_dict(), samples, skips, aggregate_groups(samples, cfg.tau),
                      aggregate(samples, cfg.tau), __version__,
                      {"started": started, "finished": datetime.now(timezone.utc).isoformat()})


@dataclass(frozen=True)
class RefinerSpec:
    """External refiner invoked as ``template`` with {subject} {crop} {out} placeholders.

    The template is split with :func:`shlex.split` and run without a shell.
    There is deliberately no prompt or text channel.
    """

    template: str
    timeout: float = 300.0
    workers: int | None = None

    def __post_init__(self):
        missing = [p for p in ("{subject}", "{crop}", "{out}") if p not in self.template]
        if missing:
            raise ValueError(f"refiner template lacks {', '.join(missing)}")

    def argv(self, subject: str, crop: str, out: str) -> list[str]:
        return [tok.format(subject=subject, crop=crop, out=out) for tok in shlex.split(self.template)]


def run_refiner(spec: RefinerSpec, subject: Image, crop: Image) -> Image:
    with tempfile.TemporaryDirectory(prefix="fk-refine-") as tmp:
        sp, cp, op = (os.path.join(tmp, n) for n in ("subject.png", "crop.png", "refined.png"))
        save_image(subject, sp)
        save_image(crop, cp)
        try:
            proc = subprocess.run(spec.argv(sp, cp, op), capture_output=True, text=True, timeout=spec.timeout)
        except subprocess.TimeoutExpired as exc:
            raise RefinerError(f"refiner timed out after {spec.timeout}s") from exc
        except OSError as exc:
            raise RefinerError(f"cannot run refiner: {exc}") from exc
        if proc.returncode != 0:
            raise RefinerError(f"refiner exited {proc.returncode}: {proc.stderr.strip()[-2000:]}")
        if not os.path.exists(op):
            raise RefinerError("refiner produced no output")
        return load_image(op)


@dataclass
class RefineResult:
    manifest: Manifest
    skips: list[Skip]
    regions: dict[str, CropRegion]

    def log_dict(self) -> dict:
        return {"regions": {k: v.to_dict() for k, v in sorted(self.regions.items())},
                "skips": [asdict(s) for s in self.skips]}


def run_refine(m: Manifest, refiner: RefinerSpec, out_dir, *, matcher: MatcherConfig | None = None,
               crop: CropConfig | None = None, mode: str = "seamless", tol: float = 1e-6) -> RefineResult:
    """Crop around the subject, refine the crop externally and blend it back.

    Each refined image is written to ``out_dir/<sample_id>_refined.png``; its
    pixels outside the crop are identical to the generated image. Entries
    that fail keep ``refined_path`` unset and are listed in ``skips``.
    """
    if mode not in BLEND_MODES:
        raise ValueError(f"unknown blend mode {mode!r}")
    matcher = matcher or MatcherConfig()
    crop = crop or CropConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = _RefCache(matcher)

    def one(e: ManifestEntry):
        a = _absolute(m, e)
        try:
            subject = load_image(a.subject_path)
            gen = load_image(a.generated_path)
            res = _count(cache, a.subject_path, gen)
            region = subject_crop(res.matchset, res.kps_other, (gen.width, gen.height), crop)
            patch = extract_crop(gen, region)
            refined_crop = run_refiner(refiner, subject, patch)
            if (refined_crop.width, refined_crop.height) != (region.w, region.h):
                return Skip(e.sample_id, f"dim mismatch: refiner returned {refined_crop.width}x"
                                         f"{refined_crop.height}, crop is {region.w}x{region.h}")
            if refined_crop.channels != gen.channels:
                return Skip(e.sample_id, "channel mismatch from refiner")
            blended = poisson_blend(gen, refined_crop, region, mode, tol)
            dst = out_dir / f"{e.sample_id}_refined.png"
            save_image(blended, dst)
        except SubjectNotLocalizedError as exc:
            return Skip(e.sample_id, str(exc))
        except RefinerError as exc:
            return Skip(e.sample_id, f"refiner failed: {exc}")
        except (ImageIOError, ValueError, RegionError, RuntimeError) as exc:
            return Skip(e.sample_id, f"error: {exc}")
        return region, str(dst.resolve())

    out = _map(one, list(m.entries), refiner.workers)
    entries, skips, regions = [], [], {}
    for e, r in zip(m.entries, out):
        a = _absolute(m, e)
        if isinstance(r, Skip):
            skips.append(r)
            entries.append(replace(a, refined_path=None))
        else:
            regions[e.sample_id] = r[0]
            entries.append(replace(a, refined_path=r[1]))
    skips.sort(key=lambda s: s.sample_id)
    return RefineResult(Manifest(entries, m.schema_version, str(out_dir)), skips, regions)


def emit_scatter(report: EvalReport, path, fmt: str | None = None) -> None:
    """Write (n_base, n_refined) pairs as CSV or as an SVG scatter with the y = x line."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if not report.samples:
        raise ValueError("report has no samples")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "n_base", "n_refined", "aki"])
            for s in report.samples:
                w.writerow([s.sample_id, s.n_base, s.n_refined, s.aki])
    elif fmt == "svg":
        path.write_text(scatter_svg([(s.n_base, s.n_refined) for s in report.samples]))
    else:
        raise ValueError(f"unknown scatter format {fmt!r} (csv or svg)")


def read_scatter_csv(path) -> list[tuple[str, int, int, int]]:
    with open(path, newline="") as fh:
        return [(r["sample_id"], int(r["n_base"]), int(r["n_refined"]), int(r["aki"])) for r in csv.DictReader(fh)]


def scatter_svg(points: list[tuple[int, int]], size: int = 400, pad: int = 40) -> str:
    hi = max(1, max(max(p) for p in points))
    span = size - 2 * pad

    def sx(v):
        return pad + span * v / hi

    def sy(v):
        return size - pad - span * v / hi

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<polygon class="gain-region" points="{sx(0):.2f},{sy(0):.2f} {sx(0):.2f},{sy(hi):.2f} '
        f'{sx(hi):.2f},{sy(hi):.2f}" fill="#2ca02c" fill-opacity="0.15"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(hi):.2f}" y2="{sy(0):.2f}" stroke="black"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(0):.2f}" y2="{sy(hi):.2f}" stroke="black"/>',
        f'<line class="identity" x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
        'stroke="red" stroke-dasharray="6,4"/>',
        f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" font-size="12">matches before (n_base)</text>',
        f'<text x="12" y="{size / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2:.0f})">matches after (n_refined)</text>',
        f'<text x="{sx(0) - 4:.2f}" y="{sy(0) + 14:.2f}" text-anchor="end" font-size="10">0</text>',
        f'<text x="{sx(hi):.2f}" y="{sy(0) + 14:.2f}" text-anchor="middle" font-size="10">{hi}</text>',
        f'<text x="{sx(0) - 4:.2f}" y="{sy(hi) + 4:.2f}" text-anchor="end" font-size="10">{hi}</text>',
    ]
    for b, r in points:
        color = "#2ca02c" if r > b else ("#d62728" if r < b else "#555555")
        parts.append(f'<circle class="sample" cx="{sx(b):.2f}" cy="{sy(r):.2f}" r="3" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_subject_crops(m: Manifest, out_dir, cfg: MatcherConfig | None = None, crop: CropConfig | None = None,
                         workers: int | None = None) -> dict:
    """Write subject-region crops for an external embedder.

    For every entry the region is localised on the generated image, with the
    subject frame mapped through the verified model so the box spans the
    whole subject, and the same rectangle is cut from the refined image when
    present. The subject
    image is copied whole. Returns (and writes to ``out_dir/crops.json``) a
    crop manifest whose ``image_id`` values match :func:`image_key`.
    """
    cfg = cfg or MatcherConfig()
    crop = crop or CropConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = _RefCache(cfg)

    def one(e: ManifestEntry):
        a = _absolute(m, e)
        try:
            gen = load_image(a.generated_path)
            res = _count(cache, a.subject_path, gen)
            ref = cache.get(a.subject_path)
            region = subject_crop(res.matchset, res.kps_other, (gen.width, gen.height), crop,
                                  subject_dims=(ref.width, ref.height))
            images = [{"image_id": image_key(e.sample_id, "subject"), "path": a.subject_path}]
            gp = out_dir / f"{e.sample_id}_generated_crop.png"
            save_image(extract_crop(gen, region), gp)
            images.append({"image_id": image_key(e.sample_id, "generated"), "path": str(gp.resolve())})
            if a.refined_path:
                rp = out_dir / f"{e.sample_id}_refined_crop.png"
                save_image(extract_crop(load_image(a.refined_path), region), rp)
                images.append({"image_id": image_key(e.sample_id, "refined"), "path": str(rp.resolve())})
        except SubjectNotLocalizedError as exc:
            return Skip(e.sample_id, str(exc))
        except (ImageIOError, ValueError, RegionError) as exc:
            return Skip(e.sample_id, f"error: {exc}")
        return {"sample_id": e.sample_id, "region": region.to_dict(), "images": images}

    out = _map(one, list(m.entries), workers)
    doc = {"schema_version": CROPS_SCHEMA,
           "entries": sorted((r for r in out if isinstance(r, dict)), key=lambda r: r["sample_id"]),
           "skips": sorted((asdict(r) for r in out if isinstance(r, Skip)), key=lambda r: r["sample_id"])}
    (out_dir / "crops.json").write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def stratified_subset(m: Manifest, n_base: dict[str, int], size: int, seed: int = 0,
                      n_bins: int = 10) -> Manifest:
    """Seeded subset of ``size`` entries keeping the distribution of baseline counts.

    Entries are binned by ``n_base`` decile; each bin contributes in proportion
    to its population (largest-remainder rounding).
    """
    entries = [e for e in m.entries if e.sample_id in n_base]
    if size >= len(entries):
        return Manifest(list(entries), m.schema_version, m.base_dir)
    entries.sort(key=lambda e: (n_base[e.sample_id], e.sample_id))
    bins = np.array_split(np.arange(len(entries)), n_bins)
    quota = np.array([len(b) for b in bins], dtype=float) * size / len(entries)
    take = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - take), kind="stable")[: size - take.sum()]:
        take[i] += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for b, k in zip(bins, take):
        if k:
            chosen.extend(rng.choice(b, size=k, replace=False).tolist())
    keep = {entries[i].sample_id for i in chosen}
    return Manifest([e for e in m.entries if e.sample_id in keep], m.schema_version, m.base_dir)


def load_config(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def entries_from(items: Iterable[dict], base_dir: str = ".") -> Manifest:
    return parse_manifest({"schema_version": MANIFEST_SCHEMA, "entries": list(items)}, base_dir)
