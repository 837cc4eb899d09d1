"""AKI, K_Gain, embedding cosine similarity and per-group aggregation."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EMBEDDING_MAGIC = b"FKEV"


class NoSamplesError(ValueError):
    def __init__(self, msg: str = "no samples"):
        super().__init__(msg)


@dataclass(frozen=True)
class SampleResult:
    sample_id: str
    n_base: int
    n_refined: int
    method_tag: str = ""
    backbone_tag: str = ""
    n_base_raw: int | None = None
    n_refined_raw: int | None = None
    clip_i: float | None = None
    dino: float | None = None

    def __post_init__(self):
        if self.n_base < 0 or self.n_refined < 0:
            raise ValueError("match counts must be >= 0")

    @property
    def aki(self) -> int:
        return compute_aki(self.n_refined, self.n_base)

    def to_dict(self) -> dict:
        d = {"sample_id": self.sample_id, "method_tag": self.method_tag, "backbone_tag": self.backbone_tag,
             "n_base": self.n_base, "n_refined": self.n_refined, "aki": self.aki,
             "n_base_raw": self.n_base_raw, "n_refined_raw": self.n_refined_raw}
        if self.clip_i is not None:
            d["clip_i"] = self.clip_i
        if self.dino is not None:
            d["dino"] = self.dino
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleResult":
        return cls(d["sample_id"], int(d["n_base"]), int(d["n_refined"]), d.get("method_tag", ""),
                   d.get("backbone_tag", ""), d.get("n_base_raw"), d.get("n_refined_raw"),
                   d.get("clip_i"), d.get("dino"))


@dataclass(frozen=True)
class ReportSummary:
    n_samples: int
    n_improved: int
    mean_aki: float
    k_gain: float
    tau: int
    method_tag: str = ""
    backbone_tag: str = ""
    mean_clip_i: float | None = None
    mean_dino: float | None = None

    def to_dict(self) -> dict:
        return {
            "method_tag": self.method_tag, "backbone_tag": self.backbone_tag,
            "n_samples": self.n_samples, "n_improved": self.n_improved, "tau": self.tau,
            "mean_aki": self.mean_aki, "k_gain": self.k_gain, "k_gain_pct": format_percent(self.k_gain),
            "mean_clip_i": self.mean_clip_i, "mean_dino": self.mean_dino,
        }


def compute_aki(n_refined: int, n_base: int) -> int:
    """Absolute keypoint increase: signed, never clamped."""
    if n_refined < 0 or n_base < 0:
        raise ValueError("match counts must be >= 0")
    return int(n_refined) - int(n_base)


def count_improved(akis: Iterable[int], tau: int = 0) -> int:
    return sum(1 for a in akis if a > tau)


def compute_k_gain(akis: Sequence[int], tau: int = 0) -> float:
    """Fraction of samples whose AKI is strictly greater than ``tau``."""
    akis = list(akis)
    if not akis:
        raise NoSamplesError()
    return count_improved(akis, tau) / len(akis)


def format_percent(fraction: float) -> str:
    return f"{100.0 * fraction:.1f}%"


def cosine_similarity(a, b) -> float:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "values", b), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero vector has no direction")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _mean_present(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(results: Sequence[SampleResult], tau: int = 0, *, method_tag: str = "",
              backbone_tag: str = "") -> ReportSummary:
    if not results:
        raise NoSamplesError()
    n = len(results)
    # Integer sums first so the mean is exact up to the final division.
    total = sum(r.n_refined for r in results) - sum(r.n_base for r in results)
    akis = [r.aki for r in results]
    return ReportSummary(
        n_samples=n,
        n_improved=count_improved(akis, tau),
        mean_aki=total / n,
        k_gain=compute_k_gain(akis, tau),
        tau=tau,
        method_tag=method_tag,
        backbone_tag=backbone_tag,
        mean_clip_i=_mean_present([r.clip_i for r in results]),
        mean_dino=_mean_present([r.dino for r in results]),
    )


def aggregate_groups(results: Sequence[SampleResult], tau: int = 0) -> list[ReportSummary]:
    """One summary per (method_tag, backbone_tag), sorted by key."""
    groups: dict[tuple[str, str], list[SampleResult]] = {}
    for r in results:
        groups.setdefault((r.method_tag, r.backbone_tag), []).append(r)
    return [aggregate(groups[k], tau, method_tag=k[0], backbone_tag=k[1]) for k in sorted(groups)]


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    image_id: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size == 0:
            raise ValueError("embedding must have dim > 0")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"embedding {self.image_id!r} has non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size


def load_embedding(path) -> EmbeddingVector:
    """Read a JSON ``{image_id, dim, values}`` file or the binary form.

    Binary layout (little-endian): 4-byte magic ``FKEV``, uint32 dim, then
    ``dim`` float32 values. The image id of a binary file is its stem.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == EMBEDDING_MAGIC:
        (dim,) = struct.unpack("<I", raw[4:8])
        if len(raw) != 8 + 4 * dim:
            raise ValueError(f"{path}: expected {dim} float32 values")
        return EmbeddingVector(path.stem, np.frombuffer(raw[8:], dtype="<f4").astype(np.float64))
    doc = json.loads(raw)
    if not isinstance(doc, dict) or not isinstance(doc.get("values"), list):
        raise ValueError(f"{path}: expected an object with a 'values' list")
    values = doc["values"]
    if "dim" in doc and int(doc["dim"]) != len(values):
        raise ValueError(f"{path}: dim {doc['dim']} != {len(values)} values")
    return EmbeddingVector(str(doc.get("image_id", path.stem)), np.asarray(values, dtype=np.float64))


def save_embedding(vec: EmbeddingVector, path, binary: bool = False) -> None:
    path = Path(path)
    if binary:
        path.write_bytes(EMBEDDING_MAGIC + struct.pack("<I", vec.dim) + vec.values.astype("<f4").tobytes())
    else:
        path.write_text(json.dumps({"image_id": vec.image_id, "dim": vec.dim, "values": vec.values.tolist()}))


def load_embedding_dir(directory) -> dict[str, EmbeddingVector]:
    """All ``*.json`` / ``*.bin`` embeddings in ``directory`` keyed by image id."""
    out = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix in (".json", ".bin"):
            vec = load_embedding(p)
            out[vec.image_id] = vec
    return out

