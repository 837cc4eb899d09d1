"""Descriptor matching with RANSAC geometric verification.

The verified inlier count of a :class:`MatchSet` is the match count used by
the fidelity metrics. External matchers plug in through a small JSON schema
(see :func:`load_external_matches`).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .imgcore import check_image
from .keypoints import DetectorConfig, KeypointSet, detect_and_describe

EXTERNAL_SCHEMA_VERSION = "fk-matches-v1"
MIN_SAMPLES = {"affine": 3, "homography": 4}


class DegenerateConfigurationError(ValueError):
    pass


class InsufficientPairsError(ValueError):
    pass


class MatchSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Match:
    idx_a: int
    idx_b: int
    distance: int


@dataclass(frozen=True, eq=False)
class GeomModel:
    """Affine (6 coefficients, row-major top two rows) or homography (9, h33 = 1)."""

    kind: str
    coefficients: tuple

    def __post_init__(self):
        if self.kind not in MIN_SAMPLES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        n = 6 if self.kind == "affine" else 9
        if len(self.coefficients) != n:
            raise ValueError(f"{self.kind} needs {n} coefficients")
        if not all(math.isfinite(c) for c in self.coefficients):
            raise ValueError("non-finite model coefficients")
        if self.kind == "homography" and abs(np.linalg.det(self.matrix)) <= 1e-12:
            raise ValueError("singular homography")

    @classmethod
    def from_matrix(cls, kind: str, m: np.ndarray) -> "GeomModel":
        m = np.asarray(m, dtype=np.float64)
        if kind == "affine":
            return cls(kind, tuple(float(v) for v in m[:2].ravel()))
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        return cls(kind, tuple(float(v) for v in m.ravel()))

    @property
    def matrix(self) -> np.ndarray:
        if self.kind == "affine":
            return np.vstack([np.reshape(self.coefficients, (2, 3)), [0.0, 0.0, 1.0]])
        return np.reshape(self.coefficients, (3, 3)).astype(np.float64)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return project(self.matrix, pts)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "coefficients": list(self.coefficients)}

    @classmethod
    def from_dict(cls, d: dict) -> "GeomModel":
        return cls(d["kind"], tuple(float(c) for c in d["coefficients"]))


@dataclass(frozen=True)
class RansacConfig:
    kind: str = "homography"
    inlier_px: float = 3.0
    max_iters: int = 2000
    confidence: float = 0.995
    seed: int = 42
    refit: bool = True

    def __post_init__(self):
        if self.kind not in MIN_SAMPLES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.inlier_px <= 0 or self.max_iters < 1 or not 0 < self.confidence <= 1:
            raise ValueError("invalid RANSAC configuration")


@dataclass(frozen=True)
class MatcherConfig:
    """Full matcher configuration: detector, ratio test and RANSAC."""

    ratio: float = 0.8
    kind: str = "homography"
    inlier_px: float = 3.0
    max_iters: int = 2000
    confidence: float = 0.995
    seed: int = 42
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")
        self.ransac()  # validates the RANSAC fields

    def ransac(self) -> RansacConfig:
        return RansacConfig(self.kind, self.inlier_px, self.max_iters, self.confidence, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MatcherConfig":
        kw = {k: d[k] for k in cls.__dataclass_fields__ if k in d and k != "detector"}
        if "detector" in d:
            kw["detector"] = DetectorConfig.from_dict(d["detector"])
        return cls(**kw)


@dataclass(eq=False)
class MatchSet:
    """Candidate matches, the verified model and a per-match inlier mask.

    ``pts_a``/``pts_b`` hold the matched coordinates so a MatchSet can be
    exported without its KeypointSets.
    """

    matches: list[Match]
    pts_a: np.ndarray
    pts_b: np.ndarray
    model: GeomModel | None = None
    inlier_mask: np.ndarray | None = None
    rng_seed: int = 42
    image_a: str = ""
    image_b: str = ""
    scores: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.matches)
        self.pts_a = np.asarray(self.pts_a, dtype=np.float64).reshape(n, 2)
        self.pts_b = np.asarray(self.pts_b, dtype=np.float64).reshape(n, 2)
        if self.inlier_mask is None:
            self.inlier_mask = np.zeros(n, dtype=bool)
        self.inlier_mask = np.asarray(self.inlier_mask, dtype=bool)
        if self.inlier_mask.shape != (n,):
            raise ValueError("inlier mask length must equal the number of matches")

    def __len__(self) -> int:
        return len(self.matches)

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())

    @property
    def n_raw(self) -> int:
        return len(self.matches)

    def inlier_points(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pts_a[self.inlier_mask], self.pts_b[self.inlier_mask]

    def to_dict(self) -> dict:
        scores = self.scores if self.scores is not None else [m.distance for m in self.matches]
        return {
            "schema_version": EXTERNAL_SCHEMA_VERSION,
            "image_a": self.image_a,
            "image_b": self.image_b,
            "pairs": [
                {"xa": float(a[0]), "ya": float(a[1]), "xb": float(b[0]), "yb": float(b[1]), "score": float(s)}
                for a, b, s in zip(self.pts_a, self.pts_b, scores)
            ],
            "model": self.model.to_dict() if self.model else None,
            "inlier_mask": [bool(v) for v in self.inlier_mask],
            "rng_seed": self.rng_seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed (N, 32) and (M, 32) descriptor arrays."""
    ua = np.unpackbits(a, axis=1).astype(np.float32)
    ub = np.unpackbits(b, axis=1).astype(np.float32)
    common = ua @ ub.T
    d = ua.sum(1)[:, None] + ub.sum(1)[None, :] - 2.0 * common
    return np.rint(d).astype(np.int32)


def match_descriptors(a: KeypointSet, b: KeypointSet, ratio: float = 0.8) -> list[Match]:
    """Mutual nearest neighbours under Hamming distance with a ratio test.

    A match survives only if ``best < ratio * second_best`` within its query
    row; a query with a single candidate skips the test.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    if len(a) == 0 or len(b) == 0:
        return []
    d = hamming_matrix(a.descriptors, b.descriptors)
    fwd = d.argmin(axis=1)
    bwd = d.argmin(axis=0)
    rows = np.arange(len(a))
    best = d[rows, fwd]
    if d.shape[1] > 1:
        second = np.partition(d, 1, axis=1)[:, 1]
        passes = best < ratio * second
    else:
        passes = np.ones(len(a), dtype=bool)
    keep = (bwd[fwd] == rows) & passes
    return [Match(int(i), int(fwd[i]), int(best[i])) for i in np.flatnonzero(keep)]


def project(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = pts @ m[:2, :2].T + m[:2, 2]
    w = pts @ m[2, :2] + m[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return q / w[:, None]


def hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate to the centroid and scale so the mean distance is sqrt(2)."""
    c = pts.mean(axis=0)
    dist = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / dist if dist > 1e-12 else 1.0
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return project(t, pts), t


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-6) -> bool:
    n, _ = hartley_normalize(pts)
    for i, j, k in combinations(range(len(n)), 3):
        u, v = n[j] - n[i], n[k] - n[i]
        if abs(u[0] * v[1] - u[1] * v[0]) < tol:
            return True
    return False


def _fit_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = np.hstack([src, np.ones((len(src), 1))])
    coef, _, rank, _ = np.linalg.lstsq(a, dst, rcond=None)
    if rank < 3:
        raise DegenerateConfigurationError("affine fit is rank deficient")
    return np.vstack([coef.T, [0.0, 0.0, 1.0]])


def _fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ns, ts = hartley_normalize(src)
    nd, td = hartley_normalize(dst)
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    zero, one = np.zeros_like(x), np.ones_like(x)
    a = np.empty((2 * len(x), 9))
    a[0::2] = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=1)
    a[1::2] = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=1)
    _, sv, vt = np.linalg.svd(a)
    if len(sv) >= 8 and sv[7] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("homography DLT is rank deficient")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(h[2, 2]) > 1e-12:
        h = h / h[2, 2]
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) <= 1e-12:
        raise DegenerateConfigurationError("singular homography")
    return h


def estimate_model(src, dst, kind: str = "homography") -> GeomModel:
    """Least-squares affine or normalised-DLT homography mapping ``src`` to ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if kind not in MIN_SAMPLES:
        raise ValueError(f"unknown model kind {kind!r}")
    if len(src) != len(dst):
        raise ValueError("src and dst differ in length")
    need = MIN_SAMPLES[kind]
    if len(src) < need:
        raise InsufficientPairsError(f"{kind} needs >= {need} pairs, got {len(src)}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValueError("non-finite coordinates")
    if len(src) == need and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise DegenerateConfigurationError("minimal sample contains a collinear triple")
    m = _fit_affine(src, dst) if kind == "affine" else _fit_homography(src, dst)
    return GeomModel.from_matrix(kind, m)


def transfer_error(m: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Symmetric transfer error: RMS of the forward and backward reprojection distances."""
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError:
        return np.full(len(src), np.inf)
    fwd = ((project(m, src) - dst) ** 2).sum(axis=1)
    bwd = ((project(inv, dst) - src) ** 2).sum(axis=1)
    err = np.sqrt(0.5 * (fwd + bwd))
    return np.where(np.isfinite(err), err, np.inf)


def _adaptive_bound(inlier_ratio: float, s: int, confidence: float) -> float:
    if inlier_ratio <= 0:
        return math.inf
    if inlier_ratio >= 1 or confidence >= 1:
        return 0.0 if inlier_ratio >= 1 else math.inf
    p = inlier_ratio ** s
    if p >= 1:
        return 0.0
    return math.log(1.0 - confidence) / math.log(1.0 - p)


def ransac_points(src, dst, cfg: RansacConfig | None = None) -> tuple[GeomModel | None, np.ndarray]:
    """Seeded RANSAC on point pairs. Returns ``(model or None, inlier_mask)``.

    Hypotheses come from minimal samples drawn by ``numpy.random.default_rng(seed)``;
    the loop stops at ``max_iters`` or once the adaptive bound
    ``log(1 - confidence) / log(1 - w**s)`` is reached. The best hypothesis is
    refit on its inliers and the refit is kept when it does not lose inliers.
    """
    cfg = cfg or RansacConfig()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    s = MIN_SAMPLES[cfg.kind]
    if n < s:
        return None, np.zeros(n, dtype=bool)
    rng = np.random.default_rng(cfg.seed)
    best_m, best_mask, best_count = None, np.zeros(n, dtype=bool), 0
    bound = math.inf
    it = 0
    while it < cfg.max_iters and it < bound:
        it += 1
        sample = rng.choice(n, size=s, replace=False)
        try:
            m = estimate_model(src[sample], dst[sample], cfg.kind).matrix
        except (DegenerateConfigurationError, np.linalg.LinAlgError):
            continue
        mask = transfer_error(m, src, dst) <= cfg.inlier_px
        count = int(mask.sum())
        if count > best_count:
            best_m, best_mask, best_count = m, mask, count
            bound = _adaptive_bound(count / n, s, cfg.confidence)
    if best_m is None:
        return None, np.zeros(n, dtype=bool)
    if cfg.refit and best_count > s:
        try:
            m = estimate_model(src[best_mask], dst[best_mask], cfg.kind).matrix
            mask = transfer_error(m, src, dst) <= cfg.inlier_px
            if mask.sum() >= best_count:
                best_m, best_mask = m, mask
        except (DegenerateConfigurationError, np.linalg.LinAlgError):
            pass
    try:
        model = GeomModel.from_matrix(cfg.kind, best_m)
    except ValueError:
        return None, np.zeros(n, dtype=bool)
    return model, best_mask


def ransac_verify(matches: list[Match], a: KeypointSet, b: KeypointSet, cfg: RansacConfig | None = None) -> MatchSet:
    cfg = cfg or RansacConfig()
    ia = [m.idx_a for m in matches]
    ib = [m.idx_b for m in matches]
    pa = a.xy[ia] if matches else np.zeros((0, 2))
    pb = b.xy[ib] if matches else np.zeros((0, 2))
    model, mask = ransac_points(pa, pb, cfg)
    return MatchSet(list(matches), pa, pb, model, mask, cfg.seed, a.image_id, b.image_id)


@dataclass(eq=False)
class MatchResult:
    count: int
    raw_count: int
    matchset: MatchSet
    kps_ref: KeypointSet
    kps_other: KeypointSet


def match_keypoint_sets(kps_ref: KeypointSet, kps_other: KeypointSet, cfg: MatcherConfig | None = None) -> MatchResult:
    cfg = cfg or MatcherConfig()
    cands = match_descriptors(kps_ref, kps_other, cfg.ratio)
    ms = ransac_verify(cands, kps_ref, kps_other, cfg.ransac())
    return MatchResult(ms.n_inliers, ms.n_raw, ms, kps_ref, kps_other)


def match_count(img_ref, img_other, cfg: MatcherConfig | None = None, *,
                kps_ref: KeypointSet | None = None) -> MatchResult:
    """Detect, describe, match and verify; ``count`` is the RANSAC inlier count.

    Pass a precomputed ``kps_ref`` to reuse the reference detection.
    """
    cfg = cfg or MatcherConfig()
    if kps_ref is None:
        kps_ref = detect_and_describe(check_image(img_ref), cfg.detector, "ref")
    kps_other = detect_and_describe(check_image(img_other), cfg.detector, "other")
    return match_keypoint_sets(kps_ref, kps_other, cfg)


def _finite(v, where: str) -> float:
    try:
        f = float(v)
    except (TypeError, ValueError):
        raise MatchSchemaError(f"{where}: not a number: {v!r}") from None
    if not math.isfinite(f):
        raise MatchSchemaError(f"{where}: non-finite coordinate {v!r}")
    return f


def parse_external_matches(doc: dict, *, verify: RansacConfig | None = None) -> MatchSet:
    if not isinstance(doc, dict) or not isinstance(doc.get("pairs"), list):
        raise MatchSchemaError("expected an object with a 'pairs' list")
    pts_a, pts_b, scores = [], [], []
    for i, p in enumerate(doc["pairs"]):
        if not isinstance(p, dict):
            raise MatchSchemaError(f"pairs[{i}]: expected an object")
        missing = [k for k in ("xa", "ya", "xb", "yb") if k not in p]
        if missing:
            raise MatchSchemaError(f"pairs[{i}]: missing {', '.join(missing)}")
        pts_a.append((_finite(p["xa"], f"pairs[{i}].xa"), _finite(p["ya"], f"pairs[{i}].ya")))
        pts_b.append((_finite(p["xb"], f"pairs[{i}].xb"), _finite(p["yb"], f"pairs[{i}].yb")))
        scores.append(_finite(p.get("score", 0.0), f"pairs[{i}].score"))
    n = len(pts_a)
    matches = [Match(i, i, 0) for i in range(n)]
    pa = np.array(pts_a, dtype=np.float64).reshape(n, 2)
    pb = np.array(pts_b, dtype=np.float64).reshape(n, 2)
    seed = int(doc.get("rng_seed", verify.seed if verify else 42))
    if verify is not None:
        model, mask = ransac_points(pa, pb, verify)
        seed = verify.seed
    else:
        model = GeomModel.from_dict(doc["model"]) if doc.get("model") else None
        mask = doc.get("inlier_mask")
        if mask is None:
            mask = np.ones(n, dtype=bool)
        elif len(mask) != n:
            raise MatchSchemaError("inlier_mask length differs from pairs")
    return MatchSet(matches, pa, pb, model, np.asarray(mask, dtype=bool), seed,
                    str(doc.get("image_a", "")), str(doc.get("image_b", "")), np.array(scores))


def load_external_matches(path, *, verify: RansacConfig | None = None) -> MatchSet:
    """Read ``{image_a, image_b, pairs: [{xa, ya, xb, yb, score}]}``.

    Without ``verify`` the file's ``inlier_mask`` is used when present and every
    pair counts as an inlier otherwise. With ``verify`` the imported
    coordinates are re-verified by RANSAC.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MatchSchemaError(f"{path}: invalid JSON: {exc}") from exc
    return parse_external_matches(doc, verify=verify)


class RansacEstimator(BaseEstimator):
    """``fit(src, dst)`` estimates a model; ``predict(points)`` maps points through it."""

    def __init__(self, kind="homography", inlier_px=3.0, max_iters=2000, confidence=0.995,
                 random_state=42, refit=True):
        self.kind = kind
        self.inlier_px = inlier_px
        self.max_iters = max_iters
        self.confidence = confidence
        self.random_state = random_state
        self.refit = refit

    def fit(self, X, y):
        cfg = RansacConfig(self.kind, self.inlier_px, self.max_iters, self.confidence,
                           int(self.random_state), self.refit)
        self.model_, self.inlier_mask_ = ransac_points(X, y, cfg)
        self.n_inliers_ = int(self.inlier_mask_.sum())
        return self

    def predict(self, X) -> np.ndarray:
        if getattr(self, "model_", None) is None:
            raise ValueError("no model: call fit first (or the fit found no consensus)")
        return self.model_.apply(X)


class KeypointMatcher(BaseEstimator):
    """Reference-anchored matcher: ``fit(reference)`` then ``predict(images)`` gives inlier counts."""

    def __init__(self, ratio=0.8, kind="homography", inlier_px=3.0, max_iters=2000, confidence=0.995,
                 random_state=42, detector=None):
        self.ratio = ratio
        self.kind = kind
        self.inlier_px = inlier_px
        self.max_iters = max_iters
        self.confidence = confidence
        self.random_state = random_state
        self.detector = detector

    def config(self) -> MatcherConfig:
        return MatcherConfig(self.ratio, self.kind, self.inlier_px, self.max_iters, self.confidence,
                             int(self.random_state), self.detector or DetectorConfig())

    def fit(self, X, y=None):
        self.config_ = self.config()
        self.reference_keypoints_ = detect_and_describe(check_image(X), self.config_.detector, "ref")
        return self

    def match(self, image) -> MatchResult:
        if not hasattr(self, "reference_keypoints_"):
            raise ValueError("call fit(reference) first")
        return match_count(None, image, self.config_, kps_ref=self.reference_keypoints_)

    def predict(self, X) -> np.ndarray:
        return np.array([self.match(img).count for img in X], dtype=int)
