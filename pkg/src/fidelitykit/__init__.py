"""Keypoint-matching fidelity metrics and crop-and-blend refinement tooling."""

__version__ = "0.1.0"

from .imgcore import Image, load_image, save_image  # noqa: E402
from .keypoints import DetectorConfig, FastBriefDetector, KeypointSet, detect_and_describe  # noqa: E402
from .matching import KeypointMatcher, MatcherConfig, MatchSet, RansacEstimator, match_count  # noqa: E402
from .metrics import aggregate, compute_aki, compute_k_gain, cosine_similarity  # noqa: E402
from .cropblend import CropRegion, poisson_blend, subject_crop  # noqa: E402
from .degrade import BandSplitDegrader, make_pseudo_pair, validate_degradation  # noqa: E402

__all__ = [
    "Image", "load_image", "save_image",
    "DetectorConfig", "FastBriefDetector", "KeypointSet", "detect_and_describe",
    "KeypointMatcher", "MatcherConfig", "MatchSet", "RansacEstimator", "match_count",
    "aggregate", "compute_aki", "compute_k_gain", "cosine_similarity",
    "CropRegion", "poisson_blend", "subject_crop",
    "BandSplitDegrader", "make_pseudo_pair", "validate_degradation",
]
