"""Reference refiners speaking the external refiner protocol.

Run as ``python -m fidelitykit.refiners {identity|oracle} SUBJECT CROP OUT``.
``identity`` copies the crop unchanged. ``oracle`` localises the subject in
the crop with the built-in matcher and warps the clean subject over it by the
verified model, which is what a perfect detail-restoring refiner would do.
"""

from __future__ import annotations

import shutil
import sys

import numpy as np

from .imgcore import load_image, save_image
from .matching import MatcherConfig, match_count
from .synthetic import warp_into


def identity_refine(subject_path: str, crop_path: str, out_path: str) -> None:
    shutil.copyfile(crop_path, out_path)


def oracle_refine(subject_path: str, crop_path: str, out_path: str, min_inliers: int = 6) -> None:
    subject = load_image(subject_path)
    crop = load_image(crop_path)
    res = match_count(subject, crop, MatcherConfig(kind="affine"))
    if res.count < min_inliers or res.matchset.model is None:
        save_image(crop, out_path)
        return
    warped, _ = warp_into(crop, subject, res.matchset.model.matrix)
    save_image(warped, out_path)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 4 or argv[0] not in ("identity", "oracle"):
        print("usage: python -m fidelitykit.refiners {identity|oracle} SUBJECT CROP OUT", file=sys.stderr)
        return 1
    fn = identity_refine if argv[0] == "identity" else oracle_refine
    fn(*argv[1:])
    return 0


if __name__ == "__main__":
    np.seterr(all="ignore")
    sys.exit(main())
