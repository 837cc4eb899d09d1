"""Small shared builders for tests."""

import numpy as np

from fidelitykit.imgcore import Image


def constant(w, h, value=0.5, channels=3):
    return Image(np.full((h, w, channels), value))


def planted_model(kind, rng):
    """Random well-conditioned affine or homography over a 500 px frame."""
    t = rng.uniform(-0.5, 0.5)
    s = rng.uniform(0.8, 1.2)
    m = np.eye(3)
    m[:2, :2] = s * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    m[:2, :2] += rng.uniform(-0.05, 0.05, (2, 2))
    m[:2, 2] = rng.uniform(-50, 50, 2)
    if kind == "homography":
        m[2, :2] = rng.uniform(-4e-4, 4e-4, 2)
    return m


def apply_h(m, pts):
    q = np.c_[pts, np.ones(len(pts))] @ m.T
    return q[:, :2] / q[:, 2:]


def planted_correspondences(kind, n_inliers, n_outliers, seed, noise=0.5, extent=500.0):
    """Returns (src, dst, is_inlier, matrix): inliers follow the model plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    m = planted_model(kind, rng)
    src = rng.uniform(0, extent, (n_inliers + n_outliers, 2))
    dst = apply_h(m, src)
    dst[:n_inliers] += rng.normal(0, noise, (n_inliers, 2))
    dst[n_inliers:] = rng.uniform(0, extent, (n_outliers, 2))
    truth = np.zeros(len(src), dtype=bool)
    truth[:n_inliers] = True
    perm = rng.permutation(len(src))
    return src[perm], dst[perm], truth[perm], m
