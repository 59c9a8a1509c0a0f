"""Camera projection and rigid/similarity alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .body_model import ArrayLike, _finish, _prep
from .errors import AlignmentDegenerateError, DegenerateGeometryError, InvalidArgumentError

DEFAULT_FOCAL = 1000.0
CANONICAL_SIZE = 224


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: shared focal length and principal point in pixels."""

    focal_length: float
    principal_point: tuple[float, float]

    @staticmethod
    def default(size: int = CANONICAL_SIZE, focal: float = DEFAULT_FOCAL) -> "CameraIntrinsics":
        # (size-1)/2 keeps horizontal flips exactly mirror-symmetric in pixel space
        c = (size - 1) / 2.0
        return CameraIntrinsics(focal_length=float(focal), principal_point=(c, c))


def unit_depth(body_height: float, cam: CameraIntrinsics, size: int = CANONICAL_SIZE) -> float:
    """Camera depth at which a body of the given height fills the canvas.

    Serves as the depth unit for sampling and for the regressor's initial
    camera estimate.
    """
    return body_height * cam.focal_length / float(size)


def project(points: ArrayLike, delta: ArrayLike, cam: CameraIntrinsics) -> ArrayLike:
    """Perspective projection of (..., K, 3) points translated by (..., 3).

    Returns pixel coordinates (..., K, 2). Raises DegenerateGeometryError if
    any translated point has non-positive depth; callers that need a soft
    variant clamp depths themselves before projecting.
    """
    pt, p_numpy = _prep(points)
    dt, d_numpy = _prep(delta)
    if pt.shape[-1] != 3 or dt.shape[-1] != 3:
        raise InvalidArgumentError("points and delta must have last dim 3")
    shifted = pt + dt[..., None, :]
    z = shifted[..., 2]
    if (z <= 0).any():
        raise DegenerateGeometryError("non-positive depth after translation")
    pp = torch.as_tensor(cam.principal_point, dtype=pt.dtype)
    uv = cam.focal_length * shifted[..., :2] / z[..., None] + pp
    return _finish(uv, p_numpy and d_numpy)


def project_clamped(
    points: torch.Tensor, delta: torch.Tensor, cam: CameraIntrinsics, min_depth: float = 0.5
) -> torch.Tensor:
    """Projection with depth clamped from below; used inside training where a
    transient non-positive depth estimate must not kill the step."""
    shifted = points + delta[..., None, :]
    z = shifted[..., 2].clamp_min(min_depth)
    pp = torch.as_tensor(cam.principal_point, dtype=points.dtype)
    return cam.focal_length * shifted[..., :2] / z[..., None] + pp


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Best similarity transform (scale, rotation, translation) of pred onto gt.

    Minimizes ||s R p + t - g||^2 over s > 0, R in SO(3), t. Reflections are
    corrected by sign-flipping the smallest singular direction. Inputs are
    (K, 3) with K >= 3; raises AlignmentDegenerateError on coincident points.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InvalidArgumentError(f"expected matching (K, 3) arrays, got {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 3:
        raise AlignmentDegenerateError("need at least 3 points to align")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p = pred - mu_p
    g = gt - mu_g
    var_p = (p**2).sum()
    if var_p < 1e-18 or (g**2).sum() < 1e-18:
        raise AlignmentDegenerateError("degenerate point set (all points coincident)")
    cov = g.T @ p
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.diag([1.0, 1.0, d])
    rot = u @ flip @ vt
    scale = (s * np.diag(flip)).sum() / var_p
    t = mu_g - scale * rot @ mu_p
    return (scale * (rot @ pred.T)).T + t
