"""Synthetic parametric body model.

A body is defined by a template mesh, a linear shape basis, skinning weights,
a joint hierarchy, and a joint regressor. Posing follows the classic skinned
parametric-body recipe:

1. shape blendshapes displace the template: V(beta) = T + sum_b beta_b * S_b
2. per-joint axis-angle rotations are chained through the kinematic tree
3. linear blend skinning maps each vertex through its weighted bone transforms
4. 3D joints are a convex regression from posed vertices: X = W_reg @ M

Everything is differentiable through torch; numpy arrays in give numpy arrays
out (computed in float64).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import torch

from . import arrayio
from .errors import InvalidArgumentError

ArrayLike = Union[np.ndarray, torch.Tensor]

# below this rotation angle the sin/cos ratios switch to their series expansions
SMALL_ANGLE = 1e-8
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class BodyParams:
    """One body instance: shape coefficients, pose, camera translation.

    beta: (10,) shape coefficients
    theta: (3K,) per-joint axis-angle, root first
    delta: (3,) translation applied in front of the camera (delta_z > 0)
    """

    beta: np.ndarray
    theta: np.ndarray
    delta: np.ndarray

    def validate(self, num_joints: int) -> None:
        if self.beta.shape != (10,):
            raise InvalidArgumentError(f"beta shape {self.beta.shape}, expected (10,)")
        if self.theta.shape != (3 * num_joints,):
            raise InvalidArgumentError(
                f"theta shape {self.theta.shape}, expected ({3 * num_joints},)"
            )
        if self.delta.shape != (3,):
            raise InvalidArgumentError(f"delta shape {self.delta.shape}, expected (3,)")
        for name, arr in (("beta", self.beta), ("theta", self.theta), ("delta", self.delta)):
            if not np.isfinite(arr).all():
                raise InvalidArgumentError(f"{name} contains non-finite values")
        angles = np.linalg.norm(canonicalize_theta(self.theta).reshape(-1, 3), axis=-1)
        if (angles >= TWO_PI).any():
            raise InvalidArgumentError("theta not canonicalizable below 2*pi")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.theta, self.delta]).astype(np.float64)


@dataclass(frozen=True)
class BodyModelDefinition:
    """Immutable body model description.

    template_vertices: (N, 3)
    shape_basis: (10, N, 3) per-coefficient vertex displacement fields
    skin_weights: (N, K) rows nonnegative, summing to 1
    parent: (K,) parent joint index, parent[0] == -1, parent[j] < j
    rest_joints: (K, 3) joint centers in the template pose
    joint_regressor: (K, N) convex rows mapping vertices to joints
    mirror_map: (K,) left/right counterpart index (self for unpaired joints)
    """

    template_vertices: np.ndarray
    shape_basis: np.ndarray
    skin_weights: np.ndarray
    parent: np.ndarray
    rest_joints: np.ndarray
    joint_regressor: np.ndarray
    mirror_map: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.rest_joints.shape[0]

    @property
    def param_dim(self) -> int:
        """Length of the [beta, theta, delta] parameter vector."""
        return 10 + 3 * self.num_joints + 3

    def height(self) -> float:
        """Vertical extent of the rest skeleton, used as the body size unit."""
        ys = self.rest_joints[:, 1]
        return float(ys.max() - ys.min())

    def validate(self) -> None:
        n, k = self.num_vertices, self.num_joints
        if self.template_vertices.shape != (n, 3):
            raise InvalidArgumentError("template_vertices must be (N, 3)")
        if self.shape_basis.shape != (10, n, 3):
            raise InvalidArgumentError(f"shape_basis shape {self.shape_basis.shape}")
        if self.skin_weights.shape != (n, k):
            raise InvalidArgumentError(f"skin_weights shape {self.skin_weights.shape}")
        if self.rest_joints.shape != (k, 3):
            raise InvalidArgumentError(f"rest_joints shape {self.rest_joints.shape}")
        if self.joint_regressor.shape != (k, n):
            raise InvalidArgumentError(f"joint_regressor shape {self.joint_regressor.shape}")
        if self.parent.shape != (k,) or self.mirror_map.shape != (k,):
            raise InvalidArgumentError("parent/mirror_map must be (K,)")
        if self.parent[0] != -1:
            raise InvalidArgumentError("parent[0] must be -1 (root)")
        for j in range(1, k):
            if not 0 <= self.parent[j] < j:
                raise InvalidArgumentError(f"parent[{j}]={self.parent[j]} breaks topological order")
        if (self.skin_weights < -1e-9).any():
            raise InvalidArgumentError("skin_weights must be nonnegative")
        if np.abs(self.skin_weights.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidArgumentError("skin_weights rows must sum to 1")
        if (self.joint_regressor < -1e-9).any():
            raise InvalidArgumentError("joint_regressor must be nonnegative")
        if np.abs(self.joint_regressor.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidArgumentError("joint_regressor rows must sum to 1")
        mm = self.mirror_map.astype(np.int64)
        if (mm < 0).any() or (mm >= k).any() or (mm[mm] != np.arange(k)).any():
            raise InvalidArgumentError("mirror_map must be an involution on joint indices")

    def tensors(self, dtype: torch.dtype) -> dict:
        """Model arrays as torch tensors, cached per dtype."""
        key = str(dtype)
        if key not in self._cache:
            self._cache[key] = {
                "template": torch.as_tensor(self.template_vertices, dtype=dtype),
                "basis": torch.as_tensor(self.shape_basis, dtype=dtype),
                "skin": torch.as_tensor(self.skin_weights, dtype=dtype),
                "rest": torch.as_tensor(self.rest_joints, dtype=dtype),
                "regressor": torch.as_tensor(self.joint_regressor, dtype=dtype),
            }
        return self._cache[key]


def _prep(x: ArrayLike) -> tuple[torch.Tensor, bool]:
    """Convert array-likes to torch; remember whether to convert back."""
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _finish(t: torch.Tensor, to_numpy: bool):
    return t.detach().numpy() if to_numpy else t


def _skew(v: torch.Tensor) -> torch.Tensor:
    """Cross-product matrix of v, batched over leading dims."""
    zero = torch.zeros_like(v[..., 0])
    rows = [
        torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
        torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
        torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def rodrigues(axis_angle: ArrayLike) -> ArrayLike:
    """Axis-angle vector(s) (..., 3) to rotation matrix (..., 3, 3).

    Uses the closed form R = I + sin(t)/t S + (1-cos t)/t^2 S^2 with a
    second-order series below angle 1e-8 so the zero vector maps exactly to
    the identity and gradients stay finite at the origin.
    """
    v, to_numpy = _prep(axis_angle)
    if v.shape[-1] != 3:
        raise InvalidArgumentError(f"axis-angle last dim must be 3, got {v.shape}")
    sq = (v * v).sum(dim=-1)
    small = sq < SMALL_ANGLE * SMALL_ANGLE
    # keep sqrt away from 0 so the unused branch of the where cannot poison grads
    sq_safe = torch.where(small, torch.ones_like(sq), sq)
    angle = torch.sqrt(sq_safe)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / sq_safe)
    s = _skew(v)
    eye = torch.eye(3, dtype=v.dtype).expand(s.shape)
    r = eye + a[..., None, None] * s + b[..., None, None] * (s @ s)
    return _finish(r, to_numpy)


def canonicalize_theta(theta: ArrayLike) -> ArrayLike:
    """Reduce each joint's axis-angle magnitude modulo 2*pi, keeping the axis.

    Angles already below 2*pi pass through bit-exactly (the reduction factor
    is exactly 1.0), so gradients are unaffected in the common case.
    """
    t, to_numpy = _prep(theta)
    if t.shape[-1] % 3 != 0:
        raise InvalidArgumentError("theta length must be a multiple of 3")
    shape = t.shape
    v = t.reshape(*shape[:-1], shape[-1] // 3, 3)
    sq = (v * v).sum(dim=-1)
    pos = sq > 0
    sq_safe = torch.where(pos, sq, torch.ones_like(sq))
    angle = torch.sqrt(sq_safe)
    scale = torch.where(pos, torch.remainder(angle, TWO_PI) / angle, torch.ones_like(angle))
    out = (v * scale[..., None]).reshape(shape)
    return _finish(out, to_numpy)


def forward_kinematics(
    model: BodyModelDefinition, rot: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Chain per-joint rotations through the tree.

    rot: (..., K, 3, 3) local joint rotations.
    Returns world rotations (..., K, 3, 3) and world joint positions (..., K, 3).
    """
    rest = model.tensors(rot.dtype)["rest"]
    k = model.num_joints
    world_r = [rot[..., 0, :, :]]
    world_t = [rest[0].expand(rot.shape[:-3] + (3,))]
    for j in range(1, k):
        p = int(model.parent[j])
        offset = rest[j] - rest[p]
        world_r.append(world_r[p] @ rot[..., j, :, :])
        world_t.append(world_t[p] + (world_r[p] @ offset).reshape(world_t[p].shape))
    return torch.stack(world_r, dim=-3), torch.stack(world_t, dim=-2)


def smpl_forward(model: BodyModelDefinition, beta: ArrayLike, theta: ArrayLike) -> ArrayLike:
    """Pose the body: shape blendshapes, kinematic chain, linear blend skinning.

    beta (..., 10) and theta (..., 3K) broadcast over leading dims; returns
    posed vertices (..., N, 3) in the body frame (root at the rest root).
    """
    bt, b_numpy = _prep(beta)
    tt, t_numpy = _prep(theta)
    if bt.shape[-1] != 10:
        raise InvalidArgumentError(f"beta last dim must be 10, got {bt.shape}")
    if tt.shape[-1] != 3 * model.num_joints:
        raise InvalidArgumentError(
            f"theta last dim must be {3 * model.num_joints}, got {tt.shape}"
        )
    tt = canonicalize_theta(tt)
    md = model.tensors(bt.dtype)
    shaped = md["template"] + torch.einsum("...b,bnd->...nd", bt, md["basis"])
    rot = rodrigues(tt.reshape(*tt.shape[:-1], model.num_joints, 3))
    world_r, world_t = forward_kinematics(model, rot)
    # per-bone affine: x -> world_r (x - rest) + world_t, blended by skin weights
    rest = md["rest"]
    trans = world_t - torch.einsum("...kij,kj->...ki", world_r, rest)
    blend_r = torch.einsum("nk,...kij->...nij", md["skin"], world_r)
    blend_t = torch.einsum("nk,...ki->...ni", md["skin"], trans)
    verts = torch.einsum("...nij,...nj->...ni", blend_r, shaped) + blend_t
    return _finish(verts, b_numpy and t_numpy)


def joints3d(model: BodyModelDefinition, vertices: ArrayLike) -> ArrayLike:
    """Regress joint centers from posed vertices: X = W_reg @ M."""
    vt, to_numpy = _prep(vertices)
    reg = model.tensors(vt.dtype)["regressor"]
    out = torch.einsum("kn,...nd->...kd", reg, vt)
    return _finish(out, to_numpy)


def _build_skeleton(num_joints: int, rng: np.random.Generator):
    """Generic symmetric skeleton.

    Layout: root (0), spine top (1), then every left-side joint, then their
    right-side mirrors in the same order, then an optional centerline head.
    Grouping all left joints before all right joints keeps each mirror pair
    exactly half-block apart, which at the desk default K=8 makes mirrored
    joints share their render channel (index mod 3) so horizontal flips stay
    label-exact.
    """
    if num_joints < 2:
        raise InvalidArgumentError("need at least 2 joints")
    positions = [np.zeros(3), np.array([0.0, 0.55, 0.0])]
    parents = [-1, 0]
    half = (num_joints - 2) // 2
    head = (num_joints - 2) % 2 == 1
    # left-side slots: (parent ref, base position); refs 0/1 are root/spine,
    # "Lx" refers to the x-th left slot (limb extension)
    slots: list[tuple] = [
        (1, np.array([0.40, 0.48, 0.0])),
        (0, np.array([0.16, -0.85, 0.0])),
        ("L0", np.array([0.70, 0.40, 0.0])),
        ("L1", np.array([0.20, -1.45, 0.0])),
        ("L2", np.array([0.95, 0.30, 0.0])),
        ("L3", np.array([0.24, -1.95, 0.0])),
    ]
    left_pos = []
    left_parent = []
    for s in range(half):
        if s < len(slots):
            ref, base = slots[s]
        else:
            ref, base = f"L{s - 1}", left_pos[s - 1] + np.array([0.22, -0.08, 0.0])
        jitter = rng.normal(0.0, 0.015, size=3)
        left_pos.append(base + jitter)
        left_parent.append(ref)
    mirror_x = np.array([-1.0, 1.0, 1.0])

    def resolve(ref, right: bool) -> int:
        if isinstance(ref, int):
            return ref
        idx = int(ref[1:])
        return 2 + idx + (half if right else 0)

    for s in range(half):
        positions.append(left_pos[s])
        parents.append(resolve(left_parent[s], right=False))
    for s in range(half):
        positions.append(left_pos[s] * mirror_x)
        parents.append(resolve(left_parent[s], right=True))
    if head:
        jitter = rng.normal(0.0, 0.01, size=3) * np.array([0.0, 1.0, 1.0])
        positions.append(np.array([0.0, 0.95, 0.0]) + jitter)
        parents.append(1)
    mirror = list(range(len(positions)))
    for s in range(half):
        mirror[2 + s] = 2 + half + s
        mirror[2 + half + s] = 2 + s
    return (
        np.stack(positions).astype(np.float64),
        np.asarray(parents, dtype=np.int64),
        np.asarray(mirror, dtype=np.int64),
    )


def make_synthetic_model(
    seed: int, num_vertices: int = 128, num_joints: int = 8
) -> BodyModelDefinition:
    """Deterministically build a body model from a seed.

    Vertices are scattered around the bones, skinning weights fall off with a
    Gaussian RBF on joint distance (softmax-normalized), the joint regressor
    averages the 8 nearest vertices per joint, and the shape basis is 10
    smooth low-frequency displacement fields with bounded magnitude.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xB0D1])))
    rest, parent, mirror = _build_skeleton(num_joints, rng)
    k = rest.shape[0]

    # vertices come in mirrored pairs (i, half+i) so the mesh, skinning, and
    # regressor are exactly left/right symmetric; an odd leftover vertex sits
    # on the centerline
    mirror_x = np.array([-1.0, 1.0, 1.0])
    half = num_vertices // 2
    bones = [(int(parent[j]), j) for j in range(1, k)] + [(0, 0)]
    bone_idx = rng.integers(0, len(bones), size=half)
    t = rng.uniform(0.0, 1.0, size=half)
    offsets = rng.normal(0.0, 0.07, size=(half, 3))
    verts = np.empty((num_vertices, 3))
    for i in range(half):
        a, b = bones[bone_idx[i]]
        verts[i] = rest[a] * (1 - t[i]) + rest[b] * t[i] + offsets[i]
        verts[half + i] = verts[i] * mirror_x
    if num_vertices % 2 == 1:
        spine_t = rng.uniform(0.0, 1.0)
        verts[-1] = rest[1] * spine_t + rng.normal(0.0, 0.05, 3) * np.array([0.0, 1.0, 1.0])

    d2 = ((verts[:, None, :] - rest[None, :, :]) ** 2).sum(axis=2)
    logits = -d2 / (2.0 * 0.14**2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    skin = w / w.sum(axis=1, keepdims=True)

    reg = np.zeros((k, num_vertices))
    take = min(8, num_vertices)
    for j in range(k):
        d = np.sqrt(d2[:, j])
        nearest = np.argsort(d, kind="stable")[:take]
        rw = np.exp(-d[nearest] ** 2 / (2.0 * 0.1**2))
        reg[j, nearest] = rw / rw.sum()

    # shape fields are computed on the left half and mirrored, keeping the
    # basis symmetric so flipped images stay consistent with shape labels
    basis = np.empty((10, num_vertices, 3))
    for b in range(10):
        disp = np.zeros((num_vertices, 3))
        for _ in range(3):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            freq = direction * rng.uniform(0.4, 1.2)
            phase = rng.uniform(0.0, TWO_PI)
            amp = rng.normal(0.0, 1.0, size=3)
            disp += amp[None, :] * np.sin(TWO_PI * (verts @ freq) + phase)[:, None]
        disp[half : 2 * half] = disp[:half] * mirror_x
        if num_vertices % 2 == 1:
            disp[-1, 0] = 0.0
        maxnorm = np.linalg.norm(disp, axis=1).max()
        basis[b] = disp * (0.025 / max(maxnorm, 1e-12))

    model = BodyModelDefinition(
        template_vertices=verts,
        shape_basis=basis,
        skin_weights=skin,
        parent=parent,
        rest_joints=rest,
        joint_regressor=reg,
        mirror_map=mirror,
    )
    model.validate()
    return model


MODEL_MANIFEST = "model_manifest.json"


def save_model(model: BodyModelDefinition, path: str) -> None:
    arrays = {
        "template_vertices": model.template_vertices,
        "shape_basis": model.shape_basis,
        "skin_weights": model.skin_weights,
        "parent": model.parent.astype(np.float32),
        "rest_joints": model.rest_joints,
        "joint_regressor": model.joint_regressor,
        "mirror_map": model.mirror_map.astype(np.float32),
    }
    arrayio.write_array_dir(
        path,
        arrays,
        manifest_name=MODEL_MANIFEST,
        extra={"kind": "body_model", "num_vertices": model.num_vertices, "num_joints": model.num_joints},
    )


def load_model(path: str) -> BodyModelDefinition:
    arrays, _ = arrayio.read_array_dir(path, manifest_name=MODEL_MANIFEST)
    # renormalize rows that f32 rounding nudged off exact sums
    skin = arrays["skin_weights"].astype(np.float64)
    skin /= skin.sum(axis=1, keepdims=True)
    reg = arrays["joint_regressor"].astype(np.float64)
    reg /= reg.sum(axis=1, keepdims=True)
    model = BodyModelDefinition(
        template_vertices=arrays["template_vertices"].astype(np.float64),
        shape_basis=arrays["shape_basis"].astype(np.float64),
        skin_weights=skin,
        parent=arrays["parent"].astype(np.int64),
        rest_joints=arrays["rest_joints"].astype(np.float64),
        joint_regressor=reg,
        mirror_map=arrays["mirror_map"].astype(np.int64),
    )
    model.validate()
    return model
