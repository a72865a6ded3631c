"""SE(3) pose algebra and planar-rotation actions on gripper action vectors.

Actions are flattened so that noising/denoising can treat them as plain
vectors.  For absolute control the pose is reduced to a 10-vector (6D
rotation, translation, width) transforming as rho1^3 + (rho1 + rho0) + rho0;
for relative control a 13-vector (flattened 3x3 rotation, translation, width)
transforms through the conjugation action's irrep decomposition.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .groups import (
    GroupElement,
    P_CONJUGATION_SE3,
    P_CONJUGATION_SO3,
    Representation,
    SE3_CONJUGATION_BLOCKS,
    SO3_CONJUGATION_BLOCKS,
    direct_sum,
    irrep,
    rep_matrix,
    rotation_z,
    trivial,
    with_basis_change,
)

ROTATION_TOL = 1e-8
HOMOGENEOUS_TOL = 1e-9
DEGENERATE_TOL = 1e-8

ABSOLUTE10 = "absolute10"
RELATIVE13 = "relative13"

ABSOLUTE = "absolute"
RELATIVE = "relative"


class MalformedPoseError(ValueError):
    """A vector or matrix does not describe a valid homogeneous pose."""


class DegenerateRotationError(ValueError):
    """6D rotation input too close to singular to orthogonalize."""


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """A rigid transform: 3x3 rotation plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise MalformedPoseError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ROTATION_TOL:
            raise MalformedPoseError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise MalformedPoseError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise MalformedPoseError(f"expected 4x4 matrix, got {T.shape}")
        if np.max(np.abs(T[3] - np.array([0, 0, 0, 1.0]))) > HOMOGENEOUS_TOL:
            raise MalformedPoseError("bottom row is not (0, 0, 0, 1)")
        return PoseSE3(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.rotation.T, -self.rotation.T @ self.translation)

    def rotate_world_z(self, g: GroupElement) -> "PoseSE3":
        """T -> T_g T, the world-frame planar rotation of this pose."""
        Rg = rotation_z(g.angle)
        return PoseSE3(Rg @ self.rotation, Rg @ self.translation)


def pose_rotation_z(angle: float, translation=None) -> PoseSE3:
    return PoseSE3(rotation_z(angle), np.zeros(3) if translation is None else translation)


@dataclass(frozen=True, eq=False)
class ActionStep:
    """One control command: desired pose plus gripper open width."""

    pose: PoseSE3
    width: float
    control_mode: str

    def __post_init__(self):
        if self.width < 0:
            raise ValueError(f"gripper width must be >= 0, got {self.width}")
        if self.control_mode not in (ABSOLUTE, RELATIVE):
            raise ValueError(f"unknown control mode {self.control_mode!r}")


@dataclass(frozen=True, eq=False)
class ActionVector:
    """A flattened action with its layout tag and group representation."""

    values: np.ndarray
    layout: str
    rep: Representation

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.rep.dim:
            raise ValueError(
                f"layout {self.layout}: got {v.shape[0]} values for rep dim {self.rep.dim}"
            )
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# Flattenings
# ---------------------------------------------------------------------------

def vec_c(pose: PoseSE3) -> np.ndarray:
    """Column-major flattening of the 4x4 pose matrix."""
    return pose.matrix().T.reshape(-1)


def vec_r(pose: PoseSE3) -> np.ndarray:
    """Row-major flattening of the 4x4 pose matrix."""
    return pose.matrix().reshape(-1)


def pose_from_vec_c(v: np.ndarray) -> PoseSE3:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (16,):
        raise MalformedPoseError(f"expected 16-vector, got shape {v.shape}")
    return PoseSE3.from_matrix(v.reshape(4, 4).T)


def pose_from_vec_r(v: np.ndarray) -> PoseSE3:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (16,):
        raise MalformedPoseError(f"expected 16-vector, got shape {v.shape}")
    return PoseSE3.from_matrix(v.reshape(4, 4))


# ---------------------------------------------------------------------------
# Representations attached to the layouts
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def absolute10_rep() -> Representation:
    # 6D rotation (three rho1 pairs), translation (rho1 + rho0), width (rho0).
    return direct_sum(irrep(1, 3), irrep(1), trivial(1), trivial(1))


@functools.lru_cache(maxsize=None)
def relative13_rep() -> Representation:
    rot = with_basis_change(SO3_CONJUGATION_BLOCKS, np.asarray(P_CONJUGATION_SO3))
    return direct_sum(rot, irrep(1), trivial(1), trivial(1))


@functools.lru_cache(maxsize=None)
def absolute16_rep() -> Representation:
    # (rho1 + rho0^2)^4 acting on Vec_c of the full 4x4 pose.
    cols = [direct_sum(irrep(1), trivial(2)) for _ in range(4)]
    return direct_sum(*cols)


@functools.lru_cache(maxsize=None)
def relative16_rep() -> Representation:
    return with_basis_change(SE3_CONJUGATION_BLOCKS, np.asarray(P_CONJUGATION_SE3))


def layout_rep(layout: str) -> Representation:
    if layout == ABSOLUTE10:
        return absolute10_rep()
    if layout == RELATIVE13:
        return relative13_rep()
    raise ValueError(f"unknown action layout {layout!r}")


def layout_dim(layout: str) -> int:
    return layout_rep(layout).dim


# ---------------------------------------------------------------------------
# Encoding / group action / decoding
# ---------------------------------------------------------------------------

def rotation_to_6d(R: np.ndarray) -> np.ndarray:
    """Drop the z row of the rotation; order entries column by column.

    The result (r00, r10, r01, r11, r02, r12) transforms as rho1^3 under
    world z rotations: each retained column pair rotates with frequency 1.
    """
    R = np.asarray(R)
    return R[:2, :].T.reshape(-1)


def rotation_from_6d(six: np.ndarray) -> np.ndarray:
    """Rebuild a rotation whose top two rows are the orthogonalized input."""
    six = np.asarray(six, dtype=np.float64).reshape(6)
    b1, b2, b3 = _gram_schmidt_frame(six[0::2], six[1::2])
    return np.stack([b1, b2, b3], axis=0)


def _gram_schmidt_frame(v1, v2):
    n1 = np.linalg.norm(v1)
    if n1 < DEGENERATE_TOL:
        raise DegenerateRotationError("first 6D direction has near-zero norm")
    b1 = v1 / n1
    w = v2 - (b1 @ v2) * b1
    n2 = np.linalg.norm(w)
    if n2 < DEGENERATE_TOL:
        raise DegenerateRotationError("6D directions are near-parallel")
    b2 = w / n2
    return b1, b2, np.cross(b1, b2)


def orthogonalize_6d(v: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two stacked 3-vectors into rotation columns (b1, b2, b1xb2)."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    b1, b2, b3 = _gram_schmidt_frame(v[:3], v[3:])
    return np.stack([b1, b2, b3], axis=1)


def encode_absolute(step: ActionStep) -> ActionVector:
    if step.control_mode != ABSOLUTE:
        raise ValueError("encode_absolute requires an absolute-mode step")
    values = np.concatenate(
        [rotation_to_6d(step.pose.rotation), step.pose.translation, [step.width]]
    )
    return ActionVector(values, ABSOLUTE10, absolute10_rep())


def encode_relative(step: ActionStep) -> ActionVector:
    if step.control_mode != RELATIVE:
        raise ValueError("encode_relative requires a relative-mode step")
    values = np.concatenate(
        [step.pose.rotation.reshape(-1), step.pose.translation, [step.width]]
    )
    return ActionVector(values, RELATIVE13, relative13_rep())


def encode_step(step: ActionStep) -> ActionVector:
    return encode_absolute(step) if step.control_mode == ABSOLUTE else encode_relative(step)


def act_on_action(g: GroupElement, a: ActionVector) -> ActionVector:
    return ActionVector(rep_matrix(a.rep, g) @ a.values, a.layout, a.rep)


def decode_action(a: ActionVector, current: PoseSE3) -> tuple[PoseSE3, float]:
    """Orthogonalize the rotation block and apply the control-mode semantics."""
    if a.layout == ABSOLUTE10:
        R = rotation_from_6d(a.values[:6])
        next_pose = PoseSE3(R, a.values[6:9])
        return next_pose, float(a.values[9])
    if a.layout == RELATIVE13:
        M = a.values[:9].reshape(3, 3)
        b1, b2, b3 = _gram_schmidt_frame(M[0], M[1])
        delta = PoseSE3(np.stack([b1, b2, b3], axis=0), a.values[9:12])
        return delta.compose(current), float(a.values[12])
    raise ValueError(f"cannot decode layout {a.layout!r}")


def apply_transform(g: GroupElement, step: ActionStep) -> ActionStep:
    """The group action on an action step in its own control mode.

    Absolute actions rotate like poses (left multiplication); relative
    actions conjugate their rotation while the translation rotates.
    """
    Rg = rotation_z(g.angle)
    if step.control_mode == ABSOLUTE:
        return ActionStep(step.pose.rotate_world_z(g), step.width, ABSOLUTE)
    pose = PoseSE3(Rg @ step.pose.rotation @ Rg.T, Rg @ step.pose.translation)
    return ActionStep(pose, step.width, RELATIVE)


def random_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> PoseSE3:
    from scipy.spatial.transform import Rotation

    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.normal(scale=translation_scale, size=3)
    return PoseSE3(R, t)
