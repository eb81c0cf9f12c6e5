"""Strap-rig kinematics: four-strap translation stage riding the body
surface (2 dof), a 4-dof wrist (3 rotations + fine axial translation), and
the normal-reaction contact model.

Strap lengths are straight-line anchor-to-attachment distances.  Forward
kinematics inverts them with a damped (Levenberg-style) least-squares
iteration over the chart; the warm start doubles as the tie-breaker among
symmetric solutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import matrix_from_rpy, quat_from_matrix
from .phantom import ProbePose


class WorkspaceExceeded(ValueError):
    """Requested strap length outside the rig limits."""


class SolverFailed(RuntimeError):
    def __init__(self, message: str, residual_sq: float):
        super().__init__(message)
        self.residual_sq = residual_sq


class JointLimit(ValueError):
    """Wrist joint command outside configured limits."""


@dataclass(frozen=True)
class StrapRig:
    """Four fixed anchors (mm) around the patient plus strap length limits."""

    anchors: tuple = (
        (-220.0, -170.0, 150.0),
        (220.0, -170.0, 150.0),
        (220.0, 170.0, 150.0),
        (-220.0, 170.0, 150.0),
    )
    attachment_offset: float = 0.0
    strap_length_limits: tuple[float, float] = (0.0, 700.0)

    def __post_init__(self):
        anchors = tuple(tuple(float(c) for c in a) for a in self.anchors)
        if len(anchors) != 4 or len(set(anchors)) != 4:
            raise ValueError("rig needs four pairwise distinct anchors")
        lo, hi = self.strap_length_limits
        if not 0 <= lo < hi:
            raise ValueError("strap length limits must satisfy 0 <= min < max")
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "strap_length_limits", (float(lo), float(hi)))
        # non-collinear as a set: some triple must span a plane
        pts = np.array(anchors)
        d = pts[1:] - pts[0]
        if np.linalg.norm(np.cross(d[0], d[1])) < 1e-9 and np.linalg.norm(np.cross(d[0], d[2])) < 1e-9:
            raise ValueError("anchors must not be collinear")


@dataclass(frozen=True)
class StrapLengths:
    lengths: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.lengths) != 4:
            raise ValueError("exactly four strap lengths expected")
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))

    def __iter__(self):
        return iter(self.lengths)


@dataclass(frozen=True)
class WristLimits:
    roll: float = math.pi / 2
    pitch: float = math.pi / 3
    yaw: float = math.pi
    fine: float = 20.0


@dataclass(frozen=True)
class WristState:
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    fine_d: float = 0.0


@dataclass(frozen=True)
class ContactModel:
    """Linear spring along the outward normal, saturated at max_force."""

    stiffness: float = 0.5  # N/mm
    max_force: float = 20.0  # N

    def __post_init__(self):
        if self.stiffness <= 0 or self.max_force <= 0:
            raise ValueError("stiffness and max_force must be positive")


def attachment_point(rig: StrapRig, body, u: float, v: float, t: float) -> np.ndarray:
    p = body.surface_point(u, v, t)
    if rig.attachment_offset != 0.0:
        p = p + rig.attachment_offset * body.surface_normal(u, v, t)
    return p


def inverse_kinematics(target: tuple[float, float], t: float, rig: StrapRig, body) -> StrapLengths:
    """Strap lengths placing the attachment at chart point `target`."""
    u, v = target
    attach = tuple(attachment_point(rig, body, u, v, t))
    lo, hi = rig.strap_length_limits
    lengths = []
    for i, anchor in enumerate(rig.anchors):
        length = math.dist(anchor, attach)
        if not lo <= length <= hi:
            raise WorkspaceExceeded(
                f"strap {i + 1} length {length:.3f} mm outside limits [{lo}, {hi}]"
            )
        lengths.append(length)
    return StrapLengths(tuple(lengths))


def strap_lengths_in_limits(target: tuple[float, float], t: float, rig: StrapRig, body) -> bool:
    try:
        inverse_kinematics(target, t, rig, body)
    except WorkspaceExceeded:
        return False
    return True


@dataclass(frozen=True)
class FKResult:
    u: float
    v: float
    residual_sq: float
    iterations: int


# Damped least-squares settings; residuals above the tolerance indicate
# inconsistent lengths (the four straps are over-constrained for 2 dof).
_LM_INITIAL_DAMPING = 1e-3
_LM_MAX_ITER = 100
_LM_RESIDUAL_TOL = 1e-9  # mm^2
_LM_STEP_TOL = 1e-12
_FK_INCONSISTENCY_TOL = 1.0  # mm^2


def forward_kinematics(
    lengths: StrapLengths,
    t: float,
    rig: StrapRig,
    body,
    initial_guess: tuple[float, float],
) -> FKResult:
    """Chart point minimizing the strap-length mismatch.

    Deterministic given identical inputs; among symmetric minima the one
    reached from `initial_guess` (the previous robot state) wins.
    """
    lo, hi = rig.strap_length_limits
    for i, length in enumerate(lengths):
        if not lo <= length <= hi:
            raise WorkspaceExceeded(f"strap {i + 1} length {length:.3f} mm outside limits")
    target = np.array(list(lengths))
    anchors = np.array(rig.anchors)

    def residual(uv: np.ndarray) -> np.ndarray:
        attach = attachment_point(rig, body, float(uv[0]), float(uv[1]), t)
        return np.linalg.norm(anchors - attach, axis=1) - target

    def clamp(uv: np.ndarray) -> np.ndarray:
        return np.clip(uv, 0.0, 1.0)

    uv = clamp(np.array(initial_guess, dtype=float))
    r = residual(uv)
    ssq = float(r @ r)
    lam = _LM_INITIAL_DAMPING
    h = 1e-7
    iters = 0
    for iters in range(1, _LM_MAX_ITER + 1):
        if ssq < _LM_RESIDUAL_TOL:
            break
        jac = np.empty((4, 2))
        for k in range(2):
            up = uv.copy()
            dn = uv.copy()
            up[k] = min(1.0, uv[k] + h)
            dn[k] = max(0.0, uv[k] - h)
            jac[:, k] = (residual(up) - residual(dn)) / (up[k] - dn[k])
        jtj = jac.T @ jac
        jtr = jac.T @ r
        try:
            step = np.linalg.solve(jtj + lam * np.eye(2), jtr)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        if float(step @ step) < _LM_STEP_TOL**2:
            break
        cand = clamp(uv - step)
        r_cand = residual(cand)
        ssq_cand = float(r_cand @ r_cand)
        if ssq_cand < ssq:
            uv, r, ssq = cand, r_cand, ssq_cand
            lam = max(lam / 10.0, 1e-12)
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    if ssq > _FK_INCONSISTENCY_TOL:
        raise SolverFailed(f"no chart point fits the strap lengths (residual {ssq:.3e} mm^2)", ssq)
    return FKResult(float(uv[0]), float(uv[1]), ssq, iters)


def wrist_forward(
    base_point,
    tangent_frame: tuple[np.ndarray, np.ndarray, np.ndarray],
    wrist: WristState,
    limits: WristLimits = WristLimits(),
) -> ProbePose:
    """Probe pose from the surface attachment point and wrist joints.

    Rotations are intrinsic yaw(z) * pitch(y) * roll(x) about the local
    tangent frame axes; fine_d > 0 presses the tip inward along the probe
    axis (the rotated inward normal).
    """
    for name, value, lim in (
        ("roll", wrist.roll, limits.roll),
        ("pitch", wrist.pitch, limits.pitch),
        ("yaw", wrist.yaw, limits.yaw),
        ("fine_d", wrist.fine_d, limits.fine),
    ):
        if abs(value) > lim:
            raise JointLimit(f"wrist {name} {value:.4f} outside +/-{lim:.4f}")
    e1, e2, n = tangent_frame
    local = np.column_stack([e1, e2, n])
    world = local @ matrix_from_rpy(wrist.roll, wrist.pitch, wrist.yaw)
    axis = -world[:, 2]
    tip = np.asarray(base_point, dtype=float) + wrist.fine_d * axis
    return ProbePose(tuple(tip), tuple(quat_from_matrix(world)), wrist.fine_d)


def contact_force(pose: ProbePose, body, t: float, cm: ContactModel) -> np.ndarray:
    """Saturated linear spring force along the outward normal; zero without
    penetration."""
    tip = np.asarray(pose.tip_position)
    q, dist = body.nearest_surface_point(tip, t)
    depth = max(0.0, -dist)
    if depth == 0.0:
        return np.zeros(3)
    ka, kb, kc = body.semi_axes(t)
    grad = np.array([q[0] / ka**2, q[1] / kb**2, q[2] / kc**2])
    normal = grad / math.sqrt(float(np.dot(grad, grad)))
    return min(cm.stiffness * depth, cm.max_force) * normal


# Haptic-device box, mm: 160 x 120 x 120 centered on the origin.
MASTER_BOX = ((-80.0, 80.0), (-60.0, 60.0), (-60.0, 60.0))


def clamp_master_workspace(p) -> np.ndarray:
    """Component-wise clamp to the master haptic workspace box."""
    p = np.asarray(p, dtype=float)
    return np.array([min(max(p[i], MASTER_BOX[i][0]), MASTER_BOX[i][1]) for i in range(3)])


def clamp_chart_to_workspace(
    current: tuple[float, float],
    target: tuple[float, float],
    t: float,
    rig: StrapRig,
    body,
) -> tuple[tuple[float, float], bool]:
    """Pull `target` back toward `current` until strap limits hold.

    Returns (possibly clamped target, clamped_flag).  `current` itself is
    assumed reachable.
    """
    if strap_lengths_in_limits(target, t, rig, body):
        return target, False
    cu, cv = current
    tu, tv = target
    lo_s, hi_s = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo_s + hi_s)
        cand = (cu + (tu - cu) * mid, cv + (tv - cv) * mid)
        if strap_lengths_in_limits(cand, t, rig, body):
            lo_s = mid
        else:
            hi_s = mid
    return (cu + (tu - cu) * lo_s, cv + (tv - cv) * lo_s), True
