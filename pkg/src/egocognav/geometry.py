"""Rotations, planar body/world frames and goal encoding.

Conventions: z-up world, heading ``psi`` is yaw about z, body x points
forward and body y to the left. A 6D rotation is the first two matrix
columns stacked, ``(a1, a2)``.
"""
import numpy as np

from . import autodiff as ad
from .errors import DegenerateInput, NotARotation

DEGENERATE_TOL = 1e-8
ROTATION_TOL = 1e-6

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def wrap_angle(a):
    """Map angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def rot_z(angle):
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def rot_y(angle):
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 2] = s
    out[..., 2, 0] = -s
    out[..., 2, 2] = c
    out[..., 1, 1] = 1.0
    return out


def rot6d_to_matrix(r):
    """Gram-Schmidt on the two stored columns; third column is their cross product.

    Accepts ``(..., 6)`` and returns ``(..., 3, 3)``.
    """
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != 6:
        raise DegenerateInput(f"expected trailing dimension 6, got {r.shape}")
    if not np.isfinite(r).all():
        raise DegenerateInput("non-finite 6D rotation")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_TOL):
        raise DegenerateInput("first column has near-zero norm")
    b1 = a1 / n1
    resid = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(resid, axis=-1, keepdims=True)
    if np.any(n2 <= DEGENERATE_TOL):
        raise DegenerateInput("second column is (nearly) parallel to the first")
    b2 = resid / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def is_rotation(m, tol=ROTATION_TOL):
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3) or not np.isfinite(m).all():
        return False
    gram = np.swapaxes(m, -1, -2) @ m
    ortho = np.linalg.norm(gram - np.eye(3), axis=(-2, -1))
    det = np.linalg.det(m)
    return bool(np.all(ortho <= tol) and np.all(np.abs(det - 1.0) <= tol))


def matrix_to_rot6d(m, check=True):
    m = np.asarray(m, dtype=float)
    if check and not is_rotation(m):
        raise NotARotation("matrix is not a proper rotation")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def relative_rotation_l1(pred, gt):
    """Entrywise L1 norm of ``predᵀ gt − I``; zero exactly when pred == gt."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    rel = np.swapaxes(pred, -1, -2) @ gt
    return np.abs(rel - np.eye(3)).sum(axis=(-2, -1))


def rot6d_to_matrix_tensor(r, eps=1e-12):
    """Differentiable Gram-Schmidt for a ``(..., 6)`` Tensor -> ``(..., 3, 3)``."""
    r = ad.as_tensor(r)
    a1, a2 = r[..., 0:3], r[..., 3:6]
    b1 = ad.div(a1, ad.sqrt(ad.add(ad.sum(ad.square(a1), -1, keepdims=True), eps)))
    proj = ad.sum(ad.mul(b1, a2), -1, keepdims=True)
    resid = ad.sub(a2, ad.mul(proj, b1))
    b2 = ad.div(resid, ad.sqrt(ad.add(ad.sum(ad.square(resid), -1, keepdims=True), eps)))
    x1, y1, z1 = b1[..., 0:1], b1[..., 1:2], b1[..., 2:3]
    x2, y2, z2 = b2[..., 0:1], b2[..., 1:2], b2[..., 2:3]
    b3 = ad.concat([
        ad.sub(ad.mul(y1, z2), ad.mul(z1, y2)),
        ad.sub(ad.mul(z1, x2), ad.mul(x1, z2)),
        ad.sub(ad.mul(x1, y2), ad.mul(y1, x2)),
    ], axis=-1)
    return ad.stack([b1, b2, b3], axis=-1)


def check_rot6d(r):
    """Raise DegenerateInput if Gram-Schmidt is ill-posed for any row."""
    rot6d_to_matrix(r)


# ---------------------------------------------------------------- planar frames

def integrate_deltas(start_pose, deltas):
    """Compose body-frame deltas onto a start pose.

    Step t translates in the frame of pose t-1, then turns by dpsi.
    Returns an ``(n, 3)`` array of (x, y, psi); psi is not wrapped.
    """
    deltas = np.asarray(deltas, dtype=float).reshape(-1, 3)
    x0, y0, psi0 = (float(v) for v in start_pose)
    n = len(deltas)
    psi = psi0 + np.cumsum(deltas[:, 2])
    heading_before = np.concatenate([[psi0], psi[:-1]]) if n else np.zeros(0)
    c, s = np.cos(heading_before), np.sin(heading_before)
    dx_w = c * deltas[:, 0] - s * deltas[:, 1]
    dy_w = s * deltas[:, 0] + c * deltas[:, 1]
    return np.stack([x0 + np.cumsum(dx_w), y0 + np.cumsum(dy_w), psi], axis=-1)


def integrate_deltas_batch(deltas, start=None):
    """Vectorized ``integrate_deltas`` over ``(B, T, 3)`` from per-row starts (default origin)."""
    deltas = np.asarray(deltas, dtype=float)
    b = deltas.shape[0]
    start = np.zeros((b, 3)) if start is None else np.asarray(start, dtype=float)
    psi = start[:, 2:3] + np.cumsum(deltas[..., 2], axis=-1)
    before = np.concatenate([start[:, 2:3], psi[:, :-1]], axis=-1)
    c, s = np.cos(before), np.sin(before)
    dx_w = c * deltas[..., 0] - s * deltas[..., 1]
    dy_w = s * deltas[..., 0] + c * deltas[..., 1]
    x = start[:, 0:1] + np.cumsum(dx_w, axis=-1)
    y = start[:, 1:2] + np.cumsum(dy_w, axis=-1)
    return np.stack([x, y, psi], axis=-1)


def world_to_body_deltas(poses):
    """Inverse of ``integrate_deltas``: ``len(poses) - 1`` body-frame deltas."""
    poses = np.asarray(poses, dtype=float)
    if poses.ndim != 2 or poses.shape[1] != 3 or len(poses) < 2:
        raise ValueError("need at least two (x, y, psi) poses")
    prev = poses[:-1]
    dxy = poses[1:, :2] - prev[:, :2]
    c, s = np.cos(prev[:, 2]), np.sin(prev[:, 2])
    dx = c * dxy[:, 0] + s * dxy[:, 1]
    dy = -s * dxy[:, 0] + c * dxy[:, 1]
    dpsi = wrap_angle(poses[1:, 2] - prev[:, 2])
    return np.stack([dx, dy, dpsi], axis=-1)


def encode_goal(current_pose, goal_xy):
    """(distance, sin bearing, cos bearing) of a world goal seen from a pose.

    Works on single poses or aligned arrays of poses and goals. At zero
    distance the bearing is undefined and (0, 0, 1) is returned.
    """
    pose = np.asarray(current_pose, dtype=float)
    goal = np.asarray(goal_xy, dtype=float)
    dx = goal[..., 0] - pose[..., 0]
    dy = goal[..., 1] - pose[..., 1]
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    d = np.hypot(lx, ly)
    safe = np.where(d > 0, d, 1.0)
    sb = np.where(d > 0, ly / safe, 0.0)
    cb = np.where(d > 0, lx / safe, 1.0)
    return np.stack([d, sb, cb], axis=-1)

