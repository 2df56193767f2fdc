"""SO(3)/SE(3) primitives used throughout the rod model.

Twist ordering is linear-first everywhere: a twist is ``[v; w]`` with the
linear part ``v`` in the first three components and the angular part ``w``
in the last three.  ``TWIST_LINEAR`` / ``TWIST_ANGULAR`` are the only place
this convention is written down; all adjoint block layouts follow from it.

All functions accept either a single element or a leading batch dimension
(``(3,)`` or ``(B, 3)``, ``(6,)`` or ``(B, 6)``) and return matching shapes.
Small rotation angles are handled by truncated series on the Rodrigues
coefficients below ``SMALL_ANGLE`` instead of a hard branch on the formulas,
which keeps the functions smooth across the threshold.
"""

import numpy as np

TWIST_LINEAR = slice(0, 3)
TWIST_ANGULAR = slice(3, 6)

# below this rotation angle the closed-form coefficients switch to their
# 2-term Taylor series (cancellation-free)
SMALL_ANGLE = 1e-6


def hat3(v):
    """Skew-symmetric matrix of ``v`` so that ``hat3(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee3(m):
    """Inverse of :func:`hat3` for (batched) skew-symmetric matrices."""
    m = np.asarray(m, dtype=float)
    return np.stack(
        [m[..., 2, 1] - m[..., 1, 2],
         m[..., 0, 2] - m[..., 2, 0],
         m[..., 1, 0] - m[..., 0, 1]], axis=-1) * 0.5


def sharp_hat6(t):
    """6x6 adjoint operator of a twist, ``sharp_hat6(a) @ b == bracket(a, b)``.

    With linear-first ordering the block layout is
    ``[[hat(w), hat(v)], [0, hat(w)]]``.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape[:-1] + (6, 6))
    hw = hat3(t[..., TWIST_ANGULAR])
    hv = hat3(t[..., TWIST_LINEAR])
    out[..., 0:3, 0:3] = hw
    out[..., 0:3, 3:6] = hv
    out[..., 3:6, 3:6] = hw
    return out


def ad_transpose_apply(xi, w):
    """``sharp_hat6(xi).T @ w`` without forming the 6x6 matrix.

    For ``xi = [v; omega]`` and a wrench-like ``w = [n; m]`` this equals
    ``[n x omega; n x v + m x omega]``.
    """
    xi = np.asarray(xi, dtype=float)
    w = np.asarray(w, dtype=float)
    n = w[..., 0:3]
    m = w[..., 3:6]
    v = xi[..., 0:3]
    om = xi[..., 3:6]
    return np.concatenate(
        [np.cross(n, om), np.cross(n, v) + np.cross(m, om)], axis=-1)


def coad_matrix(w):
    """Matrix ``K(w)`` with ``K(w) @ xi == sharp_hat6(xi).T @ w``.

    Block layout ``[[0, hat(n)], [hat(n), hat(m)]]`` for ``w = [n; m]``.
    """
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (6, 6))
    hn = hat3(w[..., 0:3])
    hm = hat3(w[..., 3:6])
    out[..., 0:3, 3:6] = hn
    out[..., 3:6, 0:3] = hn
    out[..., 3:6, 3:6] = hm
    return out


def _rot_coeffs(theta2):
    """Rodrigues coefficients a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3.

    ``theta2`` is the squared angle; series kicks in below SMALL_ANGLE^2.
    """
    theta2 = np.asarray(theta2, dtype=float)
    small = theta2 < SMALL_ANGLE ** 2
    # guard the closed forms against division by zero; the series branch wins
    # where it matters
    t2 = np.where(small, 1.0, theta2)
    theta = np.sqrt(t2)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / t2)
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - np.sin(theta)) / (t2 * theta))
    return a, b, c


def exp_SO3(omega):
    """Rotation matrix ``exp(hat3(omega))`` (Rodrigues with series fallback)."""
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum('...i,...i->...', omega, omega)
    a, b, _ = _rot_coeffs(theta2)
    h = hat3(omega)
    h2 = h @ h
    eye = np.broadcast_to(np.eye(3), h.shape)
    return eye + a[..., None, None] * h + b[..., None, None] * h2


def left_jacobian_SO3(omega):
    """Left Jacobian ``J_l`` of SO(3); ``exp_SE3`` translation uses it."""
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum('...i,...i->...', omega, omega)
    _, b, c = _rot_coeffs(theta2)
    h = hat3(omega)
    h2 = h @ h
    eye = np.broadcast_to(np.eye(3), h.shape)
    return eye + b[..., None, None] * h + c[..., None, None] * h2


def right_jacobian_SO3(omega):
    """Right Jacobian ``J_r`` of SO(3).

    Satisfies ``exp_SO3(w + d) ~= exp_SO3(w) @ exp_SO3(J_r(w) @ d)`` to first
    order in ``d``.  Equals ``J_l(-w)``.
    """
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum('...i,...i->...', omega, omega)
    _, b, c = _rot_coeffs(theta2)
    h = hat3(omega)
    h2 = h @ h
    eye = np.broadcast_to(np.eye(3), h.shape)
    return eye - b[..., None, None] * h + c[..., None, None] * h2


def exp_SE3(twist, delta=1.0):
    """Exponential of ``delta * twist`` on SE(3), returned as ``(R, p)``.

    ``twist`` is ``[v; omega]``; the translation part is ``J_l(delta*omega) @
    (delta*v)``.
    """
    twist = np.asarray(twist, dtype=float)
    w = delta * twist[..., TWIST_ANGULAR]
    v = delta * twist[..., TWIST_LINEAR]
    R = exp_SO3(w)
    p = np.einsum('...ij,...j->...i', left_jacobian_SO3(w), v)
    return R, p


def compose_pose(R1, p1, R2, p2):
    """Composition ``H1 @ H2`` of poses given as ``(R, p)`` pairs."""
    return R1 @ R2, np.einsum('...ij,...j->...i', R1, p2) + p1


def adjoint_SE3(R, p):
    """6x6 adjoint of a pose for linear-first twists: ``[[R, hat(p)R],[0, R]]``."""
    R = np.asarray(R, dtype=float)
    p = np.asarray(p, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., 0:3, 0:3] = R
    out[..., 0:3, 3:6] = hat3(p) @ R
    out[..., 3:6, 3:6] = R
    return out


def log_SO3(R, ortho_tol=1e-6):
    """Rotation vector of ``R`` with a stable branch near angle pi.

    Raises ``ValueError`` if ``R`` fails orthonormality (``R^T R = I`` and
    ``det R = 1``) by more than ``ortho_tol``.  Batched input supported.
    """
    R = np.asarray(R, dtype=float)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    if err > ortho_tol or np.any(np.linalg.det(R) < 0.0):
        raise ValueError(f"log_SO3: input is not a rotation (orthonormality error {err:.2e})")

    tr = np.einsum('...ii->...', R)
    cos_theta = np.clip((tr - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w_skew = vee3(R)  # vee of the antisymmetric part

    near_pi = theta > np.pi - 1e-3
    small = theta < SMALL_ANGLE
    # generic branch: theta / (2 sin theta) * vee(R - R^T); the factor below
    # multiplies the already-halved vee3 output
    sin_theta = np.where(small | near_pi, 1.0, np.sin(theta))
    factor = np.where(small, 1.0 + theta ** 2 / 6.0, theta / sin_theta)
    out = factor[..., None] * w_skew

    if np.any(near_pi):
        # axis from the dominant column of the symmetric part of (R + I)/2
        # (the skew part contaminates the column at first order in pi-theta),
        # sign fixed by the antisymmetric part where it has not vanished yet
        B = (R + np.swapaxes(R, -1, -2)) * 0.25 + np.eye(3) * 0.5
        flat = out.reshape(-1, 3)
        Bf = B.reshape(-1, 3, 3)
        thf = theta.reshape(-1)
        wsf = w_skew.reshape(-1, 3)
        for idx in np.nonzero(near_pi.reshape(-1))[0]:
            d = np.diag(Bf[idx])
            k = int(np.argmax(d))
            axis = Bf[idx][:, k] / np.sqrt(max(d[k], 1e-16))
            axis = axis / np.linalg.norm(axis)
            if np.dot(axis, wsf[idx]) < 0.0:
                axis = -axis
            flat[idx] = thf[idx] * axis
        out = flat.reshape(out.shape)
    return out
