"""Static equilibria and linearization of the rod model."""

from dataclasses import dataclass

import numpy as np

from . import rodmodel as rm


class StaticsError(RuntimeError):
    """Static solve did not converge; carries the last residual norm."""


def _newton(u, params, x0, tol, max_iter):
    x = x0.copy()
    zero = np.zeros(params.nx)
    F = rm.residual(x, zero, u, params)
    nrm = np.abs(F).max()
    for _ in range(max_iter):
        if nrm < tol:
            return x, nrm
        J = rm.dres_dx(x, zero, u, params)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return None, nrm
        # Armijo backtracking on the residual norm
        t = 1.0
        for _ in range(30):
            x_try = x + t * dx
            F_try = rm.residual(x_try, zero, u, params)
            n_try = np.abs(F_try).max()
            if n_try < (1.0 - 0.5 * t) * nrm or n_try < tol:
                x, F, nrm = x_try, F_try, n_try
                break
            t *= 0.5
        else:
            return None, nrm
    if nrm < tol:
        return x, nrm
    return None, nrm


def static_solve(u, params, x_init=None, tol=1e-11, max_iter=60):
    """Equilibrium state with ``residual(x, 0, u)`` below ``tol`` (inf-norm).

    Starts from ``x_init`` (default: zero state) and falls back to pressure
    continuation in 10 kPa steps when the direct Newton solve stalls.
    """
    u = np.asarray(u, dtype=float)
    x0 = np.zeros(params.nx) if x_init is None else np.asarray(x_init, float)
    x, nrm = _newton(u, params, x0, tol, max_iter)
    if x is not None:
        return x

    n_steps = max(2, int(np.ceil(np.max(np.abs(u)) / 1e4)) + 1)
    x_warm = np.zeros(params.nx) if x_init is None else x0.copy()
    for k in range(1, n_steps + 1):
        uk = u * (k / n_steps)
        x_warm, nrm = _newton(uk, params, x_warm, tol, max_iter)
        if x_warm is None:
            raise StaticsError(
                f"static solve failed at continuation step {k}/{n_steps}, "
                f"last residual inf-norm {nrm:.3e}")
    return x_warm


@dataclass
class LinearModel:
    """Affine model ``dx/dt = A (x - x0) + B (u - u0)``, ``y = y0 + C (x - x0)``."""
    A: np.ndarray
    B: np.ndarray
    C_pos: np.ndarray
    x0: np.ndarray
    u0: np.ndarray
    y0: np.ndarray

    def output(self, x):
        return self.y0 + self.C_pos @ (x - self.x0)


def linearize(x0, u0, params, fd_step=1e-7):
    """Jacobian linearization of the dynamics and the tip-position output.

    ``(x0, u0)`` should be an equilibrium from :func:`static_solve`.  The
    dynamics Jacobians are analytic; the position output row uses central
    finite differences of the pose recursion.
    """
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    A = rm.jacobian_fx(x0, u0, params)
    B = rm.jacobian_fu(x0, u0, params)
    y0, _ = rm.output_ee_pose(x0, params)
    C = np.zeros((3, params.nx))
    for k in range(params.nx):
        dx = np.zeros(params.nx)
        dx[k] = fd_step
        yp, _ = rm.output_ee_pose(x0 + dx, params)
        ym, _ = rm.output_ee_pose(x0 - dx, params)
        C[:, k] = (yp - ym) / (2 * fd_step)
    return LinearModel(A=A, B=B, C_pos=C, x0=x0, u0=u0, y0=y0)
