"""Implicit time integration for the stiff rod dynamics.

One-step L-stable composite of a trapezoidal stage and a BDF2 stage
(gamma = 2 - sqrt(2), equal stage diagonal), with an embedded third-order
companion for the local error estimate and simplified Newton iterations that
reuse a frozen Jacobian across stages and steps.  Dense output is cubic
Hermite on the accepted steps.
"""

from dataclasses import dataclass, field

import numpy as np

GAMMA = 2.0 - np.sqrt(2.0)
DIAG = GAMMA / 2.0  # same diagonal coefficient for both implicit stages
_C = 1.0 / (GAMMA * (2.0 - GAMMA))
_B = np.array([1.0 / (2.0 * (2.0 - GAMMA)),
               1.0 / (2.0 * (2.0 - GAMMA)),
               (1.0 - GAMMA) / (2.0 - GAMMA)])
_BHAT2 = 1.0 / (6.0 * GAMMA * (1.0 - GAMMA))
_BHAT = np.array([1.0 - _BHAT2 - (0.5 - GAMMA * _BHAT2), _BHAT2,
                  0.5 - GAMMA * _BHAT2])
_E = _B - _BHAT


class IntegrationError(RuntimeError):
    pass


@dataclass
class IntegratorConfig:
    rtol: float = 1e-6
    atol: float = 1e-8
    initial_step: float = 1e-3
    max_step: float = np.inf
    min_step: float = 1e-12
    max_newton: int = 8
    newton_tol: float = 0.03  # fraction of the step error-norm unit

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


def step_hold(dynamics, jacobian, x0, u, dt, n_sub=40, config=None):
    """Advance one sampling interval with fixed L-stable steps.

    ``u`` is the constant input over the interval, or a callable of the time
    within ``[0, dt]``.  Runs ``n_sub`` equal steps with a single
    Jacobian/factorization and no error control: the composite scheme damps
    unresolved fast transients stably, so interval endpoints converge at
    second order in the substep.  Used for sample-and-hold plants, where
    adaptive control would resolve the input-jump boundary layer far beyond
    what the endpoint needs.
    """
    cfg = config or IntegratorConfig()
    x = np.asarray(x0, dtype=float).copy()
    n = x.shape[0]
    h = dt / n_sub
    u_of_t = u if callable(u) else (lambda t: u)
    st = _Stepper(dynamics, jacobian, u_of_t, cfg, n)
    st.refresh_jacobian(x, 0.0)
    st.factor(h)
    f_n = st.eval_f(x, 0.0)
    for k in range(n_sub):
        t = k * h
        const1 = x + DIAG * h * f_n
        x_g, _, f_g = st.newton(const1, x, t + GAMMA * h, h)
        if x_g is None:
            st.refresh_jacobian(x, t)
            st.factor(h)
            x_g, _, f_g = st.newton(const1, x, t + GAMMA * h, h)
            if x_g is None:
                raise IntegrationError(f"fixed-step stage failed at t={t:.4e}")
        const2 = _C * x_g - (1.0 - GAMMA) ** 2 * _C * x
        x_new, _, f_new = st.newton(const2, x_g, t + h, h)
        if x_new is None:
            st.refresh_jacobian(x, t)
            st.factor(h)
            x_new, _, f_new = st.newton(const2, x_g, t + h, h)
            if x_new is None:
                raise IntegrationError(f"fixed-step stage failed at t={t:.4e}")
        x, f_n = x_new, f_new
    return x


@dataclass
class IntegrationResult:
    t: np.ndarray
    x: np.ndarray           # (len(t), n)
    n_accepted: int = 0
    n_rejected: int = 0
    n_fev: int = 0
    n_jev: int = 0
    max_accepted_error: float = 0.0


class _Stepper:
    """Internal state of one integration run."""

    def __init__(self, dynamics, jacobian, input_signal, config, n):
        self.f = dynamics
        self.jac = jacobian
        self.u_of_t = input_signal
        self.cfg = config
        self.n = n
        self.J = None
        self.Minv = None
        self.Minv_h = None
        self.j_fresh = False
        self.res = IntegrationResult(t=None, x=None)

    def eval_f(self, x, t):
        self.res.n_fev += 1
        return self.f(x, self.u_of_t(t))

    def refresh_jacobian(self, x, t):
        self.J = self.jac(x, self.u_of_t(t))
        self.res.n_jev += 1
        self.j_fresh = True
        self.Minv_h = None

    def factor(self, h):
        if self.Minv_h != h or self.Minv is None:
            M = np.eye(self.n) - DIAG * h * self.J
            self.Minv = np.linalg.inv(M)
            self.Minv_h = h

    def newton(self, const, x_guess, t_stage, h):
        """Solve ``X = const + DIAG*h*f(X, t_stage)`` with frozen Jacobian."""
        x = x_guess.copy()
        norm_prev = None
        slow = False
        for _ in range(self.cfg.max_newton):
            fx = self.eval_f(x, t_stage)
            rhs = const + DIAG * h * fx - x
            dx = self.Minv @ rhs
            x = x + dx
            scale = self.cfg.atol + self.cfg.rtol * np.abs(x)
            nrm = np.sqrt(np.mean((dx / scale) ** 2))
            if norm_prev is not None and norm_prev > 0:
                rate = nrm / norm_prev
                if rate > 0.9:
                    return None, slow, fx
                slow = slow or rate > 0.5
            if nrm < self.cfg.newton_tol:
                return x, slow, self.eval_f(x, t_stage)
            norm_prev = nrm
        return None, slow, None


def integrate(dynamics, jacobian, x0, input_signal, t_span, config=None,
              t_eval=None, t_breaks=None):
    """Integrate ``dx/dt = dynamics(x, input_signal(t))`` over ``t_span``.

    ``jacobian(x, u)`` supplies the analytic state Jacobian used by the
    Newton iterations.  Returns an :class:`IntegrationResult` sampled on
    ``t_eval`` (defaults to the accepted step points).  ``t_breaks`` lists
    input discontinuities (e.g. zero-order-hold sample times); steps land on
    them exactly instead of straddling them.
    """
    cfg = config or IntegratorConfig()
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 <= t0:
        raise ValueError("t_span must be increasing")
    if t_breaks is not None:
        t_breaks = np.asarray(t_breaks, dtype=float)
        t_breaks = t_breaks[(t_breaks > t0) & (t_breaks < t1)]
    x = np.asarray(x0, dtype=float).copy()
    n = x.shape[0]
    st = _Stepper(dynamics, jacobian, input_signal, cfg, n)

    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        if t_eval[0] < t0 - 1e-12 or t_eval[-1] > t1 + 1e-12:
            raise ValueError("t_eval outside t_span")
        out_t, out_x = list(), list()
        eval_idx = 0
        if np.isclose(t_eval[0], t0):
            out_t.append(t0)
            out_x.append(x.copy())
            eval_idx = 1
    else:
        out_t, out_x = [t0], [x.copy()]
        eval_idx = None

    t = t0
    h = min(cfg.initial_step, cfg.max_step, t1 - t0)
    f_n = st.eval_f(x, t)
    st.refresh_jacobian(x, t)

    break_idx = 0
    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        h = min(h, t1 - t)
        if t_breaks is not None:
            while break_idx < len(t_breaks) \
                    and t_breaks[break_idx] <= t + 1e-12:
                break_idx += 1
            if break_idx < len(t_breaks):
                h = min(h, t_breaks[break_idx] - t)
        if h < cfg.min_step:
            raise IntegrationError(
                f"step size underflow at t={t:.6e} (h={h:.3e}); "
                f"{st.res.n_accepted} accepted, {st.res.n_rejected} rejected steps")
        st.factor(h)

        t_g = t + GAMMA * h
        const1 = x + DIAG * h * f_n
        x_g, slow1, f_g = st.newton(const1, x, t_g, h)
        if x_g is None:
            if not st.j_fresh:
                st.refresh_jacobian(x, t)
                continue
            st.res.n_rejected += 1
            h *= 0.5
            continue

        const2 = _C * x_g - (1.0 - GAMMA) ** 2 * _C * x
        x_new, slow2, f_new = st.newton(const2, x_g, t + h, h)
        if x_new is None:
            if not st.j_fresh:
                st.refresh_jacobian(x, t)
                continue
            st.res.n_rejected += 1
            h *= 0.5
            continue

        # embedded error estimate, filtered through the stage matrix so the
        # stiff components do not dominate it
        est = h * (_E[0] * f_n + _E[1] * f_g + _E[2] * f_new)
        est = st.Minv @ est
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = np.sqrt(np.mean((est / scale) ** 2))

        if err <= 1.0:
            t_prev, x_prev, f_prev = t, x, f_n
            t, x, f_n = t + h, x_new, f_new
            st.res.n_accepted += 1
            st.res.max_accepted_error = max(st.res.max_accepted_error, err)
            if slow1 or slow2:
                st.j_fresh = False
            if eval_idx is None:
                out_t.append(t)
                out_x.append(x.copy())
            else:
                while eval_idx < len(t_eval) and t_eval[eval_idx] <= t + 1e-12:
                    out_t.append(t_eval[eval_idx])
                    out_x.append(_hermite(t_eval[eval_idx], t_prev, t, h,
                                          x_prev, x, f_prev, f_n))
                    eval_idx += 1
        else:
            st.res.n_rejected += 1
            st.j_fresh = False

        h = h * float(np.clip(0.9 * max(err, 1e-16) ** (-1.0 / 3.0), 0.2, 5.0))
        h = min(h, cfg.max_step)

    st.res.t = np.array(out_t)
    st.res.x = np.array(out_x)
    return st.res


def _hermite(s, t0, t1, h, x0, x1, f0, f1):
    """Cubic Hermite interpolant on one accepted step."""
    tau = (s - t0) / h
    h00 = (1 + 2 * tau) * (1 - tau) ** 2
    h10 = tau * (1 - tau) ** 2
    h01 = tau ** 2 * (3 - 2 * tau)
    h11 = tau ** 2 * (tau - 1)
    return h00 * x0 + h * h10 * f0 + h01 * x1 + h * h11 * f1
