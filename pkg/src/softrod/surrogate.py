"""Ansatz-network surrogate for the one-step rod dynamics.

The model maps ``(x0, u0, cb)`` through one hidden tanh layer to a coefficient
tensor ``alpha`` of shape ``(4, nx, n_a)`` and predicts

    xhat(t) = x0 + scale * a(alpha, t),
    a(alpha, t) = sum_i alpha1_i * (sin(alpha2_i t + alpha3_i) * exp(-alpha4_i t)
                                    - sin(alpha3_i)),

a sum of damped oscillations in normalized state coordinates.  ``a`` vanishes
identically at ``t = 0``, so the prediction matches the initial state exactly
for any weights.  Training never sees trajectory data: the loss is the squared
implicit-dynamics residual of :mod:`softrod.rodmodel` evaluated at the
prediction and its analytic time derivative, at sampled collocation points
``(x0, u0, cb, tau)``.

Gradients are hand-written for the fixed topology; an autodiff framework
would buy nothing here since every factor of the chain (residual Jacobians,
ansatz derivatives, tanh layer) is available in closed form.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import rodmodel as rm

MAGIC = b"SROD-SM1"
VERSION = 1


class ModelFormatError(RuntimeError):
    pass


def ansatz_eval(alpha, t):
    """Evaluate the damped-oscillation ansatz, ``(..., nx)`` per state.

    ``alpha`` is ``(4, nx, n_a)`` or batched ``(B, 4, nx, n_a)``; ``t`` is a
    scalar or ``(B,)``.  Exactly zero at ``t = 0``.
    """
    alpha = np.asarray(alpha, dtype=float)
    single = alpha.ndim == 3
    if single:
        alpha = alpha[None]
    t = np.asarray(t, dtype=float).reshape(-1, 1, 1)
    a1, a2, a3, a4 = (alpha[:, i] for i in range(4))
    th = a2 * t + a3
    out = np.sum(a1 * (np.sin(th) * np.exp(-a4 * t) - np.sin(a3)), axis=-1)
    return out[0] if single else out


def ansatz_dt(alpha, t):
    """Exact time derivative of :func:`ansatz_eval`."""
    alpha = np.asarray(alpha, dtype=float)
    single = alpha.ndim == 3
    if single:
        alpha = alpha[None]
    t = np.asarray(t, dtype=float).reshape(-1, 1, 1)
    a1, a2, a3, a4 = (alpha[:, i] for i in range(4))
    th = a2 * t + a3
    E = np.exp(-a4 * t)
    out = np.sum(a1 * (a2 * np.cos(th) - a4 * np.sin(th)) * E, axis=-1)
    return out[0] if single else out


def _ansatz_partials(alpha, t):
    """Partials of ``a`` and ``da/dt`` with respect to the four alpha rows.

    Returns two tuples of four ``(B, nx, n_a)`` arrays each.
    """
    t = np.asarray(t, dtype=float).reshape(-1, 1, 1)
    a1, a2, a3, a4 = (alpha[:, i] for i in range(4))
    th = a2 * t + a3
    S, Cth = np.sin(th), np.cos(th)
    E = np.exp(-a4 * t)
    s3, c3 = np.sin(a3), np.cos(a3)
    da = (S * E - s3,
          a1 * t * Cth * E,
          a1 * (Cth * E - c3),
          -a1 * t * S * E)
    core = a2 * Cth - a4 * S
    ddt = (core * E,
           a1 * E * (Cth - t * (a2 * S + a4 * Cth)),
           a1 * E * (-a2 * S - a4 * Cth),
           a1 * E * (-S - t * core))
    return da, ddt


class SurrogateModel:
    """One-hidden-layer ansatz-coefficient network with normalization."""

    def __init__(self, nx, n_hidden, n_ansatz, t_s, state_scale, state_offset,
                 u_lo, u_hi, cb_lo, cb_hi, W1=None, b1=None, W2=None, b2=None,
                 rng=None, init_output_scale=0.05):
        self.nx = int(nx)
        self.n_hidden = int(n_hidden)
        self.n_ansatz = int(n_ansatz)
        self.t_s = float(t_s)
        self.state_scale = np.asarray(state_scale, dtype=float)
        self.state_offset = np.asarray(state_offset, dtype=float)
        self.u_lo = np.asarray(u_lo, dtype=float)
        self.u_hi = np.asarray(u_hi, dtype=float)
        self.cb_lo = float(cb_lo)
        self.cb_hi = float(cb_hi)
        self.d_in = self.nx + 4
        self.d_out = 4 * self.nx * self.n_ansatz
        if self.state_scale.shape != (self.nx,) or np.any(self.state_scale <= 0):
            raise ValueError("state_scale must be positive of length nx")
        if W1 is not None:
            self.W1, self.b1 = np.asarray(W1, float), np.asarray(b1, float)
            self.W2, self.b2 = np.asarray(W2, float), np.asarray(b2, float)
        else:
            rng = rng or np.random.default_rng(0)
            lim1 = 1.0 / np.sqrt(self.d_in)
            self.W1 = rng.uniform(-lim1, lim1, size=(self.n_hidden, self.d_in))
            self.b1 = np.zeros(self.n_hidden)
            lim2 = init_output_scale / np.sqrt(self.n_hidden)
            self.W2 = rng.uniform(-lim2, lim2, size=(self.d_out, self.n_hidden))
            # the ansatz is bilinear in (amplitude, frequency) around zero, so
            # an all-zero start has a vanishing gradient; bias the frequency
            # and decay rows to system-relevant magnitudes instead.  The decay
            # ladder reaches a multiple of the sampling rate so the stiff
            # boundary layer of off-manifold starts is representable.
            b2 = np.zeros((4, self.nx, self.n_ansatz))
            signs = np.where(np.arange(self.n_ansatz) % 2 == 0, 1.0, -1.0)
            b2[1] = signs * np.linspace(0.25, 1.0, self.n_ansatz) * np.pi / self.t_s
            b2[3] = np.linspace(0.1, 3.0, self.n_ansatz) / self.t_s
            self.b2 = b2.reshape(-1)
        if self.W1.shape != (self.n_hidden, self.d_in) \
                or self.W2.shape != (self.d_out, self.n_hidden):
            raise ModelFormatError("weight shapes inconsistent with dimensions")

    # -- plumbing ---------------------------------------------------------

    def check_compatible(self, params):
        if params.nx != self.nx:
            raise ModelFormatError(
                f"model has {self.nx} states but the rod model has {params.nx}")

    def parameters(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def normalize_inputs(self, X0, U0, CB):
        zx = (X0 - self.state_offset) / self.state_scale
        zu = 2.0 * (U0 - self.u_lo) / (self.u_hi - self.u_lo) - 1.0
        zc = 2.0 * (np.asarray(CB, float)[:, None] - self.cb_lo) \
            / (self.cb_hi - self.cb_lo) - 1.0
        return np.concatenate([zx, zu, zc], axis=1)

    def _net(self, Z):
        H = np.tanh(Z @ self.W1.T + self.b1)
        O = H @ self.W2.T + self.b2
        return H, O

    def alpha_batch(self, X0, U0, CB):
        Z = self.normalize_inputs(X0, U0, CB)
        _, O = self._net(Z)
        return O.reshape(-1, 4, self.nx, self.n_ansatz)

    # -- prediction -------------------------------------------------------

    def forward_batch(self, t, X0, U0, CB):
        """Predicted states at time ``t`` (scalar or per-sample ``(B,)``)."""
        X0 = np.asarray(X0, dtype=float)
        alpha = self.alpha_batch(X0, np.asarray(U0, float), CB)
        tt = np.full(X0.shape[0], t, dtype=float) if np.ndim(t) == 0 else t
        return X0 + self.state_scale * ansatz_eval(alpha, tt)

    def forward(self, t, x0, u0, cb):
        return self.forward_batch(t, np.asarray(x0, float)[None],
                                  np.asarray(u0, float)[None],
                                  np.atleast_1d(cb))[0]

    def forward_with_derivative(self, T, X0, U0, CB):
        """Prediction and its analytic time derivative at per-sample times."""
        X0 = np.asarray(X0, dtype=float)
        alpha = self.alpha_batch(X0, np.asarray(U0, float), CB)
        xhat = X0 + self.state_scale * ansatz_eval(alpha, T)
        xdot = self.state_scale * ansatz_dt(alpha, T)
        return xhat, xdot

    # -- serialization ----------------------------------------------------

    def save(self, path):
        head = struct.pack("<IIIIII", VERSION, self.nx, self.n_hidden,
                           self.n_ansatz, self.d_in, self.d_out)
        head += struct.pack("<ddd", self.t_s, self.cb_lo, self.cb_hi)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in (self.state_scale, self.state_offset,
                                  self.u_lo, self.u_hi,
                                  self.W1, self.b1, self.W2, self.b2))
        blob = MAGIC + head + body
        crc = zlib.crc32(blob) & 0xFFFFFFFF
        with open(path, "wb") as fh:
            fh.write(blob + struct.pack("<I", crc))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
            raise ModelFormatError("not a surrogate model file")
        blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(blob) & 0xFFFFFFFF != crc:
            raise ModelFormatError("checksum mismatch (file truncated or corrupt)")
        off = len(MAGIC)
        version, nx, n_n, n_a, d_in, d_out = struct.unpack_from("<IIIIII", blob, off)
        off += 24
        if version != VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        t_s, cb_lo, cb_hi = struct.unpack_from("<ddd", blob, off)
        off += 24
        if d_in != nx + 4 or d_out != 4 * nx * n_a:
            raise ModelFormatError("dimension header is inconsistent")

        def take(shape):
            nonlocal off
            n = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
            off += 8 * n
            return arr.reshape(shape).astype(float)

        state_scale = take((nx,))
        state_offset = take((nx,))
        u_lo, u_hi = take((3,)), take((3,))
        W1, b1 = take((n_n, d_in)), take((n_n,))
        W2, b2 = take((d_out, n_n)), take((d_out,))
        if off != len(blob):
            raise ModelFormatError("trailing bytes in model file")
        return cls(nx, n_n, n_a, t_s, state_scale, state_offset, u_lo, u_hi,
                   cb_lo, cb_hi, W1=W1, b1=b1, W2=W2, b2=b2)


@dataclass
class TrainingConfig:
    """Collocation-training settings; defaults follow the identified setup.

    ``snapshot_frac > 0`` draws that fraction of each batch as local
    perturbations (std ``sigma_local``) around states of the seed trajectory
    instead of the global normal cloud: the reduced-width desk models spend
    their capacity near the reachable tube this way.  ``time_power < 1``
    biases the residual evaluation times toward the end of the step.
    """
    epochs: int = 1500
    points_per_epoch: int = 1_000_000
    batch_size: int = 1000
    sigma_states: float = 0.5
    lr0: float = 0.000688
    patience: int = 75
    lr_factor: float = 0.5
    min_lr: float = 1e-7
    n_hidden: int = 281
    n_ansatz: int = 23
    t_s: float = 1.0 / 70.0
    cb_range_rel: tuple = (0.75, 1.25)
    u_margin: float = 1.0      # fraction of [0, p_max] to sample
    snapshot_frac: float = 0.0
    sigma_local: float = 0.15
    input_local_sigma: float = 0.0  # >0: sample u around the snapshot drive
    time_power: float = 1.0
    time_grid: int = 0            # >0: deterministic tau ladder per point
    loss_form: str = "implicit"   # "implicit" (raw residual) or "defect"
    defect_weight_nu: float = 1.0
    warmup_amplitude_epochs: int = 0
    tangent_init: bool = False
    grad_clip: float = 0.0        # >0: global gradient-norm clip
    val_points: int = 2000
    val_seed: int = 1234
    divergence_limit: float = 1e8

    def __post_init__(self):
        if self.points_per_epoch % self.batch_size:
            raise ValueError("batch size must divide points per epoch")


def sample_collocation_batch(model, config, rng, n=None, snapshots=None,
                             snapshot_inputs=None):
    """Collocation tuple ``(X0, U0, CB, TAU)`` in raw units.

    States are normal in normalized coordinates (std ``sigma_states``), with
    an optional ``snapshot_frac`` drawn around rows of ``snapshots`` instead;
    pressures and compliance are one joint Latin hypercube over their ranges
    (per batch, each of the ``n`` equal bins of every dimension holds exactly
    one sample); evaluation times cover ``(0, t_s]``.

    With ``input_local_sigma > 0`` the snapshot-anchored points draw their
    pressures around the snapshot's own drive pressure instead of the global
    hypercube: internal wrenches physically track the chamber pressure, so
    jointly sampled (state, input) pairs otherwise sit far off the manifold
    the closed loop ever queries, and the one-step response there is
    dominated by violent slaving transients.

    With ``time_grid = g > 0`` the batch holds ``n / g`` distinct points,
    each repeated at the deterministic time ladder ``(1..g) t_s / g``:
    enforcing the residual along the whole step welds the predicted curve to
    its start, where a single random time per point leaves windows in which
    the prediction can drift onto a neighboring trajectory of the field.
    """
    n = n or config.batch_size
    g = max(int(config.time_grid), 0)
    n_pts = n // g if g > 0 else n
    Xn = rng.normal(scale=config.sigma_states, size=(n_pts, model.nx))
    X0 = model.state_offset + model.state_scale * Xn
    lhs = np.empty((n_pts, 4))
    for d in range(4):
        strata = (rng.permutation(n_pts) + rng.random(n_pts)) / n_pts
        lhs[:, d] = strata
    U0 = model.u_lo + (model.u_hi - model.u_lo) * config.u_margin * lhs[:, 0:3]
    CB = model.cb_lo + (model.cb_hi - model.cb_lo) * lhs[:, 3]
    if snapshots is not None and config.snapshot_frac > 0:
        n_local = int(round(config.snapshot_frac * n_pts))
        pick = rng.integers(0, snapshots.shape[0], size=n_local)
        X0[:n_local] = snapshots[pick] + model.state_scale * rng.normal(
            scale=config.sigma_local, size=(n_local, model.nx))
        if snapshot_inputs is not None and config.input_local_sigma > 0:
            span = model.u_hi - model.u_lo
            U0[:n_local] = np.clip(
                snapshot_inputs[pick] + config.input_local_sigma * span
                * rng.normal(size=(n_local, 3)), model.u_lo, model.u_hi)
    if g > 0:
        ladder = model.t_s * np.arange(1, g + 1) / g
        X0 = np.repeat(X0, g, axis=0)
        U0 = np.repeat(U0, g, axis=0)
        CB = np.repeat(CB, g)
        TAU = np.tile(ladder, n_pts)
        return X0, U0, CB, TAU
    # exponent < 1 pushes density toward the end of the step
    TAU = model.t_s * (1.0 - rng.random(n)) ** config.time_power
    return X0, U0, CB, TAU


def default_row_scale(model, params):
    """Residual row normalization that equalizes flow-defect sensitivity.

    Near the flow the residual behaves like ``A(x) (xdot_hat - f(x_hat))``
    with ``A`` the mass-like matrix, whose row magnitudes differ by orders of
    magnitude (damping-scaled transmission rows vs. inertia-scaled balance
    rows).  Scaling row ``r`` by ``sum_c |A0[r, c]| scale_c / t_s`` makes every
    scaled row approximately the per-step normalized derivative defect it
    constrains, so the loss value is directly comparable to a squared
    one-step prediction error.
    """
    A0 = rm.dres_dxdot(np.zeros(params.nx), params)
    s = np.abs(A0) @ model.state_scale / model.t_s
    return np.maximum(s, 1e-12)


def physics_loss(batch, model, params, row_scale=None, form="implicit",
                 weight_nu=1.0):
    """Mean squared physics residual of the predictions on a batch.

    ``form="implicit"`` squares the (optionally row-scaled) implicit-equation
    residual directly.  ``form="defect"`` preconditions it by the mass-like
    matrix, i.e. squares the per-step normalized derivative defect
    ``(xdot_hat - f(x_hat)) * t_s / scale``: the implicit residual conceals
    defect directions whose mass-matrix columns are small (stiff axes), so
    the preconditioned form is what reduced-width models train on.  Defect
    samples are importance-weighted by ``nu^2 / (nu^2 + m(x0))`` with
    ``m(x0)`` the mean squared per-step rate at the sample itself (a
    weight that does not depend on the model), so violently off-manifold
    starts cannot drown out the reachable tube.
    """
    X0, U0, CB, TAU = batch
    xhat, xdot = model.forward_with_derivative(TAU, X0, U0, CB)
    if form == "defect":
        xd_star = _explicit_rates(xhat, U0, CB, params)
        w = model.t_s / model.state_scale
        d = (xdot - xd_star) * w
        sw = _sample_weights(batch, model, params, weight_nu)
        return float(np.mean(sw[:, None] * d * d))
    r = rm.residual(xhat, xdot, U0, params, cb=CB)
    if row_scale is not None:
        r = r / row_scale
    return float(np.mean(r * r))


def _explicit_rates(x, U0, CB, params):
    At = rm.dres_dxdot(x, params, cb=CB)
    f0 = rm.residual(x, np.zeros_like(x), U0, params, cb=CB)
    return np.linalg.solve(At, -f0[..., None])[..., 0]


def _sample_weights(batch, model, params, weight_nu):
    """Model-independent defect-loss weights from the rates at the samples."""
    X0, U0, CB, _ = batch
    f_at_x0 = _explicit_rates(X0, U0, CB, params)
    m = np.mean((f_at_x0 * model.t_s / model.state_scale) ** 2, axis=1)
    return weight_nu ** 2 / (weight_nu ** 2 + m)


def _backprop_network(model, Z, H, alpha, TAU, dL_dxhat, dL_dxdot):
    """Common tail: pull gradients from the prediction back to the weights."""
    B = Z.shape[0]
    dL_da = dL_dxhat * model.state_scale
    dL_dadt = dL_dxdot * model.state_scale
    da, ddt = _ansatz_partials(alpha, TAU)
    dL_dalpha = np.empty_like(alpha)
    for k in range(4):
        dL_dalpha[:, k] = dL_da[:, :, None] * da[k] + dL_dadt[:, :, None] * ddt[k]
    dL_dO = dL_dalpha.reshape(B, model.d_out)
    gW2 = dL_dO.T @ H
    gb2 = dL_dO.sum(axis=0)
    dL_dH = dL_dO @ model.W2
    dL_dpre = (1.0 - H * H) * dL_dH
    gW1 = dL_dpre.T @ Z
    gb1 = dL_dpre.sum(axis=0)
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


def physics_loss_and_grad(batch, model, params, row_scale=None,
                          form="implicit", weight_nu=1.0):
    """Loss plus its gradient with respect to all four weight arrays.

    The defect form uses the analytic explicit-dynamics Jacobian for the
    chain through ``f(x_hat)``; both forms share the ansatz/network tail.
    """
    X0, U0, CB, TAU = batch
    B = X0.shape[0]
    Z = model.normalize_inputs(X0, U0, CB)
    H, O = model._net(Z)
    alpha = O.reshape(B, 4, model.nx, model.n_ansatz)

    a_val = ansatz_eval(alpha, TAU)
    a_dt = ansatz_dt(alpha, TAU)
    xhat = X0 + model.state_scale * a_val
    xdot = model.state_scale * a_dt

    if form == "defect":
        At = rm.dres_dxdot(xhat, params, cb=CB)
        f0 = rm.residual(xhat, np.zeros_like(xhat), U0, params, cb=CB)
        xd_star = np.linalg.solve(At, -f0[..., None])[..., 0]
        delta = xdot - xd_star
        w = model.t_s / model.state_scale
        d = delta * w
        sw = _sample_weights(batch, model, params, weight_nu)
        loss = float(np.mean(sw[:, None] * d * d))
        g = (2.0 / d.size) * sw[:, None] * d * w          # dL/d(delta)
        Gx = rm.dres_dx(xhat, xd_star, U0, params, cb=CB)
        # dL/dxhat = -(df/dx)^T g = Gx^T A^{-T} g: one vector solve per point
        y = np.linalg.solve(np.swapaxes(At, -1, -2), g[..., None])[..., 0]
        dL_dxhat = np.einsum('bji,bj->bi', Gx, y)
        dL_dxdot = g
    else:
        r = rm.residual(xhat, xdot, U0, params, cb=CB)
        inv = 1.0 if row_scale is None else 1.0 / row_scale
        rs = r * inv
        loss = float(np.mean(rs * rs))
        dL_dr = (2.0 / rs.size) * rs * inv
        Gx = rm.dres_dx(xhat, xdot, U0, params, cb=CB)
        At = rm.dres_dxdot(xhat, params, cb=CB)
        dL_dxhat = np.einsum('bij,bi->bj', Gx, dL_dr)
        dL_dxdot = np.einsum('bij,bi->bj', At, dL_dr)

    grads = _backprop_network(model, Z, H, alpha, TAU, dL_dxhat, dL_dxdot)
    return loss, grads


def build_model(params, config, rng, state_scale, state_offset=None,
                u_lo=None, u_hi=None):
    """Fresh surrogate sized for ``params`` with the given normalization."""
    cb_lo = params.c_bend * config.cb_range_rel[0]
    cb_hi = params.c_bend * config.cb_range_rel[1]
    return SurrogateModel(
        nx=params.nx, n_hidden=config.n_hidden, n_ansatz=config.n_ansatz,
        t_s=config.t_s, state_scale=state_scale,
        state_offset=np.zeros(params.nx) if state_offset is None else state_offset,
        u_lo=np.zeros(3) if u_lo is None else u_lo,
        u_hi=np.full(3, params.p_max) if u_hi is None else u_hi,
        cb_lo=cb_lo, cb_hi=cb_hi, rng=rng)
