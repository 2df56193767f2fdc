"""Adam optimizer, plateau scheduler and the surrogate training loop."""

import time

import numpy as np

from . import rodmodel as rm
from .integrator import IntegratorConfig, integrate
from .surrogate import (TrainingConfig, build_model, default_row_scale,
                        physics_loss, physics_loss_and_grad,
                        sample_collocation_batch)


class TrainingDivergedError(RuntimeError):
    pass


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, patience=75, factor=0.5, min_lr=1e-7,
                 rel_threshold=1e-5):
        self.opt = optimizer
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.rel_threshold = rel_threshold
        self.best = np.inf
        self.wait = 0

    def step(self, metric):
        if metric < self.best * (1.0 - self.rel_threshold):
            self.best = metric
            self.wait = 0
        else:
            self.wait += 1
            if self.wait > self.patience:
                self.opt.lr = max(self.min_lr, self.opt.lr * self.factor)
                self.wait = 0


def tangent_space_init(model, params, u_ref=None, eps=0.05, n_tau=12):
    """Start the network at the linearized one-step flow (physics only).

    Linearizes the dynamics at the static equilibrium of a mid-range
    pressure, sets the ansatz frequency/decay ladders from the system
    eigenvalues, embeds the identity into the first input-width hidden units
    (scaled by ``eps`` so tanh stays in its linear range) and solves tiny
    per-state least squares in time so the amplitude head reproduces

        delta(tau) = (e^{A tau} - I)(x0 - x_eq) + A^{-1}(e^{A tau} - I) B (u - u_ref)

    exactly up to the basis fit.  Everything visible to the initializer comes
    from the rod model itself; no trajectory data is involved.  Training then
    learns the nonlinear remainder.
    """
    from .statics import static_solve

    u_ref = np.full(3, 0.35 * params.p_max) if u_ref is None else u_ref
    x_eq = static_solve(u_ref, params)
    A = rm.jacobian_fx(x_eq, u_ref, params)
    B = rm.jacobian_fu(x_eq, u_ref, params)
    lam, V = np.linalg.eig(A)
    Vinv = np.linalg.inv(V)

    # frequency/decay ladders from the spectrum: slowest-decaying oscillatory
    # modes carry the step response
    order = np.argsort(np.abs(lam.real))
    freqs, decays = [], []
    for idx in order:
        w = abs(lam[idx].imag)
        d = max(-lam[idx].real, 0.0)
        if all(abs(w - f) > 1.0 for f in freqs):
            freqs.append(w)
            decays.append(d)
        if len(freqs) == model.n_ansatz:
            break
    while len(freqs) < model.n_ansatz:
        freqs.append((len(freqs) + 1) * np.pi / model.t_s / model.n_ansatz)
        decays.append(1.0 / model.t_s)
    b2 = np.zeros((4, model.nx, model.n_ansatz))
    b2[1] = np.maximum(np.asarray(freqs), 2.0)
    b2[3] = np.clip(np.asarray(decays), 1.0, 4.0 / model.t_s)
    model.b2 = b2.reshape(-1)

    # linear-model increment profiles on a time grid, in normalized inputs
    taus = np.linspace(model.t_s / n_tau, model.t_s, n_tau)
    S = model.state_scale
    u_mid = 0.5 * (model.u_lo + model.u_hi)
    u_half = 0.5 * (model.u_hi - model.u_lo)
    d_in_lin = model.nx + 3
    M = np.zeros((n_tau, model.nx, d_in_lin + 1))  # inputs + constant
    for k, tau in enumerate(taus):
        E = (V * np.exp(lam * tau)) @ Vinv
        P = np.real(E) - np.eye(model.nx)
        Q = np.real(np.linalg.solve(A, P @ B))
        M[k, :, :model.nx] = (P * S[None, :]) / S[:, None]
        M[k, :, model.nx:model.nx + 3] = (Q * u_half[None, :]) / S[:, None]
        M[k, :, -1] = (Q @ (u_mid - u_ref) - P @ x_eq) / S

    # per-state fit of the amplitude head over the eigen-basis
    b2r = model.b2.reshape(4, model.nx, model.n_ansatz)
    G = np.zeros((model.nx, model.n_ansatz, d_in_lin + 1))
    for j in range(model.nx):
        th = b2r[1, j][None, :] * taus[:, None] + b2r[2, j][None, :]
        Phi = np.sin(th) * np.exp(-b2r[3, j][None, :] * taus[:, None]) \
            - np.sin(b2r[2, j][None, :])                       # (n_tau, n_a)
        lam_r = 1e-8 * max(np.trace(Phi.T @ Phi) / model.n_ansatz, 1e-12)
        H = np.linalg.solve(Phi.T @ Phi + lam_r * np.eye(model.n_ansatz),
                            Phi.T)
        G[j] = H @ M[:, j, :]                                  # (n_a, d)

    # embed: identity block into the first d_in hidden units
    n_id = model.d_in
    if model.n_hidden < n_id:
        raise ValueError("tangent init needs hidden width >= input width")
    model.W1[:] = 0.0
    model.W1[:n_id, :n_id] = eps * np.eye(n_id)
    rng = np.random.default_rng(0)
    if model.n_hidden > n_id:
        lim = 1.0 / np.sqrt(model.d_in)
        model.W1[n_id:] = rng.uniform(-lim, lim,
                                      size=(model.n_hidden - n_id, model.d_in))
    model.b1[:] = 0.0
    W2 = np.zeros((4, model.nx, model.n_ansatz, model.n_hidden))
    for j in range(model.nx):
        W2[0, j, :, :model.nx] = G[j][:, :model.nx] / eps
        W2[0, j, :, model.nx:model.nx + 3] = G[j][:, model.nx:model.nx + 3] / eps
    model.W2 = W2.reshape(model.d_out, model.n_hidden)
    b2r[0] = G[:, :, -1]
    model.b2 = b2r.reshape(-1)
    return model


def seed_pressure_profile(t, p_max):
    """Simple excitation used to map out the reachable state range."""
    base = 0.35 * p_max
    amp1, amp2 = 0.25 * p_max, 0.12 * p_max
    ph = 2.0 * np.pi * np.arange(3) / 3.0
    ramp = np.clip(t / 0.4, 0.0, 1.0)
    p = base + amp1 * np.sin(2 * np.pi * 0.5 * t + ph) \
        + amp2 * np.sin(2 * np.pi * 1.1 * t + 1.0 + ph)
    return np.clip(ramp * p, 0.0, p_max)


def state_scales_from_trajectory(params, t_s, duration=4.0, rtol=1e-6,
                                 profile=seed_pressure_profile,
                                 group_floor=0.02, margin=1.2):
    """Per-state normalization scales from a seeded simulated trajectory.

    Each state is scaled by its observed range (with headroom ``margin``);
    states barely excited inherit a floor from the largest scale inside
    their 6-component block so no direction collapses to zero.
    """
    f = lambda x, u: rm.explicit_dynamics(x, u, params)
    jac = lambda x, u: rm.jacobian_fx(x, u, params)
    cfg = IntegratorConfig(rtol=rtol, atol=1e-9, max_step=5 * t_s)
    t_eval = np.arange(0.0, duration + 1e-12, t_s)
    res = integrate(f, jac, np.zeros(params.nx),
                    lambda t: profile(t, params.p_max), (0.0, duration), cfg,
                    t_eval=t_eval)
    peak = np.abs(res.x).max(axis=0)
    scale = margin * peak
    blocks = scale.reshape(-1, 6)
    floor = group_floor * blocks.max(axis=1, keepdims=True)
    scale = np.maximum(blocks, floor).reshape(-1)
    return np.maximum(scale, 1e-9), res


def train(params, config=None, rng=None, state_scale=None, snapshots=None,
          snapshot_inputs=None, log_every=0, callback=None):
    """Train a surrogate purely on the dynamics residual.

    Returns ``(model, history)`` with per-epoch training loss, held-out
    validation loss (physics loss on a fixed collocation set) and learning
    rate.  Raises :class:`TrainingDivergedError` on non-finite or exploding
    loss.  When ``snapshot_frac`` is active and no snapshot bank is supplied,
    the seed trajectory used for the scales provides it (with its drive
    pressures).
    """
    config = config or TrainingConfig()
    rng = rng or np.random.default_rng(0)
    if state_scale is None or (snapshots is None and config.snapshot_frac > 0):
        computed_scale, seed_res = state_scales_from_trajectory(params,
                                                                config.t_s)
        if state_scale is None:
            state_scale = computed_scale
        if snapshots is None and config.snapshot_frac > 0:
            snapshots = seed_res.x
            snapshot_inputs = np.stack(
                [seed_pressure_profile(t, params.p_max) for t in seed_res.t])
    model = build_model(params, config, rng, state_scale)
    if config.tangent_init:
        tangent_space_init(model, params)
    row_scale = default_row_scale(model, params)

    val_rng = np.random.default_rng(config.val_seed)
    val_batch = sample_collocation_batch(model, config, val_rng,
                                         n=config.val_points,
                                         snapshots=snapshots,
                                         snapshot_inputs=snapshot_inputs)

    opt = Adam(model.parameters(), lr=config.lr0)
    sched = PlateauScheduler(opt, patience=config.patience,
                             factor=config.lr_factor, min_lr=config.min_lr)
    n_batches = config.points_per_epoch // config.batch_size
    history = {"train_loss": [], "val_loss": [], "lr": []}
    t_start = time.time()

    # rows of the coefficient head that emit amplitudes; during the warmup
    # the frequency/phase/decay rows stay at their bias ladders, which makes
    # the prediction linear in the trained weights (benign regression phase)
    amp_mask = np.zeros((4, model.nx, model.n_ansatz), dtype=bool)
    amp_mask[0] = True
    amp_mask = amp_mask.reshape(-1)

    for epoch in range(config.epochs):
        losses = np.empty(n_batches)
        amp_only = epoch < config.warmup_amplitude_epochs
        for b in range(n_batches):
            batch = sample_collocation_batch(model, config, rng,
                                             snapshots=snapshots,
                                             snapshot_inputs=snapshot_inputs)
            loss, grads = physics_loss_and_grad(batch, model, params,
                                                row_scale=row_scale,
                                                form=config.loss_form,
                                                weight_nu=config.defect_weight_nu)
            if not np.isfinite(loss) or loss > config.divergence_limit:
                raise TrainingDivergedError(
                    f"loss {loss:.3e} at epoch {epoch} batch {b} "
                    f"(lr={opt.lr:.2e})")
            if amp_only:
                grads["W2"] = grads["W2"] * amp_mask[:, None]
                grads["b2"] = grads["b2"] * amp_mask
            if config.grad_clip > 0:
                gnorm = np.sqrt(sum(float(np.sum(g * g))
                                    for g in grads.values()))
                if gnorm > config.grad_clip:
                    fac = config.grad_clip / gnorm
                    grads = {k: g * fac for k, g in grads.items()}
            opt.step(grads)
            losses[b] = loss
        train_loss = float(losses.mean())
        val_loss = physics_loss(val_batch, model, params, row_scale=row_scale,
                                form=config.loss_form,
                                weight_nu=config.defect_weight_nu)
        sched.step(train_loss)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        history["lr"].append(opt.lr)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            print(f"epoch {epoch:5d}  train {train_loss:.4e}  "
                  f"val {val_loss:.4e}  lr {opt.lr:.2e}  "
                  f"({time.time() - t_start:.0f}s)", flush=True)
        if callback is not None:
            callback(epoch, model, history)
    history = {k: np.asarray(v) for k, v in history.items()}
    return model, history
