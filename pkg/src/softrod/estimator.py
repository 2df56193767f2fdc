"""Unscented Kalman filter over the rod state and its bending compliance.

The augmented state is ``[x; cb]`` (dimension ``12 N + 1``).  The transition
model advances every sigma point one sampling step through the surrogate with
that point's own compliance; the compliance itself transitions identically and
is corrected only by measurements.  The observation is the end-effector
position from the pose recursion (optionally plus the rotation vector), also
evaluated at each point's own compliance, which is what renders the parameter
observable.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import rodmodel as rm


class DivergenceError(RuntimeError):
    """Covariance lost positive definiteness (or a propagated point blew up)."""


@dataclass
class UkfConfig:
    """Sigma-point spread, grouped process noise and measurement noise.

    Noise defaults are the swarm-tuned values; one parameter drives each
    state group (linear velocities, angular velocities, in-plane internal
    forces, axial force, internal moments, compliance).  ``r_meas`` is the
    per-axis position variance in m^2.
    """
    alpha: float = 0.1
    beta: float = 1.097
    kappa: float = 10.13
    q_velo: float = 8.92e-6
    q_angvel: float = 2.76e-5
    q_force: float = 1.26e-5
    q_force_z: float = 0.0436
    q_torque: float = 1.49e-7
    q_cbend: float = 1.11e-5
    r_meas: float = 2.59e-8
    use_orientation: bool = False
    r_meas_ori: float = 1e-6
    init_var_state: float = 1e-6
    init_var_cb: float = 1.0
    jitter0: float = 1e-12
    jitter_growth: float = 10.0
    max_jitter_tries: int = 3

    def validate(self):
        for name in ("q_velo", "q_angvel", "q_force", "q_force_z", "q_torque",
                     "q_cbend", "r_meas"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class BeliefState:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self):
        return BeliefState(self.mean.copy(), self.cov.copy())


def wrench_group_variances(cfg):
    return np.array([cfg.q_force, cfg.q_force, cfg.q_force_z,
                     cfg.q_torque, cfg.q_torque, cfg.q_torque])


def build_process_noise(params, cfg):
    """Diagonal process noise over ``[x; cb]`` from the group parameters."""
    q = np.zeros(params.nx + 1)
    wrench = wrench_group_variances(cfg)
    velo = np.array([cfg.q_velo] * 3 + [cfg.q_angvel] * 3)
    q[params.idx_w_pre] = wrench
    for i in range(1, params.n_nodes):
        q[params.idx_x1[i]] = velo
    for i in range(params.n_nodes):
        q[params.idx_x2[i]] = wrench
    q[-1] = cfg.q_cbend
    return q


def _chol_with_jitter(P, cfg):
    jitter = 0.0
    for attempt in range(cfg.max_jitter_tries + 1):
        try:
            return np.linalg.cholesky(P + jitter * np.eye(P.shape[0]))
        except np.linalg.LinAlgError:
            jitter = cfg.jitter0 * cfg.jitter_growth ** attempt
    raise DivergenceError(
        "covariance lost positive definiteness (cholesky failed after jitter)")


class Ukf:
    """Filter instance bound to one surrogate, rod model and configuration."""

    def __init__(self, model, params, config=None):
        self.model = model
        self.params = params
        self.cfg = config or UkfConfig()
        self.cfg.validate()
        model.check_compatible(params)
        self.n = params.nx + 1
        lam = self.cfg.alpha ** 2 * (self.n + self.cfg.kappa) - self.n
        self._lam = lam
        self._gamma = np.sqrt(self.n + lam)
        self.wm = np.full(2 * self.n + 1, 1.0 / (2 * (self.n + lam)))
        self.wc = self.wm.copy()
        self.wm[0] = lam / (self.n + lam)
        self.wc[0] = self.wm[0] + 1.0 - self.cfg.alpha ** 2 + self.cfg.beta
        self.Q = np.diag(build_process_noise(params, self.cfg))
        m = 6 if self.cfg.use_orientation else 3
        r = [self.cfg.r_meas] * 3 + [self.cfg.r_meas_ori] * 3
        self.R = np.diag(r[:m])
        self.n_meas = m

    def initial_belief(self, x0, cb0):
        mean = np.concatenate([np.asarray(x0, float), [float(cb0)]])
        var = np.empty(self.n)
        var[:-1] = self.cfg.init_var_state * self.model.state_scale ** 2
        var[-1] = self.cfg.init_var_cb
        return BeliefState(mean, np.diag(var))

    def sigma_points(self, belief):
        """Scaled sigma set ``(2n+1, n)``; first point is the mean."""
        L = _chol_with_jitter(belief.cov, self.cfg)
        spread = self._gamma * L
        pts = np.empty((2 * self.n + 1, self.n))
        pts[0] = belief.mean
        pts[1:self.n + 1] = belief.mean + spread.T
        pts[self.n + 1:] = belief.mean - spread.T
        return pts

    def measure(self, pts):
        """Observation of each augmented sigma point (own compliance)."""
        X = pts[:, :-1]
        CB = pts[:, -1]
        pos, rot = rm.output_ee_pose(X, self.params, cb=CB)
        if self.cfg.use_orientation:
            return np.concatenate([pos, rot], axis=1)
        return pos

    def predict(self, belief, u):
        pts = self.sigma_points(belief)
        X = pts[:, :-1]
        CB = pts[:, -1]
        U = np.broadcast_to(np.asarray(u, float), (pts.shape[0], 3))
        Xn = self.model.forward_batch(self.model.t_s, X, U, CB)
        if not np.all(np.isfinite(Xn)):
            raise DivergenceError("non-finite sigma point after prediction")
        pts_n = np.concatenate([Xn, CB[:, None]], axis=1)
        mean = self.wm @ pts_n
        d = pts_n - mean
        cov = (self.wc[:, None] * d).T @ d + self.Q
        cov = 0.5 * (cov + cov.T)
        return BeliefState(mean, cov)

    def update(self, belief, z):
        z = np.asarray(z, float)
        pts = self.sigma_points(belief)
        Z = self.measure(pts)
        z_hat = self.wm @ Z
        dz = Z - z_hat
        dx = pts - belief.mean
        S = (self.wc[:, None] * dz).T @ dz + self.R
        Pxz = (self.wc[:, None] * dx).T @ dz
        K = np.linalg.solve(S.T, Pxz.T).T
        innovation = z - z_hat
        mean = belief.mean + K @ innovation
        cov = belief.cov - K @ S @ K.T
        cov = 0.5 * (cov + cov.T)
        _chol_with_jitter(cov, self.cfg)  # positive definiteness gate
        return BeliefState(mean, cov), {"innovation": innovation, "S": S}


def kink_measure(x, params, cb=None):
    """Mean moving standard deviation (window 3) of the strain arc gradient.

    Penalizes non-smooth estimated deformations; evaluated on the staircase
    strain samples of the fine grid.
    """
    x = np.atleast_2d(np.asarray(x, float))
    _, _, x2 = rm.split_state(x, params)
    xi = rm.staircase_strains(x2, params, cb)
    dxi = np.diff(xi, axis=1) / params.delta        # (B, K-1, 6)
    if dxi.shape[1] < 3:
        return 0.0
    windows = np.stack([dxi[:, i:dxi.shape[1] - 2 + i] for i in range(3)], axis=0)
    return float(np.mean(windows.std(axis=0)))


def run_filter(ukf, belief0, z_seq, u_seq):
    """Filter a measurement sequence; returns history and divergence info.

    ``u_seq[k]`` is the input active between measurements ``k`` and ``k+1``.
    """
    n_steps = len(z_seq)
    means = np.zeros((n_steps, ukf.n))
    innov = np.zeros((n_steps, ukf.n_meas))
    belief = belief0.copy()
    diverged_at = -1
    nan_count = 0
    for k in range(n_steps):
        try:
            belief, info = ukf.update(belief, z_seq[k])
            innov[k] = info["innovation"]
            means[k] = belief.mean
            nan_count += int(np.sum(~np.isfinite(belief.mean)))
            if k + 1 < n_steps:
                belief = ukf.predict(belief, u_seq[k])
        except DivergenceError:
            diverged_at = k
            means[k:] = belief.mean
            break
    return {"means": means, "innovations": innov, "diverged_at": diverged_at,
            "nan_count": nan_count, "belief": belief}


def tuning_cost(ukf_factory, config, belief0_factory, z_seq, u_seq, params,
                weights=None, z_true=None):
    """Observable-error tuning cost with additive stability penalties.

    Terms: estimated-vs-measured tip position (and orientation when enabled),
    strain-smoothness kink measure, a count of non-finite states and a flat
    divergence penalty.  ``weights`` defaults to equal weighting; the tuner
    sets them to the inverse errors of the initial configuration.
    """
    ukf = ukf_factory(config)
    hist = run_filter(ukf, belief0_factory(), z_seq, u_seq)
    X = hist["means"][:, :-1]
    CB = hist["means"][:, -1]
    # non-finite estimates are scored through the NaN counter, not the pose
    X = np.where(np.isfinite(X), X, 0.0)
    CB = np.where(np.isfinite(CB), CB, 1.0)
    pos, rot = rm.output_ee_pose(X, params, cb=CB)
    ref = z_true if z_true is not None else z_seq
    e_ee = float(np.mean(np.linalg.norm(pos - ref[:, 0:3], axis=1)))
    e_ori = 0.0
    if ref.shape[1] >= 6:
        e_ori = float(np.mean(np.linalg.norm(rot - ref[:, 3:6], axis=1)))
    e_kink = kink_measure(X, params, cb=CB)
    n_nans = hist["nan_count"]
    e_div = 1.0 if hist["diverged_at"] >= 0 else 0.0
    w = weights or {"ee": 1.0, "ori": 1.0, "kink": 1.0, "nans": 1.0, "div": 1e3}
    cost = (w["ee"] * e_ee + w["ori"] * e_ori + w["kink"] * e_kink
            + w["nans"] * n_nans + w["div"] * e_div)
    return cost, {"e_ee": e_ee, "e_ori": e_ori, "e_kink": e_kink,
                  "n_nans": n_nans, "e_div": e_div}


def tune_ukf_pso(model, params, base_config, z_seq, u_seq, belief0_factory,
                 pso_config=None, rng=None):
    """Swarm-tune noise and spread parameters against a reference run.

    Noise parameters are searched in log10 space around the base values;
    weights are the inverse errors of the base configuration.  Returns the
    better of (tuned, base).
    """
    from .optimize import PsoConfig, pso_minimize

    rng = rng or np.random.default_rng(0)
    names = ["q_velo", "q_angvel", "q_force", "q_force_z", "q_torque",
             "q_cbend", "r_meas", "alpha", "beta", "kappa"]
    x0 = np.array([np.log10(getattr(base_config, n)) for n in names[:7]]
                  + [base_config.alpha, base_config.beta, base_config.kappa])
    lo = np.concatenate([x0[:7] - 2.0, [0.01, 0.0, 0.0]])
    hi = np.concatenate([x0[:7] + 2.0, [1.0, 3.0, 30.0]])

    def to_config(vec):
        kw = {n: 10.0 ** v for n, v in zip(names[:7], vec[:7])}
        kw.update(alpha=vec[7], beta=vec[8], kappa=vec[9])
        return replace(base_config, **kw)

    def factory(cfg):
        return Ukf(model, params, cfg)

    base_cost, parts = tuning_cost(factory, base_config, belief0_factory,
                                   z_seq, u_seq, params)
    weights = {"ee": 1.0 / max(parts["e_ee"], 1e-9),
               "ori": 1.0 / max(parts["e_ori"], 1e-9),
               "kink": 1.0 / max(parts["e_kink"], 1e-9),
               "nans": 1.0, "div": 1e3}
    base_cost, _ = tuning_cost(factory, base_config, belief0_factory,
                               z_seq, u_seq, params, weights=weights)

    def objective(vec):
        try:
            c, _ = tuning_cost(factory, to_config(vec), belief0_factory,
                               z_seq, u_seq, params, weights=weights)
        except (DivergenceError, ValueError):
            return np.inf
        return c

    cfg = pso_config or PsoConfig(n_particles=12, n_iters=15,
                                  bounds=list(zip(lo, hi)))
    best_x, best_cost, _ = pso_minimize(objective, cfg, rng)
    if best_cost < base_cost:
        return to_config(best_x), best_cost
    return base_config, base_cost
