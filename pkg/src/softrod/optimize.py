"""Bound-constrained particle swarm optimizer and parameter identification.

The static stage recovers ``{length, m_ee, c_bend, c_dilat}`` from stationary
configurations spanning the workspace (single, dual and all-chamber actuation
at several pressure levels); the dynamic stage identifies the bending damping
time constant from one oscillation-plus-release trajectory.  Both run on
synthetic data produced by the rod model itself, weighting each output error
by the inverse of its error at the initial parameter guess.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rodmodel as rm
from .integrator import IntegratorConfig, integrate
from .statics import StaticsError, static_solve


@dataclass
class PsoConfig:
    n_particles: int = 40
    n_iters: int = 60
    inertia: float = 0.729
    c_cognitive: float = 1.494
    c_social: float = 1.494
    bounds: list = field(default_factory=list)  # [(lo, hi)] per dimension
    v_max_frac: float = 0.5

    def validate(self):
        if not self.bounds:
            raise ValueError("bounds required")
        for lo, hi in self.bounds:
            if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
                raise ValueError("bounds must be finite with hi > lo")
        if min(self.inertia, self.c_cognitive, self.c_social) <= 0:
            raise ValueError("coefficients must be positive")


def pso_minimize(objective, config, rng):
    """Global-best PSO with velocity clamping and boundary reflection.

    Returns ``(best_x, best_cost, history)`` where history is the best cost
    after each iteration (monotone non-increasing).  Non-finite objective
    values count as +inf.
    """
    config.validate()
    lo = np.array([b[0] for b in config.bounds])
    hi = np.array([b[1] for b in config.bounds])
    span = hi - lo
    npart, dim = config.n_particles, len(config.bounds)
    v_max = config.v_max_frac * span

    def safe_eval(x):
        val = objective(x)
        return np.inf if not np.isfinite(val) else float(val)

    X = lo + span * rng.random((npart, dim))
    V = (rng.random((npart, dim)) - 0.5) * span * 0.2
    pbest_x = X.copy()
    pbest_f = np.array([safe_eval(x) for x in X])
    g = int(np.argmin(pbest_f))
    gbest_x, gbest_f = pbest_x[g].copy(), pbest_f[g]
    history = [gbest_f]

    for _ in range(config.n_iters):
        r1 = rng.random((npart, dim))
        r2 = rng.random((npart, dim))
        V = (config.inertia * V
             + config.c_cognitive * r1 * (pbest_x - X)
             + config.c_social * r2 * (gbest_x - X))
        V = np.clip(V, -v_max, v_max)
        X = X + V
        # reflect at the box and flip the corresponding velocity component
        for _ in range(3):
            under = X < lo
            over = X > hi
            if not (under.any() or over.any()):
                break
            X = np.where(under, 2 * lo - X, X)
            X = np.where(over, 2 * hi - X, X)
            V = np.where(under | over, -V, V)
        X = np.clip(X, lo, hi)
        for i in range(npart):
            f = safe_eval(X[i])
            if f < pbest_f[i]:
                pbest_f[i] = f
                pbest_x[i] = X[i].copy()
                if f < gbest_f:
                    gbest_f = f
                    gbest_x = X[i].copy()
        history.append(gbest_f)
    return gbest_x, gbest_f, np.array(history)


# -- identification -------------------------------------------------------

STATIC_PATTERNS = np.array([
    [1, 0, 0], [0, 1, 0], [0, 0, 1],
    [1, 1, 0], [0, 1, 1], [1, 0, 1],
    [1, 1, 1],
], dtype=float)


def static_pressure_set(levels=None):
    """Single/dual/all-chamber patterns at six pressure levels (42 runs)."""
    levels = np.asarray(levels if levels is not None
                        else np.linspace(5e3, 3.0e4, 6))
    return np.concatenate([STATIC_PATTERNS * lv for lv in levels])


def make_static_dataset(params, pressures=None):
    """Synthetic stationary observations (tip position, base wrench)."""
    pressures = static_pressure_set() if pressures is None else pressures
    rows = []
    for u in pressures:
        x = static_solve(u, params)
        pos, _ = rm.output_ee_pose(x, params)
        f, m = rm.output_base_wrench(x, u, params)
        rows.append((u.copy(), pos, f, m))
    return rows


def _aed(a, b):
    return float(np.mean(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=1)))


def _static_errors(params, dataset):
    pos_m, pos_r, f_m, f_r, m_m, m_r = [], [], [], [], [], []
    warm = None
    for u, pos_ref, f_ref, mom_ref in dataset:
        x = static_solve(u, params, x_init=warm)
        warm = x
        pos, _ = rm.output_ee_pose(x, params)
        f, m = rm.output_base_wrench(x, u, params)
        pos_m.append(pos)
        pos_r.append(pos_ref)
        f_m.append(f)
        f_r.append(f_ref)
        m_m.append(m)
        m_r.append(mom_ref)
    return _aed(pos_m, pos_r), _aed(f_m, f_r), _aed(m_m, m_r)


STATIC_FREE_PARAMS = ("length", "m_ee", "c_bend", "c_dilat")


def identify_static(dataset, params_init, free=STATIC_FREE_PARAMS,
                    rel_box=0.3, pso_config=None, rng=None, weights=None):
    """Recover static parameters from stationary data by swarm search.

    The cost is the sum of position/force/moment average Euclidean distances,
    each divided by its value at ``params_init`` (unit cost at the initial
    guess).  Returns ``(identified RodParameters, best cost, history)``.
    """
    rng = rng or np.random.default_rng(0)
    x0 = np.array([getattr(params_init, name) for name in free])
    bounds = [(v * (1 - rel_box), v * (1 + rel_box)) for v in x0]

    if weights is None:
        e0 = _static_errors(params_init, dataset)
        weights = tuple(max(e, 1e-12) for e in e0)

    def objective(vec):
        try:
            cand = params_init.replace(**dict(zip(free, vec)))
            e = _static_errors(cand, dataset)
        except (StaticsError, ValueError, np.linalg.LinAlgError):
            return np.inf
        return e[0] / weights[0] + e[1] / weights[1] + e[2] / weights[2]

    cfg = pso_config or PsoConfig(n_particles=24, n_iters=40, bounds=bounds)
    best_x, best_f, hist = pso_minimize(objective, cfg, rng)
    return params_init.replace(**dict(zip(free, best_x))), best_f, hist


def dynamic_identification_profile(t, p_max):
    """Oscillations at a few frequencies followed by a release to ambient."""
    amp = 0.35 * p_max
    ph = 2 * np.pi * np.arange(3) / 3
    if t < 1.2:
        p = amp * (1 - np.cos(2 * np.pi * 0.5 * t)) * 0.5 + amp * 0.3
    elif t < 2.4:
        p = amp * (0.5 + 0.45 * np.sin(2 * np.pi * 1.0 * (t - 1.2)))
    else:
        return np.zeros(3)
    return np.clip(p * (0.6 + 0.4 * np.cos(ph)), 0, p_max)


def simulate_identification_outputs(params, duration=3.2, dt=1 / 70,
                                    rtol=1e-6, profile=None):
    """Tip/base output trajectory of the rod under the identification input."""
    profile = profile or dynamic_identification_profile
    f = lambda x, u: rm.explicit_dynamics(x, u, params)
    jac = lambda x, u: rm.jacobian_fx(x, u, params)
    cfg = IntegratorConfig(rtol=rtol, atol=1e-9, max_step=5 * dt)
    t_eval = np.arange(0.0, duration + 1e-12, dt)
    res = integrate(f, jac, np.zeros(params.nx),
                    lambda t: profile(t, params.p_max), (0.0, duration), cfg,
                    t_eval=t_eval)
    U = np.stack([profile(t, params.p_max) for t in res.t])
    pos, _ = rm.output_ee_pose(res.x, params)
    force, moment = rm.output_base_wrench(res.x, U, params)
    return {"t": res.t, "u": U, "pos": pos, "force": force, "moment": moment}


def identify_dynamic(reference, params_init, free=("d_bend",), rel_box=0.6,
                     pso_config=None, rng=None, weights=None, rtol=1e-6,
                     profile=None):
    """Identify damping from a dynamic output trajectory (same weighting)."""
    rng = rng or np.random.default_rng(0)
    x0 = np.array([getattr(params_init, name) for name in free])
    bounds = [(v * (1 - rel_box), v * (1 + rel_box)) for v in x0]
    duration = float(reference["t"][-1])
    dt = float(reference["t"][1] - reference["t"][0])

    def errors(params):
        sim = simulate_identification_outputs(params, duration=duration,
                                              dt=dt, rtol=rtol,
                                              profile=profile)
        return (_aed(sim["pos"], reference["pos"]),
                _aed(sim["force"], reference["force"]),
                _aed(sim["moment"], reference["moment"]))

    if weights is None:
        e0 = errors(params_init)
        weights = tuple(max(e, 1e-12) for e in e0)

    def objective(vec):
        try:
            e = errors(params_init.replace(**dict(zip(free, vec))))
        except Exception:
            return np.inf
        return e[0] / weights[0] + e[1] / weights[1] + e[2] / weights[2]

    cfg = pso_config or PsoConfig(n_particles=10, n_iters=20, bounds=bounds)
    best_x, best_f, hist = pso_minimize(objective, cfg, rng)
    return params_init.replace(**dict(zip(free, best_x))), best_f, hist
