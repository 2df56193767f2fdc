"""Collocation-discretized dynamic rod model in the local frame.

The rod state is a flat vector of dimension ``12 N`` for ``N`` nodes.  Layout
(``softrod`` pins it here once; tests assert it):

* ``x[0:6]``           -- wrench state on the mount side of the base cap
  (written ``w_pre`` below; the pressure transmission step sits between it and
  the node-0 state),
* ``x[6+12(i-1) : 6+12 i]`` for ``i = 1 .. N-1`` -- node ``i`` pair
  ``(x1_i, x2_i)`` of local velocity twist and internal-wrench state,
* ``x[12N-6 : 12N]``   -- node-0 wrench state (chamber side).

Node-0 velocities are identically zero (clamped base) and the wrench state
beyond the tip cap is identically zero (free end); both are eliminated from
the vector.  ``x == 0`` is the unloaded straight rod at rest for ``g == 0``.

Strain staircase for the pose/gravity recursion: nodal wrench states map
affinely to strains, strains are linear between nodes, and each of the
``n_sub`` subintervals per interval uses the constant strain sampled at its
midpoint.  The midpoint staircase integrates the linear profile exactly, so
refining ``n_sub`` converges at second order while the load at a fine-grid
point depends strictly on strain samples before it (block-lower-triangular
gravity Jacobian).

All operations take either a single state ``(12N,)`` or a batch ``(B, 12N)``.
An optional ``cb`` argument (scalar or ``(B,)``) overrides the bending
compliance, which the surrogate training and the compliance-estimating filter
rely on.
"""

import numpy as np

from .liegroup import (
    TWIST_ANGULAR,
    TWIST_LINEAR,
    ad_transpose_apply,
    coad_matrix,
    compose_pose,
    exp_SE3,
    hat3,
    log_SO3,
    right_jacobian_SO3,
    sharp_hat6,
)

EZ = np.array([0.0, 0.0, 1.0])


class SingularDynamicsError(RuntimeError):
    """Raised when the mass-like matrix of the implicit model is singular."""


class RodParameters:
    """Geometry, material, actuation and discretization constants of the rod.

    Only four compliance/damping entries were identified on hardware data
    (``c_bend``, ``c_dilat``, ``d_bend`` plus the geometric ``length`` and tip
    mass ``m_ee``); the remaining entries default to analytic estimates from
    an isotropic-material assumption with the Young modulus backed out of
    ``c_dilat`` and the cross-section area.  Pass explicit values to override.

    Units: SI throughout (m, kg, s, N, Pa).
    """

    def __init__(self, length=0.1249, density=1070.0, n_nodes=6, n_sub=4,
                 c_bend=49.9, c_dilat=0.0059, d_bend=0.005, m_ee=0.0668,
                 gravity=9.81, r_chamber=0.0212, a_chamber=235.6e-6,
                 l_fts=0.014, l_cap=0.010, d_inner=0.0070, d_outer=0.0424,
                 shear_correction=0.9, c_shear=None, c_torsion=None,
                 d_shear=None, d_dilat=None, d_torsion=None, p_max=75e3):
        if n_nodes < 2 or n_sub < 1:
            raise ValueError("need at least two nodes and one subinterval")
        self.length = float(length)
        self.density = float(density)
        self.n_nodes = int(n_nodes)
        self.n_sub = int(n_sub)
        self.m_ee = float(m_ee)
        self.gravity = float(gravity)
        self.r_chamber = float(r_chamber)
        self.a_chamber = float(a_chamber)
        self.l_fts = float(l_fts)
        self.l_cap = float(l_cap)
        self.d_inner = float(d_inner)
        self.d_outer = float(d_outer)
        self.shear_correction = float(shear_correction)
        self.p_max = float(p_max)
        self.c_bend = float(c_bend)
        self.c_dilat = float(c_dilat)
        self.d_bend = float(d_bend)

        # cross-section: annulus minus the three chamber bores
        self.area = np.pi / 4.0 * (d_outer ** 2 - d_inner ** 2) - 3.0 * a_chamber
        self.i_bend = np.pi / 64.0 * (d_outer ** 4 - d_inner ** 4)
        self.j_torsion = 2.0 * self.i_bend
        self.young_modulus = 1.0 / (self.c_dilat * self.area)
        self.shear_modulus = self.young_modulus / 3.0  # incompressible rubber

        c_shear = c_shear if c_shear is not None else 1.0 / (
            self.shear_modulus * self.area * self.shear_correction)
        c_torsion = c_torsion if c_torsion is not None else 1.0 / (
            self.shear_modulus * self.j_torsion)
        self.c_shear = float(c_shear)
        self.c_torsion = float(c_torsion)
        # non-identified damping time constants default to the bending value
        self.d_shear = float(d_shear if d_shear is not None else d_bend)
        self.d_dilat = float(d_dilat if d_dilat is not None else d_bend)
        self.d_torsion = float(d_torsion if d_torsion is not None else d_bend)

        self.C_diag = np.array([self.c_shear, self.c_shear, self.c_dilat,
                                self.c_bend, self.c_bend, self.c_torsion])
        self.D_diag = np.array([self.d_shear, self.d_shear, self.d_dilat,
                                self.d_bend, self.d_bend, self.d_torsion])
        rho_a = self.density * self.area
        self.rho_a = rho_a
        self.M_diag = np.array([rho_a, rho_a, rho_a,
                                self.density * self.i_bend,
                                self.density * self.i_bend,
                                self.density * self.j_torsion])
        if np.any(self.C_diag <= 0) or np.any(self.M_diag <= 0):
            raise ValueError("compliance and inertia must be positive")
        if np.any(self.D_diag < 0):
            raise ValueError("damping must be nonnegative")

        self.xi0 = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
        self.nx = 12 * self.n_nodes
        self.n_int = self.n_nodes - 1
        self.h = self.length / self.n_int
        self.n_fine = self.n_sub * self.n_int
        self.delta = self.length / self.n_fine

        # tip cap + marker mass as raised density on the last interval
        self.tip_factor = 1.0 + self.m_ee / (rho_a * self.h)
        scale = np.ones(self.n_int)
        scale[-1] = self.tip_factor
        self.M_int = scale[:, None] * self.M_diag[None, :]     # (n_int, 6)
        self.rho_ag_int = scale * rho_a * self.gravity         # (n_int,)

        # staircase interpolation: subinterval-midpoint weights on the nodes
        S = np.zeros((self.n_fine, self.n_nodes))
        for m in range(self.n_fine):
            i, r = divmod(m, self.n_sub)
            lam = (r + 0.5) / self.n_sub
            S[m, i] = 1.0 - lam
            S[m, i + 1] = lam
        self.S_interp = S

        # per-interval trapezoid weights on the fine load grid
        Wq = np.zeros((self.n_int, self.n_fine + 1))
        for i in range(self.n_int):
            k0 = i * self.n_sub
            Wq[i, k0:k0 + self.n_sub + 1] = self.delta
            Wq[i, k0] *= 0.5
            Wq[i, k0 + self.n_sub] *= 0.5
        self.Wq = Wq
        self.Wg = self.rho_ag_int[:, None] * Wq                # folds rho*A*g

        # chambers at 120 degree spacing, chamber 1 on +x
        ang = np.deg2rad([0.0, 120.0, 240.0])
        self.chamber_offsets = self.r_chamber * np.stack(
            [np.cos(ang), np.sin(ang), np.zeros(3)], axis=-1)  # (3, 3)
        Zp = np.zeros((6, 3))
        for i in range(3):
            Zp[0:3, i] = self.a_chamber * EZ
            Zp[3:6, i] = self.a_chamber * np.cross(self.chamber_offsets[i], EZ)
        self.Zp = Zp

        # state-vector index maps (see module docstring for the layout)
        idx_x1 = np.zeros((self.n_nodes, 6), dtype=int)   # node 0 row unused
        idx_x2 = np.zeros((self.n_nodes, 6), dtype=int)
        for i in range(1, self.n_nodes):
            base = 6 + 12 * (i - 1)
            idx_x1[i] = np.arange(base, base + 6)
            idx_x2[i] = np.arange(base + 6, base + 12)
        idx_x2[0] = np.arange(self.nx - 6, self.nx)
        self.idx_x1 = idx_x1
        self.idx_x2 = idx_x2
        self.idx_w_pre = np.arange(0, 6)

    def replace(self, **kwargs):
        """New parameter set with the given constructor fields replaced."""
        fields = dict(length=self.length, density=self.density,
                      n_nodes=self.n_nodes, n_sub=self.n_sub,
                      c_bend=self.c_bend, c_dilat=self.c_dilat,
                      d_bend=self.d_bend, m_ee=self.m_ee, gravity=self.gravity,
                      r_chamber=self.r_chamber, a_chamber=self.a_chamber,
                      l_fts=self.l_fts, l_cap=self.l_cap,
                      d_inner=self.d_inner, d_outer=self.d_outer,
                      shear_correction=self.shear_correction,
                      c_shear=self.c_shear, c_torsion=self.c_torsion,
                      d_shear=self.d_shear, d_dilat=self.d_dilat,
                      d_torsion=self.d_torsion, p_max=self.p_max)
        fields.update(kwargs)
        return RodParameters(**fields)


def _as_batch(a, width):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        if a.shape[0] != width:
            raise ValueError(f"expected vector of length {width}, got {a.shape}")
        return a[None, :], True
    if a.shape[-1] != width:
        raise ValueError(f"expected trailing dimension {width}, got {a.shape}")
    return a, False


def _compliance(params, cb, dtype=float):
    """Diagonal compliance, batched ``(B, 6)`` when ``cb`` is an array."""
    if cb is None:
        return params.C_diag[None, :]
    cb = np.atleast_1d(np.asarray(cb, dtype=dtype))
    C = np.tile(params.C_diag[None, :], (cb.shape[0], 1))
    C[:, 3] = cb
    C[:, 4] = cb
    return C


def split_state(x, params):
    """Gather ``(w_pre, x1_nodes, x2_nodes)`` from flat batched states."""
    B = x.shape[0]
    w_pre = x[:, params.idx_w_pre]
    x1 = np.zeros((B, params.n_nodes, 6))
    x1[:, 1:] = x[:, params.idx_x1[1:]]
    x2 = x[:, params.idx_x2]
    return w_pre, x1, x2


def strains_from_state(x2_node, params, cb=None):
    """Local strain of a wrench state: ``xi = C x2 + xi0``."""
    x2_node, single = _as_batch(x2_node, 6)
    C = _compliance(params, cb)
    xi = C * x2_node + params.xi0
    return xi[0] if single else xi


def pneumatic_wrench(u, params):
    """Point wrench applied by the chamber pressures at the caps."""
    u = np.asarray(u, dtype=float)
    return u @ params.Zp.T


def pneumatic_distributed_load(xi, zeta_p):
    """Spatial rate of change of a frame-constant wrench: ``ad(xi)^T zeta``."""
    return ad_transpose_apply(xi, zeta_p)


def staircase_strains(x2_nodes, params, cb=None):
    """Per-subinterval constant strains from nodal wrench states, ``(B, K, 6)``."""
    C = _compliance(params, cb)
    interp = np.einsum('mn,bnj->bmj', params.S_interp, x2_nodes)
    return C[:, None, :] * interp + params.xi0


def pose_recursion(xi_stair, params, need_positions=False):
    """Pose at every fine-grid point from the strain staircase.

    Returns rotations ``(B, K+1, 3, 3)`` and, if requested, positions
    ``(B, K+1, 3)``; the base pose is the identity.  The per-subinterval
    exponentials are evaluated in one batched call; only the composition is
    sequential.
    """
    B, K, _ = xi_stair.shape
    dR, dp = exp_SE3(xi_stair.reshape(B * K, 6), params.delta)
    dR = dR.reshape(B, K, 3, 3)
    dp = dp.reshape(B, K, 3)
    Rs = np.empty((B, K + 1, 3, 3))
    Rs[:, 0] = np.eye(3)
    ps = np.zeros((B, K + 1, 3)) if need_positions else None
    R = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
    p = np.zeros((B, 3))
    for m in range(K):
        if need_positions:
            p = np.einsum('bij,bj->bi', R, dp[:, m]) + p
            ps[:, m + 1] = p
        R = R @ dR[:, m]
        Rs[:, m + 1] = R
    return Rs, ps


def gravity_loads(xi_stair, params):
    """Local gravity load at every fine-grid point for a strain staircase.

    ``xi_stair`` has one constant strain per subinterval, ``(K, 6)`` or
    ``(B, K, 6)`` with ``K = n_sub (n_nodes - 1)``; the result has ``K + 1``
    load twists whose moment components are identically zero.  Uses the
    uniform body line density; the tip-mass correction is applied inside the
    residual quadrature.
    """
    xi_stair = np.asarray(xi_stair, dtype=float)
    single = xi_stair.ndim == 2
    if single:
        xi_stair = xi_stair[None]
    Rs, _ = pose_recursion(xi_stair, params)
    load = np.zeros(Rs.shape[:2] + (6,))
    # R^T e_z is the third row of R; gravity points to -z in the world frame
    load[..., 0:3] = -params.rho_a * params.gravity * Rs[..., 2, :]
    return load[0] if single else load


def _gravity_direction_jacobian(Rs, xi_stair, delta):
    """d(dir_k)/d(phi_m) blocks for the recursion, zero for ``m >= k``.

    ``dir_k = -R_k^T e_z`` and ``phi_m`` is the angular part of the m-th
    staircase strain.  Returns ``(B, K+1, K, 3, 3)``.  The (k, m) block is
    ``delta * hat(dir_k) R_k^T R_{m+1} Jr(delta phi_m)``; it factors into
    ``U_k V_m`` with ``U_k = hat(dir_k) R_k^T`` and ``V_m = R_{m+1} Jr_m``,
    so all blocks come out of a single batched matmul.
    """
    B, K, _ = xi_stair.shape
    dirs = -Rs[..., 2, :]
    Jr = right_jacobian_SO3(delta * xi_stair[..., TWIST_ANGULAR])  # (B,K,3,3)
    U = hat3(dirs) @ np.swapaxes(Rs, -1, -2)          # (B, K+1, 3, 3)
    V = Rs[:, 1:] @ Jr                                # (B, K, 3, 3)
    Urs = U.reshape(B, (K + 1) * 3, 3)
    Vrs = V.transpose(0, 2, 1, 3).reshape(B, 3, K * 3)
    W = np.matmul(Urs, Vrs).reshape(B, K + 1, 3, K, 3)
    Dkm = delta * W.transpose(0, 1, 3, 2, 4)
    mask = np.tril(np.ones((K + 1, K)), k=-1)  # m < k
    return Dkm * mask[None, :, :, None, None]


def gravity_load_jacobian(xi_stair, params):
    """Blocks ``d(load_k force)/d(xi_m)`` of :func:`gravity_loads`.

    Returned as ``(K+1, K, 3, 6)`` (or batched); the block vanishes whenever
    ``m >= k`` because the pose at point ``k`` only accumulates strain samples
    strictly before it.
    """
    xi_stair = np.asarray(xi_stair, dtype=float)
    single = xi_stair.ndim == 2
    if single:
        xi_stair = xi_stair[None]
    Rs, _ = pose_recursion(xi_stair, params)
    Dkm = _gravity_direction_jacobian(Rs, xi_stair, params.delta)
    out = np.zeros(Dkm.shape[:3] + (3, 6))
    out[..., :, 3:6] = params.rho_a * params.gravity * Dkm
    return out[0] if single else out


def _interval_midpoints(w_pre, x1, x2, xd1, xd2, params, C):
    """Midpoint quantities shared by the residual and its Jacobians."""
    x1m = 0.5 * (x1[:, :-1] + x1[:, 1:])
    x2m = 0.5 * (x2[:, :-1] + x2[:, 1:])
    xd1m = 0.5 * (xd1[:, :-1] + xd1[:, 1:])
    xd2m = 0.5 * (xd2[:, :-1] + xd2[:, 1:])
    Cb = C[:, None, :]
    xi_m = Cb * x2m + params.xi0
    w_nodes = x2 + params.D_diag * xd2
    wm = 0.5 * (w_nodes[:, :-1] + w_nodes[:, 1:])
    return x1m, x2m, xd1m, xd2m, xi_m, w_nodes, wm


def residual(x, xdot, u, params, cb=None):
    """Implicit-form residual ``c_eq(x, xdot, u)``; zero iff dynamics hold.

    Rows: base transmission (6), per interval compatibility (6) and balance
    (6), tip transmission (6).  Linear in ``xdot``.
    """
    x, single = _as_batch(x, params.nx)
    xdot, _ = _as_batch(xdot, params.nx)
    u, _ = _as_batch(u, 3)
    B = x.shape[0]
    C = _compliance(params, cb)

    w_pre, x1, x2 = split_state(x, params)
    wd_pre, xd1, xd2 = split_state(xdot, params)
    x1m, x2m, xd1m, xd2m, xi_m, w_nodes, wm = _interval_midpoints(
        w_pre, x1, x2, xd1, xd2, params, C)

    zeta_p = u @ params.Zp.T
    res = np.zeros((B, params.nx))

    # base cap: chamber-side wrench minus mount-side wrench minus zeta_p
    res[:, 0:6] = w_nodes[:, 0] - (w_pre + params.D_diag * wd_pre) - zeta_p

    # compatibility: d(x1)/ds = C xd2 - ad(xi0) x1 + ad(x1) C x2
    Cb = C[:, None, :]
    rel = Cb * x2m
    rhs_c = Cb * xd2m \
        - _ad_apply(np.broadcast_to(params.xi0, x1m.shape), x1m) \
        + _ad_apply(x1m, rel)
    comp = x1[:, 1:] - x1[:, :-1] - params.h * rhs_c

    # balance: d(w)/ds = ad(xi)^T (w - zeta_p) + M xd1 - ad(x1)^T M x1 - g-load
    Mx1m = params.M_int[None] * x1m
    rhs_b = ad_transpose_apply(xi_m, wm - zeta_p[:, None, :]) \
        + params.M_int[None] * xd1m - ad_transpose_apply(x1m, Mx1m)
    xi_stair = staircase_strains(x2, params, cb)
    Rs, _ = pose_recursion(xi_stair, params)
    dirs = -Rs[..., 2, :]
    g_int = np.einsum('ik,bkj->bij', params.Wg, dirs)  # (B, n_int, 3)
    bal = w_nodes[:, 1:] - w_nodes[:, :-1] - params.h * rhs_b
    bal[..., 0:3] += g_int

    inter = np.concatenate([comp, bal], axis=-1)  # (B, n_int, 12)
    res[:, 6:params.nx - 6] = inter.reshape(B, -1)

    # tip cap: wrench beyond the cap is zero
    res[:, params.nx - 6:] = zeta_p - w_nodes[:, -1]
    return res[0] if single else res


def _ad_apply(a, b):
    """Twist bracket ``sharp_hat6(a) @ b`` without forming matrices."""
    va, wa = a[..., TWIST_LINEAR], a[..., TWIST_ANGULAR]
    vb, wb = b[..., TWIST_LINEAR], b[..., TWIST_ANGULAR]
    return np.concatenate(
        [np.cross(wa, vb) + np.cross(va, wb), np.cross(wa, wb)], axis=-1)


def dres_dxdot(x, params, cb=None):
    """Mass-like matrix ``d c_eq / d xdot`` (depends on ``x`` only)."""
    x, single = _as_batch(x, params.nx)
    B = x.shape[0]
    C = _compliance(params, cb)
    _, _, x2 = split_state(x, params)
    x2m = 0.5 * (x2[:, :-1] + x2[:, 1:])
    xi_m = C[:, None, :] * x2m + params.xi0

    D = params.D_diag
    A = np.zeros((B, params.nx, params.nx))
    i2 = params.idx_x2
    i1 = params.idx_x1
    rows = np.arange(6)

    A[:, rows[:, None] + 0, i2[0][None, :]] += np.diag(D)[None]
    A[:, rows[:, None] + 0, np.arange(6)[None, :]] -= np.diag(D)[None]

    adT = np.swapaxes(sharp_hat6(xi_m), -1, -2)  # (B, n_int, 6, 6)
    hh = 0.5 * params.h
    for i in range(params.n_int):
        rc = 6 + 12 * i
        rb = rc + 6
        # compatibility rows: -h/2 C on both xd2 nodes
        Cd = np.zeros((B, 6, 6))
        Cd[:, np.arange(6), np.arange(6)] = C
        A[:, rc:rc + 6, :][:, :, i2[i]] += -hh * Cd
        A[:, rc:rc + 6, :][:, :, i2[i + 1]] += -hh * Cd
        # balance rows
        adTD = adT[:, i] * D[None, None, :]
        A[:, rb:rb + 6, :][:, :, i2[i]] += -np.diag(D)[None] - hh * adTD
        A[:, rb:rb + 6, :][:, :, i2[i + 1]] += np.diag(D)[None] - hh * adTD
        Mi = np.diag(params.M_int[i])[None]
        if i > 0:
            A[:, rb:rb + 6, :][:, :, i1[i]] += -hh * Mi
        A[:, rb:rb + 6, :][:, :, i1[i + 1]] += -hh * Mi

    rt = params.nx - 6
    A[:, rt + rows[:, None], i2[-1][None, :]] -= np.diag(D)[None]
    return A[0] if single else A


def dres_dx(x, xdot, u, params, cb=None):
    """State Jacobian ``d c_eq / d x`` at fixed ``xdot``."""
    x, single = _as_batch(x, params.nx)
    xdot, _ = _as_batch(xdot, params.nx)
    u, _ = _as_batch(u, 3)
    B = x.shape[0]
    C = _compliance(params, cb)

    w_pre, x1, x2 = split_state(x, params)
    _, xd1, xd2 = split_state(xdot, params)
    x1m, x2m, xd1m, xd2m, xi_m, w_nodes, wm = _interval_midpoints(
        w_pre, x1, x2, xd1, xd2, params, C)
    zeta_p = u @ params.Zp.T

    G = np.zeros((B, params.nx, params.nx))
    i1, i2 = params.idx_x1, params.idx_x2
    eye6 = np.eye(6)[None]

    # base transmission rows
    G[:, 0:6, :][:, :, i2[0]] += eye6
    G[:, 0:6, 0:6] -= eye6

    hh = 0.5 * params.h
    Cdiag = np.zeros((B, 6, 6))
    Cdiag[:, np.arange(6), np.arange(6)] = C
    ad_xi0 = sharp_hat6(params.xi0)[None]

    # gravity chain, accumulated per interval over all strain samples
    xi_stair = staircase_strains(x2, params, cb)
    Rs, _ = pose_recursion(xi_stair, params)
    Dkm = _gravity_direction_jacobian(Rs, xi_stair, params.delta)
    K = params.n_fine
    dG_dphi = np.matmul(params.Wg, Dkm.reshape(B, K + 1, K * 9))
    dG_dphi = dG_dphi.reshape(B, params.n_int, K, 3, 3)
    tmp = dG_dphi.transpose(0, 1, 3, 4, 2) @ params.S_interp     # (...,3,3,N)
    dG_dnode = tmp.transpose(0, 1, 4, 2, 3)                      # (B,n_int,N,3,3)
    Cang = C[:, 3:6]                                             # (B or 1, 3)
    dG_dnode = dG_dnode * Cang[:, None, None, None, :]

    for i in range(params.n_int):
        rc = 6 + 12 * i
        rb = rc + 6
        ad_rel = sharp_hat6(C * x2m[:, i])
        ad_x1m = sharp_hat6(x1m[:, i])
        blk_c1 = hh * (ad_xi0 + ad_rel)
        if i > 0:
            G[:, rc:rc + 6, :][:, :, i1[i]] += -eye6 + blk_c1
        G[:, rc:rc + 6, :][:, :, i1[i + 1]] += eye6 + blk_c1
        blk_c2 = -hh * (ad_x1m @ Cdiag)
        G[:, rc:rc + 6, :][:, :, i2[i]] += blk_c2
        G[:, rc:rc + 6, :][:, :, i2[i + 1]] += blk_c2

        Kw = coad_matrix(wm[:, i] - zeta_p)
        adT_xi = np.swapaxes(sharp_hat6(xi_m[:, i]), -1, -2)
        blk_b2 = -hh * (Kw @ Cdiag + adT_xi)
        G[:, rb:rb + 6, :][:, :, i2[i]] += -eye6 + blk_b2
        G[:, rb:rb + 6, :][:, :, i2[i + 1]] += eye6 + blk_b2
        Mi = params.M_int[i]
        KM = coad_matrix(Mi[None] * x1m[:, i])
        adT_x1 = np.swapaxes(sharp_hat6(x1m[:, i]), -1, -2)
        blk_b1 = hh * (KM + adT_x1 * Mi[None, None, :])
        if i > 0:
            G[:, rb:rb + 6, :][:, :, i1[i]] += blk_b1
        G[:, rb:rb + 6, :][:, :, i1[i + 1]] += blk_b1
        # gravity blocks: force rows, angular wrench-state columns, all nodes
        for n in range(params.n_nodes):
            cols = i2[n][3:6]
            G[:, rb:rb + 3, :][:, :, cols] += dG_dnode[:, i, n]

    rt = params.nx - 6
    G[:, rt:rt + 6, :][:, :, i2[-1]] -= eye6
    return G[0] if single else G


def dres_du(x, params, cb=None):
    """Input Jacobian ``d c_eq / d u``."""
    x, single = _as_batch(x, params.nx)
    B = x.shape[0]
    C = _compliance(params, cb)
    _, _, x2 = split_state(x, params)
    x2m = 0.5 * (x2[:, :-1] + x2[:, 1:])
    xi_m = C[:, None, :] * x2m + params.xi0

    J = np.zeros((B, params.nx, 3))
    J[:, 0:6, :] = -params.Zp[None]
    adT = np.swapaxes(sharp_hat6(xi_m), -1, -2)
    for i in range(params.n_int):
        rb = 6 + 12 * i + 6
        J[:, rb:rb + 6, :] = params.h * (adT[:, i] @ params.Zp[None])
    J[:, params.nx - 6:, :] = params.Zp[None]
    return J[0] if single else J


def explicit_dynamics(x, u, params, cb=None, check_condition=False):
    """Explicit state derivative ``xdot = -A(x)^{-1} c_eq(x, 0, u)``.

    Raises :class:`SingularDynamicsError` when the mass-like matrix is
    numerically singular (condition estimate above 1e14 when
    ``check_condition`` is set, or a failed/non-finite solve otherwise).
    """
    x, single = _as_batch(x, params.nx)
    u, _ = _as_batch(u, 3)
    A = dres_dxdot(x, params, cb)
    f0 = residual(x, np.zeros_like(x), u, params, cb)
    if check_condition:
        cond = np.linalg.cond(A)
        if np.any(~np.isfinite(cond)) or np.any(cond > 1e14):
            raise SingularDynamicsError(
                f"mass matrix condition estimate {np.max(cond):.3e} exceeds 1e14")
    try:
        xd = np.linalg.solve(A, -f0[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularDynamicsError(f"mass matrix is singular: {exc}") from exc
    if not np.all(np.isfinite(xd)):
        raise SingularDynamicsError("non-finite state derivative")
    return xd[0] if single else xd


def jacobian_fx(x, u, params, cb=None):
    """Analytic Jacobian of :func:`explicit_dynamics` with respect to ``x``."""
    x, single = _as_batch(x, params.nx)
    u, _ = _as_batch(u, 3)
    A = dres_dxdot(x, params, cb)
    f0 = residual(x, np.zeros_like(x), u, params, cb)
    xd = np.linalg.solve(A, -f0[..., None])[..., 0]
    Gx = dres_dx(x, xd, u, params, cb)
    J = -np.linalg.solve(A, Gx)
    return J[0] if single else J


def jacobian_fu(x, u, params, cb=None):
    """Analytic Jacobian of :func:`explicit_dynamics` with respect to ``u``."""
    x, single = _as_batch(x, params.nx)
    A = dres_dxdot(x, params, cb)
    Ju = dres_du(x, params, cb)
    J = -np.linalg.solve(A, Ju)
    return J[0] if single else J


def output_ee_pose(x, params, cb=None):
    """End-effector position and rotation vector of the tip marker frame.

    The pose chain stacks the sensor interface, the base cap, the deformed
    rod and the tip cap along local z.
    """
    x, single = _as_batch(x, params.nx)
    _, _, x2 = split_state(x, params)
    xi_stair = staircase_strains(x2, params, cb)
    Rs, ps = pose_recursion(xi_stair, params, need_positions=True)
    R_tip = Rs[:, -1]
    p_tip = ps[:, -1]
    base = np.array([0.0, 0.0, params.l_fts + params.l_cap])
    pos = base + p_tip + R_tip @ np.array([0.0, 0.0, params.l_cap])
    rot = log_SO3(R_tip)
    if single:
        return pos[0], rot[0]
    return pos, rot


def output_base_wrench(x, u, params, cb=None):
    """Reaction wrench the actuator applies to its mount.

    Convention: expressed in the sensor frame, whose origin sits
    ``l_fts + l_cap`` below the rod base along -z and which is aligned with
    the base frame.  Includes the rate term of the Kelvin-Voigt law, so the
    state derivative is evaluated internally.
    """
    x, single = _as_batch(x, params.nx)
    u, _ = _as_batch(u, 3)
    xd = explicit_dynamics(x, u, params, cb)
    w = x[:, 0:6] + params.D_diag * xd[:, 0:6]
    force = w[:, 0:3]
    lever = np.array([0.0, 0.0, params.l_fts + params.l_cap])
    moment = w[:, 3:6] + np.cross(lever, force)
    if single:
        return force[0], moment[0]
    return force, moment
