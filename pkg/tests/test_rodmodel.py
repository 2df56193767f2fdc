import numpy as np
import pytest

from softrod import rodmodel as rm


def paper_params(**kw):
    return rm.RodParameters(**kw)


def random_state(rng, params, scale=1.0):
    """Bounded random state with realistic per-group magnitudes."""
    x = np.zeros(params.nx)
    x[params.idx_w_pre] = scale * rng.normal(size=6) * [1, 1, 2, 0.05, 0.05, 0.02]
    for i in range(1, params.n_nodes):
        x[params.idx_x1[i]] = scale * rng.normal(size=6) * [0.1, 0.1, 0.1, 1, 1, 1]
    for i in range(params.n_nodes):
        x[params.idx_x2[i]] = scale * rng.normal(size=6) * [1, 1, 2, 0.05, 0.05, 0.02]
    return x


def test_state_dimension_and_layout():
    p = paper_params()
    assert p.n_nodes == 6
    assert p.nx == 72
    # layout: mount wrench, then (x1, x2) pairs, then node-0 wrench
    assert p.idx_x1[1][0] == 6
    assert p.idx_x2[1][0] == 12
    assert p.idx_x2[0][0] == p.nx - 6


def test_strains_from_state():
    p = paper_params()
    assert np.allclose(rm.strains_from_state(np.zeros(6), p),
                       [0, 0, 1, 0, 0, 0])
    x2 = np.zeros(6)
    x2[2] = 10.0
    assert np.isclose(rm.strains_from_state(x2, p)[2], 1.0 + 0.0059 * 10.0)
    x2 = np.zeros(6)
    x2[3] = 0.02
    assert np.isclose(rm.strains_from_state(x2, p)[3], 49.9 * 0.02)


def test_pneumatic_wrench_examples():
    p = paper_params()
    assert np.allclose(rm.pneumatic_wrench(np.zeros(3), p), np.zeros(6))
    w = rm.pneumatic_wrench(np.array([1e4, 0, 0]), p)
    assert np.allclose(w[0:3], [0, 0, 2.356], atol=1e-3)
    assert np.allclose(w[3:6], [0, -0.049947, 0], atol=1e-5)
    # symmetric pressures: force only
    w = rm.pneumatic_wrench(np.array([2e4, 2e4, 2e4]), p)
    assert np.allclose(w[3:6], 0, atol=1e-12)
    assert np.isclose(w[2], 3 * 2e4 * p.a_chamber)


def test_pneumatic_distributed_load():
    p = paper_params()
    assert np.allclose(rm.pneumatic_distributed_load(p.xi0, np.zeros(6)), 0)
    zeta = np.array([0, 0, 5.0, 0, 0, 0])
    # straight strain, parallel force: no coupling
    assert np.allclose(rm.pneumatic_distributed_load(p.xi0, zeta), 0)
    xi = p.xi0.copy()
    xi[3] = 1.0  # curvature about x
    load = rm.pneumatic_distributed_load(xi, zeta)
    # force part n x omega = [0,0,5] x [1,0,0] = [0,5,0]
    assert np.allclose(load[0:3], [0, 5.0, 0])


class TestGravityLoads:
    def test_straight_rod(self):
        p = paper_params()
        xi = np.tile(p.xi0, (p.n_fine, 1))
        loads = rm.gravity_loads(xi, p)
        assert loads.shape == (p.n_fine + 1, 6)
        expect = np.array([0, 0, -p.rho_a * p.gravity, 0, 0, 0])
        assert np.allclose(loads, expect)

    def test_moments_identically_zero(self):
        p = paper_params()
        rng = np.random.default_rng(0)
        xi = np.tile(p.xi0, (p.n_fine, 1)) + 0.3 * rng.normal(size=(p.n_fine, 6))
        loads = rm.gravity_loads(xi, p)
        assert np.all(loads[:, 3:6] == 0.0)

    def test_rotated_by_accumulated_pose(self):
        # 90 degree bend about x accumulated by midpoint: downstream loads
        # rotated by the independently composed rotation
        p = paper_params(n_nodes=3, n_sub=4)
        xi = np.tile(p.xi0, (p.n_fine, 1))
        half = p.n_fine // 2
        kappa = (np.pi / 2) / (half * p.delta)
        xi[:half, 3] = kappa
        loads = rm.gravity_loads(xi, p)
        from softrod.liegroup import exp_SO3
        R = np.eye(3)
        for m in range(half):
            R = R @ exp_SO3([kappa * p.delta, 0, 0])
        expect = -p.rho_a * p.gravity * R.T @ np.array([0, 0, 1.0])
        assert np.allclose(loads[half][0:3], expect, atol=1e-12)
        assert np.allclose(loads[-1][0:3], expect, atol=1e-12)

    def test_refinement_second_order(self):
        # Richardson: doubling n_sub changes the tip load at second order
        base = paper_params(n_nodes=3)
        rng = np.random.default_rng(1)
        x = random_state(rng, base, scale=1.0)

        def tip_load(n_sub):
            p = paper_params(n_nodes=3, n_sub=n_sub)
            _, _, x2 = rm.split_state(x[None], p)
            xi = rm.staircase_strains(x2, p)[0]
            return rm.gravity_loads(xi, p)[-1]

        d1 = np.linalg.norm(tip_load(2) - tip_load(4))
        d2 = np.linalg.norm(tip_load(4) - tip_load(8))
        d3 = np.linalg.norm(tip_load(8) - tip_load(16))
        assert d2 / d1 < 0.35  # ~0.25 for clean second order
        assert d3 / d2 < 0.35

    def test_jacobian_structure_strictly_causal(self):
        p = paper_params(n_nodes=4, n_sub=3)
        rng = np.random.default_rng(2)
        xi = np.tile(p.xi0, (p.n_fine, 1)) + 0.2 * rng.normal(size=(p.n_fine, 6))
        J = rm.gravity_load_jacobian(xi, p)
        assert J.shape == (p.n_fine + 1, p.n_fine, 3, 6)
        for k in range(p.n_fine + 1):
            for m in range(p.n_fine):
                if m >= k:
                    assert np.all(J[k, m] == 0.0)
        # linear strain columns are exactly zero as well
        assert np.all(J[..., 0:3] == 0.0)

    def test_jacobian_matches_finite_differences(self):
        p = paper_params(n_nodes=3, n_sub=3)
        rng = np.random.default_rng(3)
        xi = np.tile(p.xi0, (p.n_fine, 1)) + 0.3 * rng.normal(size=(p.n_fine, 6))
        J = rm.gravity_load_jacobian(xi, p)
        eps = 1e-7
        for m in range(p.n_fine):
            for c in range(6):
                dxi = xi.copy()
                dxi[m, c] += eps
                lp = rm.gravity_loads(dxi, p)
                dxi[m, c] -= 2 * eps
                lm = rm.gravity_loads(dxi, p)
                fd = (lp - lm)[:, 0:3] / (2 * eps)
                assert np.allclose(J[:, m, :, c], fd, atol=1e-5 * p.rho_a * p.gravity)


class TestResidual:
    def test_zero_state_is_unloaded_equilibrium(self):
        p = paper_params(gravity=0.0)
        r = rm.residual(np.zeros(p.nx), np.zeros(p.nx), np.zeros(3), p)
        assert np.abs(r).max() == 0.0

    def test_linear_in_xdot(self):
        p = paper_params(n_nodes=4)
        rng = np.random.default_rng(4)
        x = random_state(rng, p)
        xd = rng.normal(size=p.nx)
        u = rng.uniform(0, 5e4, size=3)
        r0 = rm.residual(x, np.zeros(p.nx), u, p)
        A = rm.dres_dxdot(x, p)
        assert np.allclose(rm.residual(x, xd, u, p), A @ xd + r0, atol=1e-9)

    def test_consistency_with_explicit_dynamics(self):
        p = paper_params(n_nodes=4)
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = random_state(rng, p)
            u = rng.uniform(0, 5e4, size=3)
            xd = rm.explicit_dynamics(x, u, p)
            r = rm.residual(x, xd, u, p)
            assert np.abs(r).max() < 1e-8

    def test_batch_matches_single(self):
        p = paper_params(n_nodes=4)
        rng = np.random.default_rng(6)
        X = np.stack([random_state(rng, p) for _ in range(7)])
        U = rng.uniform(0, 5e4, size=(7, 3))
        Xd = rm.explicit_dynamics(X, U, p)
        for i in range(7):
            assert np.allclose(Xd[i], rm.explicit_dynamics(X[i], U[i], p),
                               atol=1e-10)

    def test_compliance_override(self):
        p = paper_params(n_nodes=4)
        rng = np.random.default_rng(7)
        x = random_state(rng, p)
        u = np.array([2e4, 1e4, 0.0])
        r_a = rm.residual(x, np.zeros(p.nx), u, p, cb=45.0)
        p45 = p.replace(c_bend=45.0)
        r_b = rm.residual(x, np.zeros(p.nx), u, p45)
        assert np.allclose(r_a, r_b, atol=1e-12)


class TestJacobians:
    def rel_err(self, J, Jfd):
        scale = np.abs(Jfd).max()
        return np.abs(J - Jfd).max() / scale

    def test_jacobian_fx_finite_difference(self):
        p = paper_params(n_nodes=4, n_sub=3)
        rng = np.random.default_rng(8)
        for _ in range(20):
            x = random_state(rng, p, scale=0.7)
            u = rng.uniform(0, 4e4, size=3)
            J = rm.jacobian_fx(x, u, p)
            eps = 1e-6
            Jfd = np.zeros_like(J)
            for k in range(p.nx):
                dx = np.zeros(p.nx)
                dx[k] = eps
                fp = rm.explicit_dynamics(x + dx, u, p)
                fmn = rm.explicit_dynamics(x - dx, u, p)
                Jfd[:, k] = (fp - fmn) / (2 * eps)
            assert self.rel_err(J, Jfd) < 1e-5

    def test_jacobian_fu_finite_difference(self):
        p = paper_params(n_nodes=4)
        rng = np.random.default_rng(9)
        x = random_state(rng, p, scale=0.7)
        u = rng.uniform(1e4, 4e4, size=3)
        J = rm.jacobian_fu(x, u, p)
        eps = 1.0
        Jfd = np.zeros_like(J)
        for k in range(3):
            du = np.zeros(3)
            du[k] = eps
            Jfd[:, k] = (rm.explicit_dynamics(x, u + du, p)
                         - rm.explicit_dynamics(x, u - du, p)) / (2 * eps)
        assert self.rel_err(J, Jfd) < 1e-6

    def test_gravity_free_jacobian_has_no_pose_chain(self):
        p = paper_params(n_nodes=4, gravity=0.0)
        J = rm.jacobian_fx(np.zeros(p.nx), np.zeros(3), p)
        assert np.all(np.isfinite(J))
        # at x = 0 with g = 0 finite differences agree essentially exactly
        eps = 1e-7
        for k in range(0, p.nx, 7):
            dx = np.zeros(p.nx)
            dx[k] = eps
            fd = (rm.explicit_dynamics(dx, np.zeros(3), p)
                  - rm.explicit_dynamics(-dx, np.zeros(3), p)) / (2 * eps)
            assert np.allclose(J[:, k], fd, atol=1e-6 * max(1, np.abs(fd).max()))


class TestOutputs:
    def test_straight_stack_height(self):
        p = paper_params()
        pos, rot = rm.output_ee_pose(np.zeros(p.nx), p)
        assert np.allclose(pos, [0, 0, 0.014 + 0.010 + 0.1249 + 0.010])
        assert np.allclose(pos[2], 0.1589)
        assert np.allclose(rot, 0)

    def test_constant_curvature_arc(self):
        p = paper_params()
        kappa = 4.0
        x = np.zeros(p.nx)
        for i in range(p.n_nodes):
            x[p.idx_x2[i][3]] = kappa / p.c_bend
        pos, rot = rm.output_ee_pose(x, p)
        th = kappa * p.length
        arc_tip = np.array([0.0, -(1 - np.cos(th)) / kappa, np.sin(th) / kappa])
        R_tip = np.array([[1, 0, 0],
                          [0, np.cos(th), -np.sin(th)],
                          [0, np.sin(th), np.cos(th)]])
        expect = np.array([0, 0, p.l_fts + p.l_cap]) + arc_tip \
            + R_tip @ np.array([0, 0, p.l_cap])
        assert np.allclose(pos, expect, atol=1e-9)
        assert np.allclose(rot, [th, 0, 0], atol=1e-9)

    def test_ee_pose_refinement_second_order(self):
        rng = np.random.default_rng(10)
        x = random_state(rng, paper_params(n_nodes=4), scale=1.0)

        def tip(n_sub):
            p = paper_params(n_nodes=4, n_sub=n_sub)
            return rm.output_ee_pose(x, p)[0]

        d1 = np.linalg.norm(tip(2) - tip(4))
        d2 = np.linalg.norm(tip(4) - tip(8))
        assert d2 / d1 < 0.35

    def test_base_wrench_zero_at_rest(self):
        p = paper_params(gravity=0.0)
        f, m = rm.output_base_wrench(np.zeros(p.nx), np.zeros(3), p)
        assert np.allclose(f, 0) and np.allclose(m, 0)
