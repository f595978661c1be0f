import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from conftest import THETA_F, dense_projection, robust_q_oracle
from qcbf.core import Box, ClassKMap, ConfigurationError, Grid, ScalarField
from qcbf.dynamics import FrozenSystem, PendulumConfig, pendulum_derivative, with_dstb_box
from qcbf.filters import (
    ANALYTIC_OMEGA_COEF,
    ContinuousBarrier,
    CTCBFFilter,
    LeastRestrictiveFilter,
    NoFilter,
    PDController,
    QCBFSafetyFilter,
    REFINE_RESOLUTION,
    ct_cbf_filter,
    h_ana,
    h_heu,
    lrsf_filter,
    lrsf_filter_nominal,
    pd_task_controller,
    qcbf_filter,
    qcbf_filter_nominal,
    worst_hdot_terms,
)
from qcbf.isaacs import discretize_box, fallback_action, q_value

U41 = np.linspace(-20, 20, 41)[:, None]
D21 = np.linspace(-2, 2, 21)[:, None]
BETA = ClassKMap("linear", gamma=0.9)


def safe_samples(cert, n, seed, lo=0.0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        x = rng.uniform([-1.1, -6.5], [1.1, 6.5])
        if cert.evaluate(x) >= lo:
            out.append(x)
    return np.array(out)


class TestQCBF:
    def test_dense_oracle_example(self, cert, pendulum):
        x = np.array([0.45, 1.2])
        out = qcbf_filter(x, [0.0], cert, pendulum, BETA, U41, D21)
        level = BETA(cert.evaluate(x))
        oracle = dense_projection(lambda U: robust_q_oracle(cert, pendulum, x, U), level, 0.0)
        assert out.feasible and out.intervened
        assert abs(out.u_exec[0] - oracle) <= 1e-3

    def test_slack_deep_inside(self, cert, pendulum):
        out = qcbf_filter(np.zeros(2), [3.0], cert, pendulum, BETA, U41, D21)
        assert out.u_exec[0] == 3.0 and not out.intervened and out.feasible

    def test_degenerate_box_matches_nominal_path(self, cert, pendulum):
        nominal = with_dstb_box(pendulum, Box([0.0], [0.0]))
        rng = np.random.default_rng(0)
        for x in safe_samples(cert, 40, 1):
            ut = rng.uniform(-20, 20, size=1)
            a = qcbf_filter(x, ut, cert, nominal, BETA, U41, np.zeros((1, 1)))
            b = qcbf_filter_nominal(x, ut, cert, nominal, BETA, U41)
            assert a.u_exec.tobytes() == b.u_exec.tobytes() and a.feasible == b.feasible

    def test_outside_certificate_uses_fallback(self, cert, pendulum):
        out = qcbf_filter(np.array([1.0, 3.0]), [0.0], cert, pendulum, BETA, U41, D21)
        assert out.fallback_used and not out.feasible and not out.certified
        u_fb, _ = fallback_action(cert, pendulum, np.array([1.0, 3.0]), U41, D21)
        assert out.u_exec.tobytes() == u_fb.tobytes()

    def test_empty_discretization(self, cert, pendulum):
        with pytest.raises(ConfigurationError):
            qcbf_filter(np.zeros(2), [0.0], cert, pendulum, BETA, np.zeros((0, 1)), D21)

    @settings(max_examples=40)
    @given(st.floats(-1.15, 1.15), st.floats(-6.5, 6.5), st.floats(-30, 30))
    def test_output_invariants(self, cert, pendulum, th, w, ut):
        out = qcbf_filter(np.array([th, w]), [ut], cert, pendulum, BETA, U41, D21)
        assert -20.0 <= out.u_exec[0] <= 20.0
        assert out.intervened == bool(out.u_exec[0] != out.u_task[0])
        assert out.feasible or out.fallback_used

    def test_minimal_deviation_on_finer_grid(self, cert, pendulum):
        fine = np.linspace(-20, 20, 401)[:, None]
        rng = np.random.default_rng(3)
        for x in safe_samples(cert, 25, 4):
            ut = float(rng.uniform(-20, 20))
            out = qcbf_filter(x, [ut], cert, pendulum, BETA, U41, D21)
            if not out.feasible:
                continue
            ok = robust_q_oracle(cert, pendulum, x, fine) >= BETA(cert.evaluate(x))
            closer = np.abs(fine[ok, 0] - ut) < abs(out.u_exec[0] - ut) - REFINE_RESOLUTION
            assert not closer.any()

    def test_one_step_preservation_subsample(self, canonical, pendulum):
        cert = canonical["cert"]
        eps = 1e-3
        nodes = cert.grid.nodes()
        vals = cert.value.values
        idx = np.flatnonzero(vals >= eps)[::37]
        for i in idx:
            x = nodes[i]
            out = qcbf_filter(x, pd_task_controller(x), cert, pendulum, BETA, U41, D21)
            assert out.feasible
            nxt = pendulum.step(x[None, :], out.u_exec[None, :], D21)
            assert cert.evaluate(nxt).min() >= -eps

    def test_constraint_equivalence(self, canonical, pendulum):
        cert = canonical["cert"]
        nodes = cert.grid.nodes()
        idx = np.flatnonzero(cert.value.values >= 0)[::211]
        for i in idx:
            x = nodes[i]
            level = BETA(cert.value.values[i])
            for u in U41[::4]:
                lhs = min(q_value(cert, pendulum, x, u, d) for d in D21) >= level
                rhs = cert.lift.evaluate(pendulum.step(x[None, :], u[None, :], D21)).min() >= level
                assert lhs == rhs

    def test_induced_beta(self, cert, pendulum):
        beta = ClassKMap("induced", rate=1.0, dt=0.01)
        x = np.array([0.45, 1.2])
        out = qcbf_filter(x, [0.0], cert, pendulum, beta, U41, D21)
        assert out.feasible
        assert robust_q_oracle(cert, pendulum, x, out.u_exec)[0] >= beta(cert.evaluate(x))


class TestLRSF:
    def test_frozen_system_passes(self):
        fs = FrozenSystem(lambda x: 1.0 - np.abs(x[..., 0]))
        grid = Grid((-1.0, -1.0), (1.0, 1.0), (5, 5))
        V = ScalarField.from_function(grid, fs.margin)
        out = lrsf_filter(np.array([0.5, 0.0]), [0.3], V, fs, [[-1.0], [1.0]], [[-1.0], [0.0], [1.0]])
        assert out.u_exec[0] == 0.3 and not out.intervened

    def test_unsafe_nodes_never_pass(self, canonical, pendulum):
        cert = canonical["cert"]
        nodes = cert.grid.nodes()
        margin = pendulum.margin(nodes)
        idx = np.flatnonzero((cert.value.values < 0) & (margin >= 0))[::5]
        for i in idx:
            x = nodes[i]
            out = lrsf_filter(x, pd_task_controller(x), cert, pendulum, D21, U41)
            assert out.fallback_used and out.constraint_margin < 0

    def test_degenerate_box_matches_nominal_path(self, cert, pendulum):
        nominal = with_dstb_box(pendulum, Box([0.0], [0.0]))
        rng = np.random.default_rng(5)
        X = rng.uniform([-1.1, -6.5], [1.1, 6.5], size=(60, 2))
        for x in X:
            ut = rng.uniform(-20, 20, size=1)
            a = lrsf_filter(x, ut, cert, nominal, np.zeros((1, 1)), U41)
            b = lrsf_filter_nominal(x, ut, cert, nominal, U41)
            assert a.u_exec.tobytes() == b.u_exec.tobytes()
            assert a.fallback_used == b.fallback_used

    def test_monitor_reads_single_successor(self, cert, pendulum):
        nominal = with_dstb_box(pendulum, Box([0.0], [0.0]))
        x = np.array([0.6, 2.0])
        out = lrsf_filter(x, [5.0], cert, nominal, np.zeros((1, 1)), U41)
        assert out.constraint_margin == cert.lift.evaluate(pendulum.step(x, np.array([5.0]), np.zeros(1)))


class TestContinuousBarriers:
    def test_examples(self):
        assert h_heu(0.0, 0.0) == 1.0
        assert h_ana(math.pi / 3, 0.0) == pytest.approx(0.0, abs=1e-15)
        assert ANALYTIC_OMEGA_COEF == math.sqrt(3) / (2 * (19 - 10 * math.sqrt(3)))
        assert ANALYTIC_OMEGA_COEF == pytest.approx(0.51565, abs=1e-5)

    @given(st.floats(-1.5, 1.5), st.floats(-6, 6))
    def test_gradients_match_finite_differences(self, th, w):
        for kind in ("analytic", "heuristic"):
            b = ContinuousBarrier(kind)
            gt, gw = b.gradient(th, w)
            h = 1e-6
            ft = (b.evaluate(th + h, w) - b.evaluate(th - h, w)) / (2 * h)
            fw = (b.evaluate(th, w + h) - b.evaluate(th, w - h)) / (2 * h)
            assert gt == pytest.approx(ft, rel=1e-6, abs=1e-8)
            assert gw == pytest.approx(fw, rel=1e-6, abs=1e-8)

    @given(st.floats(-1.2, 1.2), st.floats(-6, 6), st.floats(-20, 20))
    def test_worst_hdot_matches_enumeration(self, th, w, u):
        for kind in ("analytic", "heuristic"):
            b = ContinuousBarrier(kind)
            a, c = worst_hdot_terms((th, w), b)
            gt, gw = b.gradient(th, w)
            hdots = []
            for F in np.linspace(-2, 2, 401):
                dth, dw = pendulum_derivative(th, w, u, F)
                hdots.append(gt * dth + gw * dw)
            assert a * u + c == pytest.approx(min(hdots), abs=1e-9)

    def test_origin_is_slack(self):
        for kind in ("analytic", "heuristic"):
            out = ct_cbf_filter(np.zeros(2), [0.0], ContinuousBarrier(kind))
            assert out.u_exec[0] == 0.0 and out.feasible and not out.intervened

    @given(st.floats(-1.2, 1.2), st.floats(-6, 6), st.floats(-25, 25))
    def test_projection_matches_enumeration(self, th, w, ut):
        b = ContinuousBarrier("heuristic", alpha_rate=1.0)
        out = ct_cbf_filter(np.array([th, w]), [ut], b)
        a, c = worst_hdot_terms((th, w), b)
        c += b.class_k(b.evaluate(th, w))
        U = np.linspace(-20, 20, 40001)
        ok = a * U + c >= -1e-12
        if out.feasible:
            assert a * out.u_exec[0] + c >= -1e-9
            target = np.clip(ut, -20, 20)
            assert abs(out.u_exec[0] - target) <= np.abs(U[ok] - target).min() + 1e-9
        else:
            assert not ok.any()

    def test_zero_coefficient_violated(self):
        out = ct_cbf_filter(np.array([1.2, 0.0]), [3.0], ContinuousBarrier("analytic"))
        assert not out.feasible and out.u_exec[0] == 3.0

    def test_analytic_barrier_valid_on_grid(self):
        grid = Grid((-1.2, -7.0), (1.2, 7.0), (161, 161))
        b = ContinuousBarrier("analytic")
        violations = 0
        for x in grid.nodes():
            h = b(x)
            if h < 0:
                continue
            a, c = worst_hdot_terms(x, b)
            best = max(a * u + c for u in (-20.0, 20.0))
            violations += best < -b.class_k(h)
        assert violations == 0

    def test_analytic_set_inside_value_set(self, canonical, interp_error):
        V = canonical["V"]
        h = ContinuousBarrier("analytic")(V.grid.nodes())
        assert np.all(V.values[h >= 0] >= -interp_error["max"])

    def test_estimator(self):
        f = CTCBFFilter("heuristic", alpha_rate=5.0).fit()
        assert f.barrier_.alpha_rate == 5.0 and f.config_ == PendulumConfig()
        pred = f.predict(np.zeros((2, 2)), [[0.0], [1.0]])
        assert pred[:, 0].tolist() == [0.0, 1.0]
        assert clone(f).get_params() == f.get_params()


class TestTaskController:
    def test_examples(self):
        assert pd_task_controller(np.zeros(2))[0] == 0.0
        assert pd_task_controller(np.array([0.5, 0.0]))[0] == -16.0
        assert pd_task_controller(np.array([1.0, 1.0]))[0] == -20.0

    def test_estimator(self):
        pd = PDController(kp=10.0, kd=1.0)
        assert pd.predict([[0.1, 0.2]]).tolist() == [pytest.approx(-1.2)]

    def test_no_filter_passes(self):
        out = NoFilter()(np.zeros(2), [7.0])
        assert out.u_exec[0] == 7.0 and not out.intervened


class TestEstimators:
    def test_qcbf_estimator_matches_function(self, cert, pendulum):
        est = QCBFSafetyFilter().fit(cert, pendulum)
        X = safe_samples(cert, 5, 9)
        U = np.full((5, 1), 5.0)
        direct = [qcbf_filter(x, u, cert, pendulum, BETA, U41, D21).u_exec[0] for x, u in zip(X, U)]
        np.testing.assert_array_equal(est.predict(X, U)[:, 0], direct)
        assert clone(est).get_params()["beta_gamma"] == 0.9

    def test_lrsf_estimator(self, cert, pendulum):
        est = LeastRestrictiveFilter().fit(cert, pendulum)
        assert est(np.zeros(2), [1.0]).u_exec[0] == 1.0
        assert np.array_equal(est.u_disc_, discretize_box(pendulum.control_box, 41))
