import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from conftest import THETA_F, braking_margin
from qcbf.core import Box, ClassKMap, ConfigurationError, Grid, ScalarField
from qcbf.dynamics import FrozenSystem, with_dstb_box
from qcbf.filters import ContinuousBarrier, LeastRestrictiveFilter, NoFilter, QCBFSafetyFilter, ZeroController, pd_task_controller
from qcbf.harness import (
    DEFAULT_BAND,
    ConstantDisturbance,
    RandomDisturbance,
    boundary_experiment,
    compute_set_metrics,
    deviation_stats,
    frozen_best_response,
    rollout,
    sample_boundary_states,
)

D21 = np.linspace(-2, 2, 21)[:, None]
GRID = Grid((-1.0, -1.0), (1.0, 1.0), (11, 11))


def const(v):
    return ScalarField(GRID, np.full(GRID.size, v))


class TestSampling:
    def test_empty_band(self):
        with pytest.raises(ConfigurationError, match="band"):
            sample_boundary_states(const(0.5), 5, 0.1, 0)

    def test_constant_in_band_is_uniform(self):
        X = sample_boundary_states(const(0.05), 2000, 0.1, 0)
        assert X.shape == (2000, 2)
        assert np.all(np.abs(X) <= 1.0)
        assert kstest((X[:, 0] + 1) / 2, "uniform").pvalue > 1e-3

    def test_pendulum_band(self, cert):
        X = sample_boundary_states(cert, 20, DEFAULT_BAND, 0)
        v = cert.evaluate(X)
        assert len(X) == 20 and np.all((v >= 0) & (v <= DEFAULT_BAND))

    def test_deterministic(self, cert):
        a = sample_boundary_states(cert, 10, DEFAULT_BAND, 7)
        b = sample_boundary_states(cert, 10, DEFAULT_BAND, 7)
        assert a.tobytes() == b.tobytes()

    def test_rejects_nonpositive_band(self):
        with pytest.raises(ConfigurationError):
            sample_boundary_states(const(0.0), 1, 0.0, 0)


class TestBestResponse:
    def test_degenerate_box(self, cert, pendulum):
        nominal = with_dstb_box(pendulum, Box([0.0], [0.0]))
        br = frozen_best_response(cert, nominal, NoFilter(), pd_task_controller, np.zeros((1, 1)))
        assert br(np.array([0.3, 0.2]))[0] == 0.0

    def test_frozen_smallest(self):
        fs = FrozenSystem(lambda x: 1.0 - np.abs(x[..., 0]))
        V = ScalarField.from_function(GRID, fs.margin)
        br = frozen_best_response(V, fs, NoFilter(), ZeroController(), [[0.5], [-1.0], [0.0]])
        assert br(np.array([0.2, 0.0]))[0] == -1.0

    def test_pd_unfiltered_pushes_toward_boundary(self, cert, pendulum):
        br = frozen_best_response(cert, pendulum, NoFilter(), pd_task_controller, D21)
        x = np.array([0.5, 1.0])
        d = br(x)
        vals = [cert.lift.evaluate(pendulum.step(x, pd_task_controller(x), np.array([F]))) for F in D21[:, 0]]
        assert d[0] == 2.0 and D21[int(np.argmin(vals)), 0] == 2.0

    @settings(max_examples=30)
    @given(st.floats(-1.2, 1.2), st.floats(-7, 7))
    def test_within_box(self, cert, pendulum, th, w):
        d = frozen_best_response(cert, pendulum, NoFilter(), pd_task_controller, D21)(np.array([th, w]))
        assert pendulum.dstb_box.contains(d)


class TestRollout:
    def test_equilibrium(self, pendulum):
        t = rollout(pendulum, NoFilter(), ZeroController(), ConstantDisturbance(0.0), np.zeros(2), 300)
        assert t.safe and t.steps == 300 and np.all(t.margins == THETA_F)

    def test_starts_in_failure(self, pendulum):
        t = rollout(pendulum, NoFilter(), ZeroController(), ConstantDisturbance(0.0), np.array([1.2, 0.0]), 10)
        assert not t.safe and t.steps == 0 and t.min_margin < 0

    def test_stops_at_failure(self, pendulum):
        t = rollout(pendulum, NoFilter(), ZeroController(), ConstantDisturbance(2.0), np.array([0.9, 1.0]), 500)
        assert not t.safe and t.margins[-1] < 0 and np.all(t.margins[:-1] >= 0)
        assert len(t.states) == t.steps + 1 == len(t.margins)

    def test_safe_flag_rechecked(self, pendulum, cert):
        filt = QCBFSafetyFilter().fit(cert, pendulum)
        t = rollout(pendulum, filt, pd_task_controller, RandomDisturbance(pendulum.dstb_box, 0),
                    np.array([0.3, -1.0]), 200, value=cert)
        recomputed = np.abs(t.states[:, 0]) <= math.pi / 3
        assert t.safe == bool(recomputed.all())
        assert len(t.u_task) == len(t.u_exec) == len(t.d_applied) == t.steps
        assert t.values.shape == (t.steps + 1,)

    def test_deterministic(self, pendulum, cert):
        filt = QCBFSafetyFilter().fit(cert, pendulum)
        runs = [rollout(pendulum, filt, pd_task_controller, RandomDisturbance(pendulum.dstb_box, 3),
                        np.array([0.5, 0.5]), 100) for _ in range(2)]
        assert runs[0].states.tobytes() == runs[1].states.tobytes()

    def test_csv(self, pendulum, tmp_path):
        t = rollout(pendulum, NoFilter(), ZeroController(), ConstantDisturbance(0.0), np.zeros(2), 5)
        t.write_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["t", "theta", "omega", "u_task", "u_exec", "F", "margin", "V"]
        assert len(rows) == 7

    def test_qcbf_boundary_failures_are_certificate_errors(self, pendulum, cert, interp_error):
        """A failing Q-CBF rollout must visit a state the grid calls safe but no controller can save."""
        filt = QCBFSafetyFilter().fit(cert, pendulum)
        trajs = boundary_experiment(pendulum, cert, filt, pd_task_controller, cert, D21, n=20, seed=0)
        for t in trajs:
            if t.safe:
                assert np.all(t.values >= -interp_error["max"])
                continue
            oracle = braking_margin(pendulum, t.states)
            assert np.any((t.values >= 0) & (oracle < 0))


class TestSetMetrics:
    def test_identical(self):
        f = ScalarField.from_function(GRID, lambda x: 0.5 - np.abs(x[:, 0]))
        m = compute_set_metrics({"a": f, "b": f}, GRID)
        assert m.containment_violations[("a", "b")] == 0 == m.containment_violations[("b", "a")]
        assert m.area_ratios[("a", "b")] == 1.0

    def test_pendulum(self, canonical, interp_error):
        V = canonical["V"]
        m = compute_set_metrics({"V": V, "h_ana": ContinuousBarrier("analytic")}, V.grid,
                                eps={"V": interp_error["max"]})
        assert m.containment_violations[("h_ana", "V")] == 0
        assert m.area_ratios[("V", "h_ana")] > 1
        assert all(a >= 0 for a in m.areas.values())
        assert m.node_counts["V"] == int((V.values >= 0).sum())


class TestDeviation:
    def test_unfiltered(self, pendulum):
        t = rollout(pendulum, NoFilter(), pd_task_controller, ConstantDisturbance(0.0), np.array([0.1, 0.0]), 50)
        s = deviation_stats([t])
        assert s["counts"][0] == 50 and sum(s["counts"]) == 50 and s["max"] == 0.0

    def test_single_step(self, pendulum):
        from qcbf.filters import FilterOutput

        def flip(x, u):
            return FilterOutput(-np.asarray(u, dtype=float), True, 0.0, True, u_task=np.asarray(u, dtype=float))

        t = rollout(pendulum, flip, lambda x: np.array([1.0]), ConstantDisturbance(0.0), np.zeros(2), 1)
        s = deviation_stats([t])
        assert s["n"] == 1 and s["max"] == 4.0 and sum(s["counts"]) == 1
        assert len(s["counts"]) == 64 and s["edges"][-1] == 1600.0

    def test_qcbf_deviates_less_than_lrsf(self, pendulum, cert):
        """A task input that drives the pendulum over forces both filters to act."""
        push = lambda x: np.array([15.0])  # noqa: E731
        qcbf = QCBFSafetyFilter().fit(cert, pendulum)
        lrsf = LeastRestrictiveFilter().fit(cert, pendulum)
        kw = dict(n=10, seed=1, horizon=200, band=0.5)
        a = boundary_experiment(pendulum, cert, qcbf, push, cert, D21, **kw)
        b = boundary_experiment(pendulum, cert, lrsf, push, cert, D21, **kw)
        sa, sb = deviation_stats(a), deviation_stats(b)
        print(f"mean squared deviation: qcbf {sa['mean']:.4g}, lrsf {sb['mean']:.4g}")
        assert sum(t.interventions for t in a) > 0 and sum(t.interventions for t in b) > 0
        assert sa["mean"] <= sb["mean"]

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            deviation_stats([])
