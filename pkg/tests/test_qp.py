import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import enumerate_qp, grid_qp_box, random_qp_instance, random_spd
from reactive_control.qp import (
    INFEASIBLE,
    MAX_ITER,
    OPTIMAL,
    ActiveSetSolver,
    QpError,
    QpProblem,
    dump_problem,
    kkt_residual,
    load_problem,
    solve,
)


class TestExamples:
    def test_equality_pins_solution(self):
        s = solve(QpProblem([[1.0]], [0.0], A_eq=[[1.0]], b_eq=[1.0]))
        assert s.status == OPTIMAL
        assert s.x[0] == pytest.approx(1.0, abs=1e-12)

    def test_half_plane(self):
        s = solve(QpProblem(np.eye(2), np.zeros(2), A_in=[[-1.0, -1.0]], b_in=[-2.0]))
        assert s.status == OPTIMAL
        assert np.allclose(s.x, [1.0, 1.0], atol=1e-12)
        assert s.kkt_residual < 1e-8

    def test_empty_feasible_set(self):
        s = solve(QpProblem([[1.0]], [0.0], A_in=[[-1.0], [1.0]], b_in=[-1.0, 0.0]))
        assert s.status == INFEASIBLE

    def test_inconsistent_equalities(self):
        s = solve(QpProblem(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0], [2.0, 2.0]], b_eq=[1.0, 3.0]))
        assert s.status == INFEASIBLE

    def test_redundant_equalities(self):
        s = solve(QpProblem(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0], [2.0, 2.0]], b_eq=[1.0, 2.0]))
        assert s.status == OPTIMAL
        assert np.allclose(s.x, [0.5, 0.5], atol=1e-12)

    def test_fixed_bounds(self):
        s = solve(QpProblem(np.eye(2), [-1.0, -1.0], lb=[0.25, -1.0], ub=[0.25, 1.0]))
        assert s.status == OPTIMAL
        assert np.allclose(s.x, [0.25, 1.0], atol=1e-12)

    def test_iteration_cap(self):
        H = np.eye(4)
        s = solve(QpProblem(H, -10 * np.ones(4), lb=-np.ones(4), ub=np.ones(4)), max_iter=1)
        assert s.status == MAX_ITER
        assert np.all(np.isfinite(s.x))

    @pytest.mark.parametrize(
        "kwargs, match",
        [
            (dict(H=[[1.0, 0.5], [0.0, 1.0]], g=[0, 0]), "symmetric"),
            (dict(H=[[1.0, 0.0], [0.0, -1.0]], g=[0, 0]), "positive definite"),
            (dict(H=np.eye(2), g=[0, 0], lb=[1, 0], ub=[0, 0]), "lower bound"),
            (dict(H=np.eye(2), g=[0, 0, 0]), "one entry"),
            (dict(H=np.eye(2), g=[np.nan, 0]), "non-finite"),
        ],
    )
    def test_malformed_problems(self, kwargs, match):
        with pytest.raises(QpError, match=match):
            solve(QpProblem(**kwargs))


class TestOracles:
    @pytest.mark.parametrize("seed", range(40))
    def test_box_only_matches_grid(self, seed):
        rng = np.random.default_rng(seed)
        n = 1 + seed % 2
        H = random_spd(rng, n, cond=10.0)
        g = rng.normal(size=n)
        lb = -rng.uniform(0.2, 1.0, n)
        ub = rng.uniform(0.2, 1.0, n)
        s = solve(QpProblem(H, g, lb=lb, ub=ub))
        x_grid, _ = grid_qp_box(H, g, lb, ub, step=1e-3)
        assert s.status == OPTIMAL
        assert np.max(np.abs(s.x - x_grid)) < 5e-3

    @pytest.mark.parametrize("seed", range(10))
    def test_box_only_matches_enumeration_up_to_six(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = 3 + seed % 4
        H = random_spd(rng, n)
        g = 3 * rng.normal(size=n)
        lb, ub = -np.ones(n), np.ones(n)
        s = solve(QpProblem(H, g, lb=lb, ub=ub))
        x_ref, _ = enumerate_qp(H, g, lb=lb, ub=ub)
        assert np.max(np.abs(s.x - x_ref)) < 1e-8

    def test_random_instances_match_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            inst = random_qp_instance(rng)
            s = solve(QpProblem(**inst))
            x_ref, _ = enumerate_qp(**inst)
            if x_ref is None:
                assert s.status == INFEASIBLE
            else:
                assert s.status == OPTIMAL
                assert np.max(np.abs(s.x - x_ref)) < 5e-3
                assert s.kkt_residual < 1e-8


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_kkt_certificate(self, seed):
        p = QpProblem(**random_qp_instance(np.random.default_rng(seed)))
        s = solve(p)
        if s.status != OPTIMAL:
            return
        G, h = p.inequality_rows()
        finite = np.isfinite(h)
        assert kkt_residual(p, s.x, s.eq_multipliers, s.in_multipliers) < 1e-8
        assert np.all(s.in_multipliers >= -1e-8)
        assert np.all(np.abs(s.in_multipliers[finite] * (G[finite] @ s.x - h[finite])) < 1e-8)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_objective_never_increases(self, seed):
        s = solve(QpProblem(**random_qp_instance(np.random.default_rng(seed))))
        if s.status == OPTIMAL:
            assert np.all(np.diff(s.objective_trace) <= 1e-10 * (1 + np.abs(s.objective_trace[:-1])))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_tightening_never_lowers_objective(self, seed, shrink):
        rng = np.random.default_rng(seed)
        inst = random_qp_instance(rng)
        if len(inst["b_in"]) == 0:
            inst["A_in"] = rng.normal(size=(1, len(inst["g"])))
            inst["b_in"] = np.array([0.5])
        loose = solve(QpProblem(**inst))
        tight_inst = dict(inst, b_in=inst["b_in"] - shrink)
        tight = solve(QpProblem(**tight_inst))
        if tight.status == OPTIMAL:
            assert loose.status == OPTIMAL
            assert tight.objective >= loose.objective - 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_deterministic(self, seed):
        inst = random_qp_instance(np.random.default_rng(seed))
        a = solve(QpProblem(**inst))
        b = solve(QpProblem(**inst))
        assert a.status == b.status
        assert np.array_equal(a.x, b.x)


class TestWarmStartAndDump:
    def test_warm_start_reaches_same_optimum(self):
        rng = np.random.default_rng(5)
        solver = ActiveSetSolver()
        inst = random_qp_instance(rng)
        while solve(QpProblem(**inst)).status != OPTIMAL or not solve(QpProblem(**inst)).active_set:
            inst = random_qp_instance(rng)
        cold = solver.solve(QpProblem(**inst))
        warm = solver.solve(QpProblem(**inst))
        assert warm.status == OPTIMAL
        assert np.allclose(warm.x, cold.x, atol=1e-10)
        assert warm.iterations <= cold.iterations

    def test_bogus_warm_start_is_harmless(self):
        p = QpProblem(np.eye(2), np.zeros(2), A_in=[[-1.0, -1.0]], b_in=[-2.0], lb=[-5, -5], ub=[5, 5])
        s = solve(p, warm_start=[1, 2, 3, 4, 99])
        assert s.status == OPTIMAL
        assert np.allclose(s.x, [1.0, 1.0], atol=1e-12)

    def test_dump_round_trip(self, tmp_path):
        inst = random_qp_instance(np.random.default_rng(9))
        inst["ub"][0] = np.inf
        p = QpProblem(**inst)
        text = dump_problem(p, tmp_path / "p.txt")
        assert (tmp_path / "p.txt").read_text() == text
        q = load_problem(text)
        for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in", "lb", "ub"):
            assert np.array_equal(getattr(p, name), getattr(q, name))
