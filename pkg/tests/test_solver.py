import cvxpy as cp
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmarket.solver import (
    ConvexProgram,
    InfeasibleError,
    ProgramBuilder,
    Status,
    check_slater,
    dump_program,
    kkt_residuals,
    solve,
)


def qp(P, q, A=None, b=None, G=None, h=None, soc=()):
    n = len(q)
    A = sp.csr_matrix((0, n)) if A is None else sp.csr_matrix(A)
    G = sp.csr_matrix((0, n)) if G is None else sp.csr_matrix(G)
    return ConvexProgram(
        P=sp.csc_matrix(P), q=np.asarray(q, float), A=A,
        b=np.zeros(0) if b is None else np.asarray(b, float),
        G=G, h=np.zeros(0) if h is None else np.asarray(h, float), soc_dims=tuple(soc),
    )


def test_single_equality():
    # min x^2 s.t. x = 1: stationarity 2x + y = 0 gives y = -2
    sol = solve(qp([[2.0]], [0.0], A=[[1.0]], b=[1.0]))
    assert sol.optimal
    assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
    assert sol.y[0] == pytest.approx(-2.0, abs=1e-8)


def test_equality_qp_duals_match_closed_form():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, m = int(rng.integers(3, 21)), int(rng.integers(1, 4))
        M = rng.standard_normal((n, n))
        P = M @ M.T + np.eye(n)
        q = rng.standard_normal(n)
        A = rng.standard_normal((m, n))
        b = rng.standard_normal(m)
        K = np.block([[P, A.T], [A, np.zeros((m, m))]])
        ref = np.linalg.solve(K, np.concatenate([-q, b]))
        sol = solve(qp(P, q, A=A, b=b))
        assert sol.optimal
        worst = max(worst, np.abs(sol.x - ref[:n]).max(), np.abs(sol.y - ref[n:]).max())
    assert worst <= 1e-8


def test_infeasible_box_is_classified():
    # x <= -1 and x >= 0
    sol = solve(qp([[0.0]], [1.0], G=[[1.0], [-1.0]], h=[-1.0, 0.0]))
    assert sol.status is Status.INFEASIBLE
    with pytest.raises(InfeasibleError):
        sol.raise_for_status()


def test_slater_margin():
    box = qp([[0.0]], [0.0], G=[[1.0], [-1.0]], h=[1.0, 1.0])
    rep = check_slater(box)
    assert rep.holds and rep.margin == pytest.approx(1.0, abs=1e-6)
    pinned = qp([[0.0]], [0.0], G=[[1.0], [-1.0]], h=[0.0, 0.0])
    rep = check_slater(pinned)
    assert not rep.holds and abs(rep.margin) <= 1e-6


def _random_ineq_qp(rng, n=20, m=10):
    M = rng.standard_normal((n, n))
    P = M @ M.T / n
    q = rng.standard_normal(n)
    A = rng.standard_normal((m // 2, n))
    x_feas = rng.standard_normal(n)
    b = A @ x_feas
    G = np.vstack([rng.standard_normal((m, n)), np.eye(n), -np.eye(n)])
    h = np.concatenate([G[:m] @ x_feas + rng.uniform(0.1, 1.0, m), np.full(2 * n, 5.0)])
    return P, q, A, b, G, h


def test_random_qp_against_cvxpy():
    rng = np.random.default_rng(11)
    for _ in range(5):
        P, q, A, b, G, h = _random_ineq_qp(rng)
        sol = solve(qp(P, q, A=A, b=b, G=G, h=h))
        x = cp.Variable(len(q))
        prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(P)) + q @ x), [A @ x == b, G @ x <= h])
        prob.solve(solver=cp.CLARABEL)
        assert sol.optimal
        assert sol.objective == pytest.approx(prob.value, rel=1e-6, abs=1e-6)


def test_complementarity_and_strong_duality():
    rng = np.random.default_rng(3)
    P, q, A, b, G, h = _random_ineq_qp(rng)
    sol = solve(qp(P, q, A=A, b=b, G=G, h=h))
    slack = h - G @ sol.x
    assert np.max(np.abs(sol.z * slack)) <= 1e-6
    assert abs(sol.objective - sol.dual_objective) <= 1e-6 * (1 + abs(sol.objective))
    assert sol.z.min() >= -1e-9
    assert kkt_residuals(sol.program, sol.x, sol.y, sol.z).max() <= 1e-6


def test_second_order_cone():
    # min t s.t. ||x - a|| <= t, sum x = 0 ; optimum at the projection of a
    a = np.array([1.0, 2.0, 3.0])
    b = ProgramBuilder()
    t = b.variables("t", 1)
    x = b.variables("x", 3)
    b.add_linear(t, [1.0])
    b.add_eq("sum", np.zeros(3, int), x, np.ones(3), [0.0])
    b.add_soc("cone", np.arange(4), np.concatenate([t, x]), -np.ones(4), np.concatenate([[0.0], -a]))
    sol = solve(b.build())
    assert sol.optimal
    assert sol.primal("x") == pytest.approx(a - a.mean(), abs=1e-7)
    assert sol.primal("t")[0] == pytest.approx(np.linalg.norm(np.full(3, a.mean())), abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_duals_are_nonnegative(seed):
    rng = np.random.default_rng(seed)
    P, q, A, b, G, h = _random_ineq_qp(rng, n=6, m=4)
    sol = solve(qp(P, q, A=A, b=b, G=G, h=h))
    assert sol.optimal
    assert sol.z.min() >= -1e-9
    assert (h - G @ sol.x).min() >= -1e-7


def test_nonsymmetric_objective_rejected():
    with pytest.raises(ValueError):
        solve(qp([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0]))


def test_dump_program(tmp_path):
    prog = qp([[2.0]], [0.0], A=[[1.0]], b=[1.0])
    dump_program(prog, tmp_path / "prog.txt")
    text = (tmp_path / "prog.txt").read_text().splitlines()
    assert text[1] == "n 1"
    assert "P 1 1 1" in text and "A 1 1 1" in text
