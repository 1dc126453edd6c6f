"""Dense primal active-set solver for small strictly convex QPs.

    minimize    1/2 x^T H x + g^T x
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                lb <= x <= ub

Inequality rows are numbered ``[A_in rows | upper bounds | lower bounds]``,
i.e. row ``m_in + i`` is ``x_i <= ub_i`` and row ``m_in + n + i`` is
``-x_i <= -lb_i``. Active sets and warm starts use that numbering. Bounds with
``lb_i == ub_i`` are treated as equalities.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


class QpError(ValueError):
    """Malformed problem data (an assembly bug, not a runtime condition)."""


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        self.A_eq = np.zeros((0, n)) if self.A_eq is None else np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.A_in = np.zeros((0, n)) if self.A_in is None else np.asarray(self.A_in, dtype=float).reshape(-1, n)
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float).reshape(-1)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(-1)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(-1)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def validate(self) -> None:
        n = self.n
        if self.H.shape != (n, n):
            raise QpError(f"H must be square, got {self.H.shape}")
        if self.g.shape != (n,) or self.lb.shape != (n,) or self.ub.shape != (n,):
            raise QpError("g, lb and ub must have one entry per variable")
        if self.A_eq.shape[0] != self.b_eq.shape[0] or self.A_in.shape[0] != self.b_in.shape[0]:
            raise QpError("constraint matrices and right-hand sides disagree in row count")
        if not np.allclose(self.H, self.H.T, atol=1e-10, rtol=0.0):
            raise QpError("H is not symmetric")
        try:
            np.linalg.cholesky(self.H)
        except np.linalg.LinAlgError:
            raise QpError("H is not positive definite") from None
        if np.any(self.lb > self.ub):
            raise QpError("lower bound above upper bound")
        for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise QpError(f"{name} contains non-finite values")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise QpError("bounds contain NaN")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def inequality_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack ``[A_in; I; -I]`` with right-hand sides ``[b_in; ub; -lb]``."""
        n = self.n
        G = np.vstack([self.A_in, np.eye(n), -np.eye(n)])
        h = np.concatenate([self.b_in, self.ub, -self.lb])
        return G, h


@dataclass
class QpSolution:
    x: np.ndarray
    status: str
    kkt_residual: float
    active_set: tuple[int, ...] = ()
    iterations: int = 0
    objective: float = np.nan
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    in_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective_trace: list[float] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _independent_rows(C: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Indices of a maximal linearly independent subset of rows (pivoted QR)."""
    if C.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = scipy.linalg.qr(C.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > tol * max(1.0, diag[0])))
    return np.sort(piv[:rank])


def kkt_residual(p: QpProblem, x: np.ndarray, nu: np.ndarray, mu: np.ndarray) -> float:
    """Max of stationarity, primal feasibility, dual feasibility and complementarity."""
    G, h = p.inequality_rows()
    finite = np.isfinite(h)
    slack = np.where(finite, G @ x - np.where(finite, h, 0.0), -np.inf)
    mu_full = np.where(finite, mu, 0.0)
    stat = p.H @ x + p.g + p.A_eq.T @ nu + G[finite].T @ mu_full[finite]
    res = [np.max(np.abs(stat), initial=0.0)]
    res.append(np.max(np.abs(p.A_eq @ x - p.b_eq), initial=0.0))
    res.append(max(0.0, np.max(slack, initial=-np.inf)))
    res.append(max(0.0, -np.min(mu_full, initial=0.0)))
    comp = mu_full[finite] * slack[finite]
    res.append(np.max(np.abs(comp), initial=0.0))
    return float(max(res))


class ActiveSetSolver:
    """Reusable solver; remembers the last optimal active set for warm starts."""

    def __init__(self, tol: float = 1e-8, max_iter: int = 200):
        self.tol = tol
        self.max_iter = max_iter
        self.last_active: tuple[int, ...] = ()

    def solve(self, p: QpProblem, warm_start: Sequence[int] | None = None) -> QpSolution:
        p.validate()
        sol = _Run(p, self.tol, self.max_iter).solve(self.last_active if warm_start is None else warm_start)
        if sol.optimal:
            self.last_active = sol.active_set
        return sol


class _Run:
    def __init__(self, p: QpProblem, tol: float, max_iter: int):
        self.p = p
        self.tol = tol
        self.max_iter = max_iter
        n = p.n
        fixed = np.isfinite(p.lb) & (p.lb == p.ub)
        E_fix = np.eye(n)[fixed]
        self.E = np.vstack([p.A_eq, E_fix])
        self.e = np.concatenate([p.b_eq, p.lb[fixed]])
        self.n_eq_orig = p.A_eq.shape[0]
        G, h = p.inequality_rows()
        usable = np.isfinite(h)
        m_in = p.A_in.shape[0]
        usable[m_in : m_in + n] &= ~fixed
        usable[m_in + n :] &= ~fixed
        self.G, self.h, self.usable = G, h, usable

    # -- linear algebra ---------------------------------------------------

    def _eqp(self, E: np.ndarray, e: np.ndarray, W: list[int]):
        """Minimizer with E and the working rows held as equalities.

        Returns (x, y) with y the multipliers of ``[E; G_W]``, or None when the
        KKT matrix is singular.
        """
        p = self.p
        C = np.vstack([E, self.G[W]]) if W else E
        d = np.concatenate([e, self.h[W]]) if W else e
        m = C.shape[0]
        K = np.zeros((p.n + m, p.n + m))
        K[: p.n, : p.n] = p.H
        K[: p.n, p.n :] = C.T
        K[p.n :, : p.n] = C
        rhs = np.concatenate([-p.g, d])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                lu = scipy.linalg.lu_factor(K, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * max(1.0, np.max(np.abs(K))):
            return None
        sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        # one round of iterative refinement keeps the KKT residual near round-off
        sol += scipy.linalg.lu_solve(lu, rhs - K @ sol, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        return sol[: p.n], sol[p.n :]

    def _feasible(self, x: np.ndarray, tol: float) -> bool:
        u = self.usable
        if np.any(self.G[u] @ x - self.h[u] > tol):
            return False
        return bool(np.all(np.abs(self.E @ x - self.e) <= tol))

    def _independent_working(self, E: np.ndarray, cand: Sequence[int]) -> list[int]:
        W: list[int] = []
        base = E
        for i in cand:
            trial = np.vstack([base, self.G[i]])
            if len(_independent_rows(trial)) == trial.shape[0]:
                W.append(int(i))
                base = trial
        return W

    # -- phases -----------------------------------------------------------

    def _phase_one(self, E: np.ndarray, e: np.ndarray):
        """Find a feasible point with an LP; None when the constraints are inconsistent."""
        u = self.usable
        res = linprog(
            c=np.zeros(self.p.n),
            A_ub=self.G[u] if u.any() else None,
            b_ub=self.h[u] if u.any() else None,
            A_eq=E if E.shape[0] else None,
            b_eq=e if E.shape[0] else None,
            bounds=[(None, None)] * self.p.n,
            method="highs",
        )
        if res.status == 2:
            return None
        if res.status != 0 or res.x is None:
            return None
        return np.asarray(res.x, dtype=float)

    def _start(self, E, e, warm: Sequence[int]):
        tol = self.tol
        warm = [int(i) for i in warm if 0 <= int(i) < len(self.h) and self.usable[int(i)]]
        if warm:
            W = self._independent_working(E, warm)
            r = self._eqp(E, e, W)
            if r is not None and self._feasible(r[0], tol):
                return r[0], W
        r = self._eqp(E, e, [])
        if r is not None and self._feasible(r[0], tol):
            return r[0], []
        x0 = self._phase_one(E, e)
        if x0 is None:
            return None
        act_tol = max(tol, 1e-9)
        near = [i for i in np.flatnonzero(self.usable) if self.G[i] @ x0 >= self.h[i] - act_tol]
        W = self._independent_working(E, near)
        # snap onto the working constraints so later steps keep them exact
        C = np.vstack([E, self.G[W]]) if W else E
        d = np.concatenate([e, self.h[W]]) if W else e
        if C.shape[0]:
            x0 = x0 - np.linalg.lstsq(C, C @ x0 - d, rcond=None)[0]
        return x0, W

    def solve(self, warm: Sequence[int]) -> QpSolution:
        p, tol = self.p, self.tol
        n = p.n
        keep = _independent_rows(self.E)
        E, e = self.E[keep], self.e[keep]
        if len(keep) < self.E.shape[0]:
            # dependent equality rows must be consistent with the kept ones
            y = np.linalg.lstsq(E.T, self.E.T, rcond=None)[0] if len(keep) else np.zeros((0, self.E.shape[0]))
            if np.max(np.abs(y.T @ e - self.e), initial=0.0) > tol:
                return self._infeasible()
        start = self._start(E, e, warm)
        if start is None:
            return self._infeasible()
        x, W = start
        trace = [p.objective(x)]
        it = 0
        status = MAX_ITER
        y = np.zeros(E.shape[0] + len(W))
        while it < self.max_iter:
            it += 1
            r = self._eqp(E, e, W)
            if r is None:
                # numerically dependent working set: release the newest row
                W.pop()
                continue
            x_hat, y = r
            step = x_hat - x
            if np.max(np.abs(step)) <= 1e-12 * max(1.0, np.max(np.abs(x))):
                mu_w = y[E.shape[0] :]
                if len(W) == 0 or np.min(mu_w) >= -tol:
                    x = x_hat
                    status = OPTIMAL
                    break
                k = int(np.argmin(mu_w))
                W.pop(k)
                continue
            Gs = self.G @ step
            alpha, block = 1.0, None
            for i in np.flatnonzero(self.usable):
                if i in W or Gs[i] <= 1e-14 * max(1.0, np.max(np.abs(step))):
                    continue
                a_i = max(0.0, (self.h[i] - self.G[i] @ x) / Gs[i])
                if a_i < alpha:
                    alpha, block = a_i, int(i)
            x = x + alpha * step
            trace.append(p.objective(x))
            if block is not None:
                W.append(block)
        nu_full = np.zeros(self.E.shape[0])
        nu_full[keep] = y[: E.shape[0]] if status == OPTIMAL else 0.0
        mu = np.zeros(len(self.h))
        if status == OPTIMAL:
            mu[W] = y[E.shape[0] :]
        nu = nu_full[: self.n_eq_orig]
        # fixed-bound equalities report their multiplier on the matching bound row
        fixed_idx = np.flatnonzero(np.isfinite(p.lb) & (p.lb == p.ub))
        m_in = p.A_in.shape[0]
        for k, i in enumerate(fixed_idx):
            lam = nu_full[self.n_eq_orig + k]
            if lam >= 0:
                mu[m_in + i] = lam
            else:
                mu[m_in + n + i] = -lam
        res = kkt_residual(p, x, nu, mu) if status == OPTIMAL else np.inf
        if status == OPTIMAL and res >= tol:
            log.debug("KKT certification failed: residual %.3e", res)
            status = MAX_ITER
        return QpSolution(
            x=x,
            status=status,
            kkt_residual=float(res),
            active_set=tuple(sorted(W)),
            iterations=it,
            objective=p.objective(x),
            eq_multipliers=nu,
            in_multipliers=mu,
            objective_trace=trace,
        )

    def _infeasible(self) -> QpSolution:
        return QpSolution(x=np.zeros(self.p.n), status=INFEASIBLE, kkt_residual=np.inf)


def solve(p: QpProblem, tol: float = 1e-8, max_iter: int = 200, warm_start: Sequence[int] | None = None) -> QpSolution:
    """Solve ``p``; infeasible constraint sets are reported, never raised."""
    return ActiveSetSolver(tol, max_iter).solve(p, warm_start=warm_start or ())


# ---------------------------------------------------------------------------
# text dump
# ---------------------------------------------------------------------------


def _write_block(lines: list[str], name: str, M: np.ndarray) -> None:
    M = np.atleast_2d(M) if M.ndim == 2 else M.reshape(1, -1)
    lines.append(f"{name} {M.shape[0]} {M.shape[1]}")
    for row in M:
        lines.append(" ".join(repr(float(v)) for v in row))


def dump_problem(p: QpProblem, path: str | Path | None = None) -> str:
    """Row-major text dump, one ``name rows cols`` header per block."""
    lines = ["# qp-dump v1", f"n {p.n}"]
    _write_block(lines, "H", p.H)
    _write_block(lines, "g", p.g.reshape(1, -1))
    _write_block(lines, "A_eq", p.A_eq)
    _write_block(lines, "b_eq", p.b_eq.reshape(1, -1))
    _write_block(lines, "A_in", p.A_in)
    _write_block(lines, "b_in", p.b_in.reshape(1, -1))
    _write_block(lines, "lb", p.lb.reshape(1, -1))
    _write_block(lines, "ub", p.ub.reshape(1, -1))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_problem(text: str) -> QpProblem:
    rows = [ln for ln in text.splitlines() if not ln.startswith("#")]
    n = int(rows[0].split()[1])
    blocks: dict[str, np.ndarray] = {}
    i = 1
    while i < len(rows):
        name, r, c = rows[i].split()
        r, c = int(r), int(c)
        data = [[float(v) for v in rows[i + 1 + k].split()] for k in range(r)]
        blocks[name] = np.array(data, dtype=float).reshape(r, c)
        i += 1 + r
    return QpProblem(
        H=blocks["H"],
        g=blocks["g"].reshape(-1),
        A_eq=blocks["A_eq"].reshape(-1, n),
        b_eq=blocks["b_eq"].reshape(-1),
        A_in=blocks["A_in"].reshape(-1, n),
        b_in=blocks["b_in"].reshape(-1),
        lb=blocks["lb"].reshape(-1),
        ub=blocks["ub"].reshape(-1),
    )
