"""Dense two-phase simplex for small feasibility and minimization problems.

The equilibrium cross-check and the contact-region sanity checks only need
linear programs with tens of variables, so a dense tableau with Bland's
pivoting rule (which cannot cycle) is plenty.  Nothing here is tuned for
large or sparse problems on purpose: this module exists to be independent
of the main solver stack, not to be fast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TOL = 1e-9


@dataclass(frozen=True)
class LpResult:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray | None = None
    objective: float | None = None

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _pivot(T: np.ndarray, basis: list[int], row: int, col: int) -> None:
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and abs(T[i, col]) > 0.0:
            T[i] -= T[i, col] * T[row]
    basis[row] = col


def _solve_with_basis(T: np.ndarray, basis: list[int], c: np.ndarray, max_iter: int):
    """Run simplex iterations on tableau T (rows already in basic form).

    Returns "optimal" or "unbounded"; T and basis are updated in place.
    """
    m, ncols = T.shape[0], T.shape[1] - 1
    for _ in range(max_iter):
        cb = c[basis]
        reduced = c - cb @ T[:, :ncols]
        reduced[np.abs(reduced) < _TOL] = 0.0
        entering = -1
        for j in range(ncols):
            if reduced[j] < -_TOL:
                entering = j  # Bland: smallest index wins
                break
        if entering < 0:
            return "optimal"
        ratios = np.full(m, np.inf)
        mask = T[:, entering] > _TOL
        ratios[mask] = T[mask, -1] / T[mask, entering]
        best = np.min(ratios)
        if not np.isfinite(best):
            return "unbounded"
        # Bland tie-break: among minimal ratios, leave the smallest basis index
        candidates = [i for i in range(m) if np.isfinite(ratios[i]) and ratios[i] <= best + _TOL]
        leaving = min(candidates, key=lambda i: basis[i])
        _pivot(T, basis, leaving, entering)
    raise RuntimeError("simplex iteration limit reached")


def solve_standard_form(c, A, b, max_iter: int = 50_000) -> LpResult:
    """Minimize c @ x subject to A x = b, x >= 0.

    Two-phase dense simplex.  Phase one introduces one artificial variable
    per row and minimizes their sum; a positive optimum certifies the
    constraints infeasible.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    if c.shape != (n,) or b.shape != (m,):
        raise ValueError("inconsistent LP dimensions")

    A = A.copy()
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0

    # phase 1 tableau: [A | I | b], basis = artificials
    T = np.hstack([A, np.eye(m), b[:, None]])
    basis = list(range(n, n + m))
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    status = _solve_with_basis(T, basis, c1, max_iter)
    if status != "optimal":  # phase 1 is always bounded below by 0
        raise RuntimeError("phase 1 terminated " + status)
    if T[:, -1] @ c1[basis] > 1e-7:
        return LpResult("infeasible")

    # pivot surviving artificials out; a row with no real pivot is redundant
    keep = []
    for i in range(m):
        if basis[i] < n:
            keep.append(i)
            continue
        pivots = np.nonzero(np.abs(T[i, :n]) > _TOL)[0]
        if len(pivots) == 0:
            continue  # redundant constraint, drop the row
        _pivot(T, basis, i, int(pivots[0]))
        keep.append(i)
    if len(keep) < m:
        T = T[keep]
        basis = [basis[i] for i in keep]
        m = len(keep)

    # phase 2 on the real columns
    T = np.hstack([T[:, :n], T[:, -1:]])
    c2 = c.copy()
    status = _solve_with_basis(T, basis, c2, max_iter)
    if status != "optimal":
        return LpResult("unbounded")
    x = np.zeros(n)
    for i, j in enumerate(basis):
        x[j] = T[i, -1]
    return LpResult("optimal", x=x, objective=float(c @ x))


def feasible_point(
    A_ub=None, b_ub=None, A_eq=None, b_eq=None, n: int | None = None
) -> LpResult:
    """Find any x (free sign) with A_ub x <= b_ub and A_eq x = b_eq.

    Converts to standard form by splitting x = u - v and adding slacks,
    then runs phase 1 only (zero objective).  Returns the witness in x.
    """
    blocks_A, blocks_b = [], []
    if A_ub is not None:
        A_ub = np.atleast_2d(np.asarray(A_ub, dtype=float))
        blocks_A.append((A_ub, "ub"))
        blocks_b.append(np.asarray(b_ub, dtype=float))
        n = A_ub.shape[1] if n is None else n
    if A_eq is not None:
        A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
        blocks_A.append((A_eq, "eq"))
        blocks_b.append(np.asarray(b_eq, dtype=float))
        n = A_eq.shape[1] if n is None else n
    if n is None:
        raise ValueError("no constraints given")

    n_ub = A_ub.shape[0] if A_ub is not None else 0
    rows = []
    for A, kind in blocks_A:
        slack = np.zeros((A.shape[0], n_ub))
        if kind == "ub":
            slack[:, : A.shape[0]] = np.eye(A.shape[0])
        rows.append(np.hstack([A, -A, slack]))
    A_std = np.vstack(rows)
    b_std = np.concatenate(blocks_b)
    c = np.zeros(A_std.shape[1])
    res = solve_standard_form(c, A_std, b_std)
    if not res.optimal:
        return res
    x = res.x[:n] - res.x[n : 2 * n]
    return LpResult("optimal", x=x, objective=0.0)
