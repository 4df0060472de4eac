"""Small dense two-phase simplex for standard-form linear programs.

    minimize  c @ x   subject to  A @ x == b,  x >= 0

Bland's rule is used throughout, so the method terminates on degenerate
problems; the instances here have at most a few hundred columns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverError

TOL = 1e-10


class InfeasibleLP(SolverError):
    pass


class UnboundedLP(SolverError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    basis: list
    iterations: int


def _pivot(T, row, col):
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]


def _run(T, basis, n_cols, max_iter, tol):
    """Simplex iterations on tableau T whose last row is the reduced-cost row."""
    it = 0
    m = T.shape[0] - 1
    while True:
        red = T[-1, :n_cols]
        cand = np.flatnonzero(red < -tol)
        if cand.size == 0:
            return it
        col = int(cand[0])
        colv = T[:m, col]
        pos = colv > tol
        if not pos.any():
            raise UnboundedLP("objective unbounded below", certificate={"column": col})
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / colv[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        row = min(ties, key=lambda i: basis[i])
        _pivot(T, row, col)
        basis[row] = col
        it += 1
        if it > max_iter:
            raise SolverError("simplex iteration limit", certificate={"iterations": it})


def solve(c, A_eq, b_eq, max_iter=10_000, tol=TOL) -> LPResult:
    c = np.asarray(c, dtype=float)
    A = np.array(A_eq, dtype=float, ndmin=2)
    b = np.asarray(b_eq, dtype=float).copy()
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase 1: artificial columns n..n+m-1
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    it = _run(T, basis, n + m, max_iter, tol)
    infeas = -T[-1, -1]
    if infeas > 1e-8 * max(1.0, np.abs(b).max(initial=0.0)):
        raise InfeasibleLP("no feasible point", certificate={"phase1_residual": float(infeas)})

    # drive remaining artificials out of the basis, dropping redundant rows
    keep = []
    for i in range(m):
        if basis[i] >= n:
            nz = np.flatnonzero(np.abs(T[i, :n]) > 1e-9)
            if nz.size:
                _pivot(T, i, int(nz[0]))
                basis[i] = int(nz[0])
                keep.append(i)
        else:
            keep.append(i)
    T2 = np.zeros((len(keep) + 1, n + 1))
    T2[:-1, :n] = T[keep, :n]
    T2[:-1, -1] = T[keep, -1]
    basis = [basis[i] for i in keep]
    T2[-1, :n] = c
    for i, j in enumerate(basis):
        if T2[-1, j] != 0.0:
            T2[-1] -= T2[-1, j] * T2[i]
    it += _run(T2, basis, n, max_iter, tol)

    x = np.zeros(n)
    for i, j in enumerate(basis):
        x[j] = T2[i, -1]
    x[np.abs(x) < 1e-14] = 0.0
    return LPResult(x, float(c @ x), basis, it)
