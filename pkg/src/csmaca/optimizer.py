"""Feasibility of arrival rates, the optimal payload exponents r*(lambda),
and bounds on r* near the boundary of the capacity region."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import lp
from .errors import CapacityError, DomainError, NonConvergenceError, PreconditionError
from .graph import ConflictGraph, bit_matrix, independent_set_masks
from .stationary import (ProtocolParams, check_rates, detailed_log_g, detailed_states,
                         likelihood_hessian, log_likelihood)

FEAS_TOL = 1e-9
LOG_GUARD = math.log(np.finfo(float).tiny)


@dataclass(frozen=True)
class FeasibilityReport:
    status: str               # "infeasible" | "boundary" | "strictly_feasible"
    margin: float
    schedule: dict = field(default_factory=dict, compare=False)   # IS mask -> weight

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible"


def feasibility(g: ConflictGraph, lam, cap=None) -> FeasibilityReport:
    """Largest t with lam + t*1 dominated by a convex combination of independent sets.

    The set of schedulable rates is downward closed, so whenever lam + t*1 is
    non-negative "dominated by" and "equal to" a convex combination coincide;
    using dominance keeps the LP feasible for badly infeasible lam too.  The
    sign of t classifies lam; components equal to 0 can never be interior.
    """
    lam = check_rates(lam, g.num_links, closed=True)
    sets = independent_set_masks(g, cap)
    S = bit_matrix(sets, g.num_links).T.astype(float)     # K x N
    K, N = S.shape
    # columns: weights (N), t+, t-, slack (K)
    A = np.zeros((K + 1, N + 2 + K))
    A[:K, :N] = S
    A[:K, N] = -1.0
    A[:K, N + 1] = 1.0
    A[:K, N + 2:] = -np.eye(K)
    A[K, :N] = 1.0
    b = np.append(lam, 1.0)
    c = np.zeros(N + 2 + K)
    c[N], c[N + 1] = -1.0, 1.0
    res = lp.solve(c, A, b)
    t = res.x[N] - res.x[N + 1]
    if t < -FEAS_TOL:
        status = "infeasible"
    elif t <= FEAS_TOL or np.any(lam <= 0):
        status = "boundary"
    else:
        status = "strictly_feasible"
    sched = {int(m): float(w) for m, w in zip(sets, res.x[:N]) if w > 0}
    return FeasibilityReport(status, float(t), sched)


@dataclass
class RStarResult:
    r_star: np.ndarray
    residual: float
    iterations: int
    objective_trace: list = field(default_factory=list, repr=False)


def solve_rstar(g: ConflictGraph, params: ProtocolParams, lam, tol=1e-9, max_iter=100_000,
                r0=None, method="newton", check_feasible=True, cap=None) -> RStarResult:
    """Maximize the concave log-likelihood L(r; lam) so that s(r*) = lam.

    ``method="newton"`` takes damped Newton steps (the Hessian is minus the
    covariance of the payload indicators); ``"gradient"`` is plain steepest
    ascent.  Both use Armijo backtracking, so L never decreases.
    """
    lam = check_rates(lam, g.num_links)
    if method not in ("newton", "gradient"):
        raise ValueError(f"unknown method {method!r}")
    if check_feasible:
        rep = feasibility(g, lam, cap)
        if rep.status != "strictly_feasible":
            raise PreconditionError(f"lambda is {rep.status} (margin {rep.margin:.3g})")
    r = np.zeros(g.num_links) if r0 is None else np.array(r0, dtype=float)
    L, grad = log_likelihood(g, params, r, lam, cap)
    trace = [L]
    step = 1.0
    max_move = 4.0
    for it in range(1, max_iter + 1):
        res = float(np.abs(grad).max())
        if res <= tol:
            return RStarResult(r, res, it - 1, trace)
        d = None
        if method == "newton":
            try:
                d = np.linalg.solve(-likelihood_hessian(g, params, r, cap), grad)
            except np.linalg.LinAlgError:
                d = None
            if d is not None and (not np.all(np.isfinite(d)) or d @ grad <= 0):
                d = None
        if d is None:
            d = grad
        else:
            step = 1.0
        scale = np.abs(d).max()
        if scale * step > max_move:
            step = max_move / scale
        slope = float(d @ grad)
        while True:
            r_new = r + step * d
            L_new, g_new = log_likelihood(g, params, r_new, lam, cap)
            if L_new >= L + 1e-4 * step * slope:
                break
            step *= 0.5
            if step * scale < 1e-15:
                # no representable ascent left; L is flat to machine precision
                if res <= 10 * tol:
                    return RStarResult(r, res, it, trace)
                raise NonConvergenceError("line search stalled", best=r, residual=res)
        r, L, grad = r_new, L_new, g_new
        trace.append(L)
        if method == "gradient":
            step *= 2.0
    res = float(np.abs(grad).max())
    if res <= tol:
        return RStarResult(r, res, max_iter, trace)
    raise NonConvergenceError(f"no convergence in {max_iter} iterations", best=r, residual=res)


def region_check(g, params, lam, r_min, r_max, **kw) -> bool:
    """True iff r*(lam) lies strictly inside (r_min, r_max)^K."""
    if not r_min < r_max:
        raise DomainError("need r_min < r_max")
    r = solve_rstar(g, params, lam, **kw).r_star
    return bool(np.all(r > r_min) and np.all(r < r_max))


def r_lower_bound(params: ProtocolParams, lam) -> np.ndarray:
    """Per-link lower bound log((tau'/T0) * lam/(1-lam)) on r*."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any(lam >= 1) or lam.shape != (params.K,):
        raise DomainError("arrival rates must lie in [0,1)^K")
    with np.errstate(divide="ignore"):
        out = np.log(params.tau_prime / params.T0) + np.log(lam) - np.log1p(-lam)
    return np.maximum(out, LOG_GUARD)


def min_r_lower_bound(params: ProtocolParams, lam) -> float:
    lam = np.asarray(lam, dtype=float)
    return float(r_lower_bound(params, np.full(params.K, lam.min()))[0])


def delay_mean(params: ProtocolParams, r, s) -> np.ndarray:
    """Mean access delay T^p / s in slots."""
    return params.payload_mean(r) / np.asarray(s, dtype=float)


# -- capacity-region bound near the boundary -------------------------------

@dataclass(frozen=True)
class BoundReport:
    bound: float
    b: float
    G: float
    n_detailed: int
    n_extreme: int
    branch: str               # "log" when eps <= 1/b, else "inverse"


def _independent_rows(M, tol=1e-10):
    rows = []
    for i in range(M.shape[0]):
        cand = M[rows + [i]]
        if np.linalg.matrix_rank(cand, tol) == len(rows) + 1:
            rows.append(i)
    return rows


def polytope_vertices(A_eq, b_eq, max_combinations=2_000_000, tol=1e-10):
    """Vertices of {y >= 0 : A_eq y = b_eq} by enumerating feasible bases."""
    A_eq = np.asarray(A_eq, float)
    b_eq = np.asarray(b_eq, float)
    rows = _independent_rows(np.column_stack([A_eq, b_eq]))
    A, b = A_eq[rows], b_eq[rows]
    m, n = A.shape
    ncomb = math.comb(n, m)
    if ncomb > max_combinations:
        raise CapacityError("basis combinations", ncomb, max_combinations)
    found = {}
    for cols in itertools.combinations(range(n), m):
        B = A[:, cols]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        yb = np.linalg.solve(B, b)
        if np.any(yb < -tol):
            continue
        y = np.zeros(n)
        y[list(cols)] = np.maximum(yb, 0.0)
        found.setdefault(tuple(np.round(y, 10)), y)
    return list(found.values())


def _l1_distance_to_target(u, A, lam_bar):
    """min ||u - z||_1 over distributions z with A z = lam_bar."""
    K, n = A.shape
    # columns: z (n), t+ (n), t- (n);  z + t+ - t- = u
    Aeq = np.zeros((K + 1 + n, 3 * n))
    Aeq[:K, :n] = A
    Aeq[K, :n] = 1.0
    Aeq[K + 1:, :n] = np.eye(n)
    Aeq[K + 1:, n:2 * n] = np.eye(n)
    Aeq[K + 1:, 2 * n:] = -np.eye(n)
    beq = np.concatenate([lam_bar, [1.0], u])
    c = np.concatenate([np.zeros(n), np.ones(2 * n)])
    return lp.solve(c, Aeq, beq).objective


def theorem4_constants(g, params, lam_bar, cap=64, cap_links=None):
    """Constants (N', G, b, #extreme points) of the near-boundary bound."""
    lam_bar = check_rates(lam_bar, g.num_links, closed=True)
    if np.any(lam_bar <= 0):
        raise PreconditionError("lambda_bar must be componentwise positive")
    rep = feasibility(g, lam_bar, cap_links)
    if abs(rep.margin) > FEAS_TOL:
        raise PreconditionError(f"lambda_bar is not on the boundary (margin {rep.margin:.3g})")
    xs, zs = detailed_states(g, cap_links)
    n = xs.size
    if n > cap:
        raise CapacityError("number of detailed states N'", n, cap)
    G = float(np.abs(detailed_log_g(g, params, xs, zs, cap_links)).max())
    A = bit_matrix(zs, g.num_links).T.astype(float)
    K = g.num_links
    # y = (u, rho, slack): 1'u = 1, A u - rho lam_bar = 0, rho + slack = 1
    Aeq = np.zeros((K + 2, n + 2))
    Aeq[0, :n] = 1.0
    Aeq[1:K + 1, :n] = A
    Aeq[1:K + 1, n] = -lam_bar
    Aeq[K + 1, n] = Aeq[K + 1, n + 1] = 1.0
    beq = np.zeros(K + 2)
    beq[0] = beq[K + 1] = 1.0
    verts = polytope_vertices(Aeq, beq)
    ratios = []
    for y in verts:
        rho = y[n]
        if rho < 1.0 - 1e-9:
            ratios.append(_l1_distance_to_target(y[:n], A, lam_bar) / (1.0 - rho))
    b = 0.5 * max(ratios)
    return n, G, b, len(verts)


def theorem4_bound(g: ConflictGraph, params: ProtocolParams, lam_bar, epsilon, cap=64,
                   cap_links=None) -> BoundReport:
    """Upper bound on lam_bar . r*((1 - eps) lam_bar) for boundary lam_bar.

    Exact constants come from vertex enumeration of the polytope of detailed-
    state distributions whose throughput is a multiple of lam_bar, so this is
    only usable for tiny graphs.
    """
    if not 0 < epsilon < 1:
        raise DomainError("epsilon must lie in (0,1)")
    n, G, b, nv = theorem4_constants(g, params, lam_bar, cap, cap_links)
    if epsilon <= 1.0 / b:
        val = b * (math.log(1.0 / epsilon) + math.log(n / b) + 2 * G + 1)
        branch = "log"
    else:
        val = (math.log(n) + 2 * G) / epsilon
        branch = "inverse"
    return BoundReport(val, b, G, n, nv, branch)


def rstar_single_link(params: ProtocolParams, lam: float) -> float:
    """Closed-form r* for one isolated link."""
    p = params.p[0]
    Tp = lam * (1 - p + p * params.tau_prime) / (p * (1 - lam))
    return math.log(Tp / params.T0)
