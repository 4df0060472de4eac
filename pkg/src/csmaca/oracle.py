"""Exact Markov chain over full protocol states, for tiny instances.

A state ``w`` is a tuple with one ``(b, a)`` pair per link: ``(0, 0)`` for
an idle link, otherwise the total length ``b`` of the current transmission
and the remaining slots ``a`` including the current one.  Whether an active
link is colliding follows from the graph (it has an active neighbour), so
it need not be stored.

Everything here is dense and brute force; it exists to check the closed
forms in :mod:`csmaca.stationary` and the slot rule in the simulator.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, SolverError
from .graph import ConflictGraph, classify, mask_links
from .stationary import ProtocolParams, onoff_from_means

MAX_LINKS = 3
DEFAULT_B_MAX = 8

State = tuple


@dataclass(frozen=True)
class LengthPmf:
    """Per-link pmf of the total length ``b`` (overhead plus payload) of a success."""

    probs: tuple               # one {length: probability} dict per link

    def __post_init__(self):
        for k, d in enumerate(self.probs):
            if not d:
                raise ConfigError(f"link {k} has an empty length pmf")
            if any(int(b) != b or b < 1 for b in d) or any(v <= 0 for v in d.values()):
                raise ConfigError(f"link {k}: lengths must be positive integers with positive mass")
            if abs(sum(d.values()) - 1.0) > 1e-12:
                raise ConfigError(f"link {k}: pmf sums to {sum(d.values())}")

    @classmethod
    def fixed(cls, lengths) -> "LengthPmf":
        return cls(tuple({int(b): 1.0} for b in lengths))

    @classmethod
    def from_payload_means(cls, params: ProtocolParams, Tp) -> "LengthPmf":
        """Two-point pmf on ``tau' + floor/ceil`` with the given mean payloads."""
        out = []
        for T in np.asarray(Tp, dtype=float):
            fl = math.floor(T)
            frac = T - fl
            d = {params.tau_prime + fl: 1.0 - frac}
            if frac > 0:
                d[params.tau_prime + fl + 1] = frac
            out.append({b: v for b, v in d.items() if v > 0})
        return cls(tuple(out))

    def mean(self, k: int) -> float:
        return sum(b * v for b, v in self.probs[k].items())

    def means(self) -> np.ndarray:
        return np.array([self.mean(k) for k in range(len(self.probs))])

    def b_max(self) -> int:
        return max(max(d) for d in self.probs)


def _check_instance(g: ConflictGraph, params: ProtocolParams, pmf: LengthPmf, cap):
    if g.num_links > MAX_LINKS:
        raise CapacityError("number of links K", g.num_links, MAX_LINKS)
    if params.K != g.num_links or len(pmf.probs) != g.num_links:
        raise ConfigError("graph, params and pmf disagree on K")
    longest = max(pmf.b_max(), params.gamma)
    if longest > cap:
        raise CapacityError("longest transmission b_max", longest, cap)


def _colliding(g: ConflictGraph, x: int, k: int) -> bool:
    return bool(int(g.neighbor_masks[k]) & x)


def onoff_of(w: State) -> int:
    return sum(1 << k for k, (b, _) in enumerate(w) if b)


def is_valid(g: ConflictGraph, params: ProtocolParams, pmf: LengthPmf, w: State) -> bool:
    x = onoff_of(w)
    for k, (b, a) in enumerate(w):
        if b == 0:
            if a != 0:
                return False
            continue
        if not 1 <= a <= b:
            return False
        if _colliding(g, x, k):
            if b != params.gamma:
                return False
            if any(w[j][1] != a for j in g.neighbors(k) if w[j][0]):
                return False
        elif b not in pmf.probs[k]:
            return False
    return True


def enumerate_states(g: ConflictGraph, params: ProtocolParams, pmf: LengthPmf,
                     cap: int = DEFAULT_B_MAX) -> list:
    """Every valid state, ordered by on-off mask and then lexicographically."""
    _check_instance(g, params, pmf, cap)
    K = g.num_links
    out = []
    for x in range(1 << K):
        cl = classify(g, x)
        choices = []        # (links, list of per-link (b, a) assignments)
        for k in sorted(cl.successful):
            choices.append(((k,), [((b, a),) for b in sorted(pmf.probs[k])
                                   for a in range(1, b + 1)]))
        for comp in cl.components:
            if len(comp) > 1:
                members = tuple(sorted(comp))
                choices.append((members, [((params.gamma, a),) * len(members)
                                          for a in range(1, params.gamma + 1)]))
        for combo in itertools.product(*[c[1] for c in choices]):
            w = [(0, 0)] * K
            for (links, _), vals in zip(choices, combo):
                for k, v in zip(links, vals):
                    w[k] = v
            out.append(tuple(w))
    return out


def reverse(w: State) -> State:
    """Map remaining time ``a`` to elapsed time ``b - a + 1``; an involution."""
    return tuple((b, b - a + 1) if b else (0, 0) for b, a in w)


def successors(g: ConflictGraph, params: ProtocolParams, pmf: LengthPmf, w: State) -> dict:
    """One-slot transition law out of ``w`` as ``{w': probability}``."""
    K = g.num_links
    cont = [k for k, (b, a) in enumerate(w) if a > 1]
    blocked = set(cont)
    for k in cont:
        blocked.update(g.neighbors(k))
    free = [k for k in range(K) if k not in blocked]
    p = params.p
    out: dict = {}
    for bits in itertools.product((0, 1), repeat=len(free)):
        att = sum(1 << k for k, on in zip(free, bits) if on)
        base = 1.0
        for k, on in zip(free, bits):
            base *= p[k] if on else 1.0 - p[k]
        nxt = [(0, 0)] * K
        for k in cont:
            nxt[k] = (w[k][0], w[k][1] - 1)
        succ = []
        for k in mask_links(att):
            if int(g.neighbor_masks[k]) & att:
                nxt[k] = (params.gamma, params.gamma)
            else:
                succ.append(k)
        for lens in itertools.product(*[sorted(pmf.probs[k]) for k in succ]):
            prob = base
            for k, b in zip(succ, lens):
                nxt[k] = (b, b)
                prob *= pmf.probs[k][b]
            key = tuple(nxt)
            out[key] = out.get(key, 0.0) + prob
    return out


@dataclass
class Chain:
    states: list
    index: dict
    Q: np.ndarray

    def __len__(self):
        return len(self.states)


def transition_kernel(g: ConflictGraph, params: ProtocolParams, pmf: LengthPmf,
                      states=None, cap: int = DEFAULT_B_MAX) -> Chain:
    """Dense row-stochastic matrix over the enumerated valid states."""
    states = enumerate_states(g, params, pmf, cap) if states is None else list(states)
    index = {w: i for i, w in enumerate(states)}
    n = len(states)
    Q = np.zeros((n, n))
    for i, w in enumerate(states):
        for w2, pr in successors(g, params, pmf, w).items():
            j = index.get(w2)
            if j is None:
                raise SolverError(f"successor {w2} of {w} is not a valid state")
            Q[i, j] += pr
    dev = float(np.abs(Q.sum(axis=1) - 1.0).max())
    if dev > 1e-12:
        raise SolverError(f"kernel rows do not sum to 1 (max deviation {dev:.3g})")
    return Chain(states, index, Q)


def stationary_exact(Q: np.ndarray) -> np.ndarray:
    """Solve pi Q = pi, sum(pi) = 1 by a dense least-squares system."""
    n = Q.shape[0]
    A = np.vstack([Q.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    res = float(np.abs(pi @ Q - pi).max())
    if res > 1e-12 or abs(pi.sum() - 1.0) > 1e-12:
        raise SolverError(f"stationary solve inaccurate (residual {res:.3g})")
    return pi


def product_form(g: ConflictGraph, params: ProtocolParams, pmf: LengthPmf, states) -> np.ndarray:
    """Normalized closed-form weights: q for idle links, p times the length mass
    for successes, and p alone for colliding links."""
    out = np.empty(len(states))
    for i, w in enumerate(states):
        x = onoff_of(w)
        v = 1.0
        for k, (b, _) in enumerate(w):
            if b == 0:
                v *= 1.0 - params.p[k]
            elif _colliding(g, x, k):
                v *= params.p[k]
            else:
                v *= params.p[k] * pmf.probs[k][b]
        out[i] = v
    return out / out.sum()


def onoff_marginal(states, pi, K: int) -> np.ndarray:
    out = np.zeros(1 << K)
    for w, v in zip(states, pi):
        out[onoff_of(w)] += v
    return out


def block_sum_check(g: ConflictGraph, params: ProtocolParams, pmf: LengthPmf, states) -> float:
    """Max relative gap between summed success-length masses over all states
    sharing an on-off state and the product of mean lengths times gamma^h."""
    K = g.num_links
    sums = np.zeros(1 << K)
    for w in states:
        x = onoff_of(w)
        v = 1.0
        for k, (b, _) in enumerate(w):
            if b and not _colliding(g, x, k):
                v *= pmf.probs[k][b]
        sums[x] += v
    T = pmf.means()
    worst = 0.0
    for x in range(1 << K):
        cl = classify(g, x)
        target = params.gamma ** cl.collision_number * np.prod([T[k] for k in cl.successful])
        worst = max(worst, abs(sums[x] - target) / target)
    return worst


@dataclass(frozen=True)
class VerifyReport:
    n_states: int
    product_form: float        # max |pi - closed form|
    marginal: float            # max |on-off marginal of pi - analytical p(x)|
    balance: float             # max |p(w)Q(w,w') - p(w')Q(g(w'),g(w))|
    involution: bool
    support_symmetric: bool    # Q(w,w') > 0 iff Q(g(w'),g(w)) > 0
    block_sum: float

    def ok(self, tol_pf=1e-9, tol_bal=1e-12) -> bool:
        return (self.product_form < tol_pf and self.marginal < tol_pf and self.balance < tol_bal
                and self.involution and self.support_symmetric and self.block_sum < 1e-12)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def balance_deviation(chain: Chain, p_w: np.ndarray) -> tuple[float, bool]:
    idx = chain.index
    rev = np.array([idx[reverse(w)] for w in chain.states])
    Q = chain.Q
    lhs = p_w[:, None] * Q
    # rhs[i, j] = p(w_j) Q(g(w_j), g(w_i))
    rhs = p_w[None, :] * Q[rev][:, rev].T
    support = bool(np.array_equal(Q > 0, Q[rev][:, rev].T > 0))
    return float(np.abs(lhs - rhs).max()), support


def verify(g: ConflictGraph, params: ProtocolParams, pmf: LengthPmf,
           cap: int = DEFAULT_B_MAX) -> VerifyReport:
    chain = transition_kernel(g, params, pmf, cap=cap)
    pi = stationary_exact(chain.Q)
    pf = product_form(g, params, pmf, chain.states)
    marg = onoff_marginal(chain.states, pi, g.num_links)
    analytic = onoff_from_means(g, params, pmf.means()).probs
    bal, support = balance_deviation(chain, pf)
    invol = all(reverse(reverse(w)) == w for w in chain.states)
    return VerifyReport(
        n_states=len(chain), product_form=float(np.abs(pi - pf).max()),
        marginal=float(np.abs(marg - analytic).max()), balance=bal, involution=invol,
        support_symmetric=support, block_sum=block_sum_check(g, params, pmf, chain.states))


def default_suite(b_max: int = 6) -> list:
    """Small instances covering every graph on at most three links."""
    from .graph import complete, edgeless, path
    graphs = [edgeless(1), edgeless(2), complete(2), edgeless(3), path(3), complete(3),
              ConflictGraph(3, frozenset({(0, 1)}))]
    suite = []
    for gi, g in enumerate(graphs):
        K = g.num_links
        rng = np.random.default_rng(gi)
        p = tuple(float(v) for v in rng.uniform(0.1, 0.6, K))
        gamma = 1 + gi % 3
        tau = 1 + gi % 2
        params = ProtocolParams(p=p, gamma=gamma, tau_prime=tau, T0=1.0)
        # two-point lengths within [tau'+1, b_max]
        Tp = rng.uniform(1.0, b_max - tau - 1.0, K)
        suite.append((f"g{gi}_K{K}_{len(g.edges)}e", g, params,
                      LengthPmf.from_payload_means(params, Tp)))
    return suite
