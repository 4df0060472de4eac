"""Product-form stationary law of the saturated CSMA/CA chain.

All quantities are computed by exhaustive enumeration of the ``2^K`` on-off
states, in the log domain so that large payload exponents do not overflow.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import logsumexp

from .errors import CapacityError, DimensionError, DomainError
from .graph import ConflictGraph, bit_matrix, state_tables

DEFAULT_DETAILED_CAP = 1 << 21


@dataclass(frozen=True)
class ProtocolParams:
    """Attempt probabilities and slot-length constants.

    ``gamma`` is the probe/collision length, ``tau_prime`` the per-success
    overhead and ``T0`` the reference payload (mean payload = T0 * exp(r)).
    """

    p: tuple
    gamma: int = 5
    tau_prime: int = 10
    T0: float = 15.0

    def __post_init__(self):
        p = tuple(float(v) for v in np.atleast_1d(self.p))
        object.__setattr__(self, "p", p)
        if not all(0.0 < v < 1.0 for v in p):
            raise DomainError(f"attempt probabilities must lie in (0,1): {p}")
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise DomainError(f"gamma must be a positive integer, got {self.gamma}")
        if int(self.tau_prime) != self.tau_prime or self.tau_prime < 1:
            raise DomainError(f"tau_prime must be a positive integer, got {self.tau_prime}")
        if not self.T0 > 0:
            raise DomainError(f"T0 must be positive, got {self.T0}")
        object.__setattr__(self, "gamma", int(self.gamma))
        object.__setattr__(self, "tau_prime", int(self.tau_prime))
        object.__setattr__(self, "T0", float(self.T0))

    @classmethod
    def uniform(cls, K: int, p: float, **kw) -> "ProtocolParams":
        return cls(p=(p,) * K, **kw)

    @property
    def K(self) -> int:
        return len(self.p)

    def payload_mean(self, r) -> np.ndarray:
        return self.T0 * np.exp(np.asarray(r, dtype=float))

    def r_for_payload(self, Tp) -> np.ndarray:
        return np.log(np.asarray(Tp, dtype=float) / self.T0)

    def to_json(self) -> dict:
        return {"p": list(self.p), "gamma": self.gamma,
                "tau_prime": self.tau_prime, "T0": self.T0}

    @classmethod
    def from_json(cls, d: dict, K: int | None = None) -> "ProtocolParams":
        p = d["p"]
        if np.isscalar(p):
            if K is None:
                raise DomainError("scalar p needs the number of links")
            p = (float(p),) * K
        return cls(p=tuple(p), gamma=d.get("gamma", 5), tau_prime=d.get("tau_prime", 10),
                   T0=d.get("T0", 15.0))


def _check(g: ConflictGraph, params: ProtocolParams, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (g.num_links,):
        raise DimensionError(f"r has shape {r.shape}, expected ({g.num_links},)")
    if params.K != g.num_links:
        raise DimensionError(f"params describe {params.K} links, graph has {g.num_links}")
    if not np.all(np.isfinite(r)):
        raise DomainError("r must be finite")
    return r


def _log_total_length(params: ProtocolParams, r: np.ndarray) -> np.ndarray:
    # log(tau' + T0 e^r), stable for large r
    return np.logaddexp(np.log(params.tau_prime), np.log(params.T0) + r)


def base_log_weights(g: ConflictGraph, params: ProtocolParams, cap=None):
    """``log g(x)`` for every bitmask x: collision factor times attempt probabilities."""
    succ, h = state_tables(g, cap)
    K = g.num_links
    masks = np.arange(1 << K, dtype=np.int64)
    p = np.asarray(params.p)
    lw = h * np.log(params.gamma)
    for k in range(K):
        on = ((masks >> k) & 1).astype(bool)
        lw = lw + np.where(on, np.log(p[k]), np.log1p(-p[k]))
    return lw, succ


def _log_weights(g, params, r, cap=None):
    lg, succ = base_log_weights(g, params, cap)
    lt = _log_total_length(params, r)
    lw = lg.copy()
    for k in range(g.num_links):
        lw += np.where((succ >> k) & 1, lt[k], 0.0)
    return lw, succ


@dataclass(frozen=True)
class OnOffDistribution:
    probs: np.ndarray          # indexed by on-off bitmask
    log_normalizer: float

    @property
    def normalizer(self) -> float:
        return float(np.exp(self.log_normalizer))

    def __getitem__(self, x) -> float:
        from .graph import to_mask
        return float(self.probs[to_mask(x)])

    def as_dict(self, K: int) -> dict:
        from .graph import to_bits
        return {to_bits(m, K): float(v) for m, v in enumerate(self.probs)}


def onoff_distribution(g: ConflictGraph, params: ProtocolParams, r, cap=None) -> OnOffDistribution:
    """Stationary probability of every on-off state, plus ``log E(r)``."""
    r = _check(g, params, r)
    lw, _ = _log_weights(g, params, r, cap)
    logE = float(logsumexp(lw))
    return OnOffDistribution(np.exp(lw - logE), logE)


def onoff_from_means(g: ConflictGraph, params: ProtocolParams, T, cap=None) -> OnOffDistribution:
    """Same law parametrized directly by mean total transmission lengths ``T_k``."""
    T = np.asarray(T, dtype=float)
    if T.shape != (g.num_links,) or np.any(T <= 0):
        raise DomainError("T must be a positive vector of length K")
    lg, succ = base_log_weights(g, params, cap)
    lw = lg.copy()
    for k in range(g.num_links):
        lw += np.where((succ >> k) & 1, np.log(T[k]), 0.0)
    logE = float(logsumexp(lw))
    return OnOffDistribution(np.exp(lw - logE), logE)


def payload_fraction(params: ProtocolParams, r) -> np.ndarray:
    """Fraction of a successful transmission spent on payload, T^p / (tau' + T^p)."""
    r = np.asarray(r, dtype=float)
    # 1 / (1 + tau'/(T0 e^r)) written with expit-style stability
    return 1.0 / (1.0 + np.exp(np.log(params.tau_prime) - np.log(params.T0) - r))


def success_probabilities(g, params, r, cap=None) -> np.ndarray:
    """P(k in S(x)) under the stationary law."""
    dist = onoff_distribution(g, params, r, cap)
    succ, _ = state_tables(g, cap)
    return _marginals(dist.probs, succ, g.num_links)


def _marginals(probs, masks, K):
    out = np.empty(K)
    for k in range(K):
        out[k] = probs[((masks >> k) & 1).astype(bool)].sum()
    return out


def service_rates(g: ConflictGraph, params: ProtocolParams, r, cap=None) -> np.ndarray:
    """Stationary fraction of slots each link spends sending payload."""
    r = _check(g, params, r)
    return payload_fraction(params, r) * success_probabilities(g, params, r, cap)


def log_likelihood(g: ConflictGraph, params: ProtocolParams, r, lam, cap=None):
    """``(L, grad)`` with ``L = lam.r - log E(r)`` and ``grad = lam - s(r)``."""
    r = _check(g, params, r)
    lam = check_rates(lam, g.num_links)
    dist = onoff_distribution(g, params, r, cap)
    succ, _ = state_tables(g, cap)
    s = payload_fraction(params, r) * _marginals(dist.probs, succ, g.num_links)
    return float(lam @ r - dist.log_normalizer), lam - s


def check_rates(lam, K: int, closed=False) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (K,):
        raise DimensionError(f"lambda has shape {lam.shape}, expected ({K},)")
    if closed:
        bad = np.any(lam < 0) or np.any(lam > 1)
    else:
        bad = np.any(lam <= 0) or np.any(lam >= 1)
    if bad or not np.all(np.isfinite(lam)):
        rng = "[0,1]" if closed else "(0,1)"
        raise DomainError(f"arrival rates must lie in {rng}^K: {lam.tolist()}")
    return lam


def likelihood_hessian(g: ConflictGraph, params: ProtocolParams, r, cap=None) -> np.ndarray:
    """Hessian of L in r, i.e. minus the covariance of the payload indicators z."""
    r = _check(g, params, r)
    K = g.num_links
    dist = onoff_distribution(g, params, r, cap)
    succ, _ = state_tables(g, cap)
    frac = payload_fraction(params, r)
    joint = np.zeros((K, K))
    chunk = 1 << 15
    for lo in range(0, succ.size, chunk):
        B = bit_matrix(succ[lo:lo + chunk], K).astype(float)
        joint += B.T @ (dist.probs[lo:lo + chunk, None] * B)
    ez = np.outer(frac, frac) * joint
    s = frac * np.diag(joint)
    np.fill_diagonal(ez, s)
    return -(ez - np.outer(s, s))


# -- detailed states (x, z) ---------------------------------------------

@njit(cache=True)
def _expand_detailed(succ, n_out):
    xs = np.empty(n_out, dtype=np.int64)
    zs = np.empty(n_out, dtype=np.int64)
    i = 0
    for x in range(succ.size):
        s = succ[x]
        z = s
        # walk every submask of s, including 0
        while True:
            xs[i] = x
            zs[i] = z
            i += 1
            if z == 0:
                break
            z = (z - 1) & s
    return xs, zs


@dataclass(frozen=True)
class DetailedDistribution:
    x: np.ndarray
    z: np.ndarray
    probs: np.ndarray
    log_g: np.ndarray          # log g(x, z), r-independent

    def __len__(self):
        return self.x.size

    def service_rates(self, K: int) -> np.ndarray:
        return _marginals(self.probs, self.z, K)

    def onoff_marginal(self, K: int) -> np.ndarray:
        return np.bincount(self.x, weights=self.probs, minlength=1 << K)


def detailed_states(g: ConflictGraph, cap=None, detailed_cap=DEFAULT_DETAILED_CAP):
    """Arrays ``(x, z)`` listing every detailed state, z ranging over subsets of S(x)."""
    succ, _ = state_tables(g, cap)
    n = int(np.left_shift(1, _popcounts(succ)).sum())
    if n > detailed_cap:
        raise CapacityError("number of detailed states", n, detailed_cap)
    return _expand_detailed(np.asarray(succ), n)


def _popcounts(a):
    a = a.copy()
    c = np.zeros_like(a)
    while np.any(a):
        c += a & 1
        a >>= 1
    return c


def detailed_log_g(g: ConflictGraph, params: ProtocolParams, xs, zs, cap=None) -> np.ndarray:
    lg, succ = base_log_weights(g, params, cap)
    nz = _popcounts(zs)
    ns = _popcounts(succ[xs])
    return lg[xs] + (ns - nz) * np.log(params.tau_prime) + nz * np.log(params.T0)


def detailed_distribution(g: ConflictGraph, params: ProtocolParams, r, cap=None,
                          detailed_cap=DEFAULT_DETAILED_CAP) -> DetailedDistribution:
    """Stationary law over detailed states (x, z); z_k = 1 means k sends payload."""
    r = _check(g, params, r)
    xs, zs = detailed_states(g, cap, detailed_cap)
    lgz = detailed_log_g(g, params, xs, zs, cap)
    lw = lgz.copy()
    for k in range(g.num_links):
        lw += np.where((zs >> k) & 1, r[k], 0.0)
    logE = logsumexp(lw)
    return DetailedDistribution(xs, zs, np.exp(lw - logE), lgz)


def access_intensity(params: ProtocolParams, Tp: Sequence[float]) -> np.ndarray:
    """Mean payload over mean backoff, T^p / (1/p - 1)."""
    p = np.asarray(params.p)
    return np.asarray(Tp, dtype=float) / (1.0 / p - 1.0)
