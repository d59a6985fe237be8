"""Softmax and exact entmax-1.5 with analytic vector-Jacobian products.

entmax-1.5 maps a score vector z to

    p_i = max((z_i - tau) / 2, 0) ** 2,    with tau chosen so that sum(p) == 1.

Two solvers are provided. ``entmax15_bisect`` finds tau from the monotone
scalar equation and is the reference; ``entmax15_sort`` finds the support by
sorting and solves a quadratic per candidate support size. Both operate on
whole row batches internally (``*_rows`` functions) so attention can normalize
a T x T matrix in one call.

Boundary convention: an entry with z_i exactly equal to tau gets p_i = 0, so
the support is always {i : p_i > 0}.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import as_tensor

__all__ = [
    "Normalizer",
    "NormalizerResult",
    "SimplexError",
    "ConsistencyError",
    "SupportStats",
    "softmax",
    "softmax_rows",
    "entmax15_bisect",
    "entmax15_bisect_rows",
    "entmax15_sort",
    "entmax15_sort_rows",
    "entmax15_vjp",
    "entmax15_vjp_rows",
    "softmax_vjp",
    "softmax_vjp_rows",
    "normalize_rows",
    "normalize_vjp_rows",
    "support_stats",
    "inject_tau_fault",
]

DEFAULT_TOL = 1e-12


class Normalizer(str, Enum):
    SOFTMAX = "softmax"
    ENTMAX15 = "entmax15"


class SimplexError(ValueError):
    """A probability row is not on the simplex."""


class ConsistencyError(RuntimeError):
    """A solver reached a state that finite input cannot produce."""


# Offset added to every entmax threshold. Only the acceptance negative
# control touches it, through inject_tau_fault().
_TAU_FAULT = 0.0


@contextlib.contextmanager
def inject_tau_fault(offset: float):
    """Temporarily corrupt the entmax threshold by ``offset``."""
    global _TAU_FAULT
    previous = _TAU_FAULT
    _TAU_FAULT = float(offset)
    try:
        yield
    finally:
        _TAU_FAULT = previous


@dataclass(frozen=True)
class NormalizerResult:
    """Output of a normalizer applied to one score vector."""

    p: np.ndarray
    support: np.ndarray
    kind: Normalizer
    _tau: float = math.nan

    @property
    def tau(self) -> float:
        if self.kind is Normalizer.SOFTMAX:
            raise AttributeError("softmax has no threshold; tau is undefined")
        return self._tau

    @property
    def support_size(self) -> int:
        return int(self.support.sum())


def _as_logits(z) -> np.ndarray:
    z = as_tensor(z)
    if z.ndim != 1 or z.shape[0] < 1:
        raise ValueError(f"expected a nonempty 1-D score vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("scores must be finite")
    return z


def _as_rows(z) -> np.ndarray:
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] < 1:
        raise ValueError(f"expected a 2-D batch of score rows, got shape {z.shape}")
    return z


# -- softmax ---------------------------------------------------------------


def softmax_rows(z) -> np.ndarray:
    z = _as_rows(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / np.add.reduce(e, axis=1, keepdims=True)


def softmax(z) -> NormalizerResult:
    z = _as_logits(z)
    p = softmax_rows(z[None, :])[0]
    return NormalizerResult(p=p, support=p > 0, kind=Normalizer.SOFTMAX)


# -- entmax-1.5 ------------------------------------------------------------


def _constant_rows(z: np.ndarray) -> np.ndarray:
    return z.max(axis=1) == z.min(axis=1)


def _apply_threshold(x: np.ndarray, tau: np.ndarray) -> np.ndarray:
    gap = np.maximum(x - tau[:, None], 0.0) * 0.5
    return gap * gap


def entmax15_bisect_rows(z, tol: float = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise entmax-1.5 by bisection on the threshold.

    Returns ``(p, tau)``. After shifting each row so its max is 0, the mass
    S(tau) = sum(max((z_i - tau)/2, 0)^2) is continuous and strictly
    decreasing on [-2, 0] with S(-2) >= 1 and S(0) = 0, so tau is bracketed
    there. Bisection stops once the bracket is narrower than ``tol``; one
    Newton step from the lower end (where S >= 1) then removes the residual
    mass, which spreads the correction over the support in proportion to
    sqrt(p).
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    z = _as_rows(z)
    zmax = z.max(axis=1)
    x = z - zmax[:, None]
    # sums run over descending-sorted values so permuting a row cannot change tau
    xs = -np.sort(-x, axis=1)

    lo = np.full(z.shape[0], -2.0)
    hi = np.zeros(z.shape[0])
    n_iter = max(1, math.ceil(math.log2(2.0 / tol)))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        mass = np.add.reduce(_apply_threshold(xs, mid), axis=1)
        above = mass >= 1.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo <= tol):
            break

    gaps = np.maximum(xs - lo[:, None], 0.0) * 0.5
    residual = np.add.reduce(gaps * gaps, axis=1) - 1.0
    tau = lo + residual / np.add.reduce(gaps, axis=1)
    tau = tau + _TAU_FAULT

    p = _apply_threshold(x, tau)
    const = _constant_rows(z)
    if const.any():
        n = z.shape[1]
        p[const] = 1.0 / n
        tau[const] = -2.0 / math.sqrt(n)
    return p, tau + zmax


def entmax15_sort_rows(z) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise entmax-1.5 by sorting and exact threshold search.

    With u = z/2 sorted descending, the threshold for a support of the top k
    entries is ``mean(u_1..k) - sqrt((1 - ss_k)/k)``, ss_k being the sum of
    squared deviations from that mean. The support size is the largest k
    with u_k above its own candidate threshold; that k also satisfies
    u_{k+1} <= threshold, which is verified.
    """
    z = _as_rows(z)
    rows, n = z.shape
    zmax = z.max(axis=1)
    x = z - zmax[:, None]
    u = -np.sort(-x, axis=1) * 0.5

    k = np.arange(1, n + 1, dtype=np.float64)
    csum = np.cumsum(u, axis=1)
    csum2 = np.cumsum(u * u, axis=1)
    mean = csum / k
    ss = csum2 - csum * mean
    delta = (1.0 - ss) / k
    with np.errstate(invalid="ignore"):
        cand = mean - np.sqrt(np.where(delta >= 0.0, delta, np.nan))
        inside = u > cand

    size = n - np.argmax(inside[:, ::-1], axis=1)
    if not np.all(inside[np.arange(rows), size - 1]):
        raise ConsistencyError("entmax15_sort: no support size satisfies the threshold test")
    tau_u = cand[np.arange(rows), size - 1]
    nxt = np.where(size < n, u[np.arange(rows), np.minimum(size, n - 1)], -np.inf)
    # bracket check with rounding slack
    if np.any(nxt > tau_u + 1e-12 * np.maximum(1.0, np.abs(tau_u))):
        raise ConsistencyError("entmax15_sort: threshold does not bracket the support")

    tau = 2.0 * tau_u + _TAU_FAULT
    p = _apply_threshold(x, tau)
    const = _constant_rows(z)
    if const.any():
        p[const] = 1.0 / n
        tau[const] = -2.0 / math.sqrt(n)
    return p, tau + zmax


def _entmax_result(p: np.ndarray, tau: float) -> NormalizerResult:
    return NormalizerResult(p=p, support=p > 0, kind=Normalizer.ENTMAX15, _tau=float(tau))


def entmax15_bisect(z, tol: float = DEFAULT_TOL) -> NormalizerResult:
    z = _as_logits(z)
    p, tau = entmax15_bisect_rows(z[None, :], tol)
    return _entmax_result(p[0], tau[0])


def entmax15_sort(z) -> NormalizerResult:
    z = _as_logits(z)
    p, tau = entmax15_sort_rows(z[None, :])
    return _entmax_result(p[0], tau[0])


# -- backward --------------------------------------------------------------


def entmax15_vjp_rows(p, g) -> np.ndarray:
    """g^T dp/dz per row, with dp/dz = diag(s) - s s^T / sum(s), s = sqrt(p)."""
    p, g = as_tensor(p), as_tensor(g)
    s = np.sqrt(np.maximum(p, 0.0))
    sg = s * g
    q = np.add.reduce(sg, axis=-1, keepdims=True) / np.add.reduce(s, axis=-1, keepdims=True)
    return sg - q * s


def softmax_vjp_rows(p, g) -> np.ndarray:
    p, g = as_tensor(p), as_tensor(g)
    return p * (g - np.add.reduce(g * p, axis=-1, keepdims=True))


def entmax15_vjp(result: NormalizerResult, upstream) -> np.ndarray:
    if result.kind is not Normalizer.ENTMAX15:
        raise ValueError("entmax15_vjp needs a result from an entmax forward")
    g = as_tensor(upstream)
    if g.shape != result.p.shape:
        raise ValueError(f"upstream shape {g.shape} vs output {result.p.shape}")
    return entmax15_vjp_rows(result.p[None, :], g[None, :])[0]


def softmax_vjp(result: NormalizerResult, upstream) -> np.ndarray:
    g = as_tensor(upstream)
    if g.shape != result.p.shape:
        raise ValueError(f"upstream shape {g.shape} vs output {result.p.shape}")
    return softmax_vjp_rows(result.p[None, :], g[None, :])[0]


# -- dispatch --------------------------------------------------------------


def normalize_rows(z, normalizer: Normalizer | str, solver: str = "sort") -> np.ndarray:
    """Normalize each row of a 2-D batch; entmax ``solver`` is ``sort`` or ``bisect``."""
    normalizer = Normalizer(normalizer)
    if normalizer is Normalizer.SOFTMAX:
        return softmax_rows(z)
    if solver == "sort":
        return entmax15_sort_rows(z)[0]
    if solver == "bisect":
        return entmax15_bisect_rows(z)[0]
    raise ValueError(f"unknown entmax solver {solver!r}")


def normalize_vjp_rows(p, g, normalizer: Normalizer | str) -> np.ndarray:
    if Normalizer(normalizer) is Normalizer.SOFTMAX:
        return softmax_vjp_rows(p, g)
    return entmax15_vjp_rows(p, g)


@dataclass(frozen=True)
class SupportStats:
    mean: float
    min: float
    max: float
    rows: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "min": self.min, "max": self.max, "rows": self.rows}


def support_stats(p_batch, atol: float = 1e-6) -> SupportStats:
    """Fraction of strictly positive entries per row, aggregated.

    Accepts any array whose last axis indexes the simplex (e.g. rows x n or
    heads x T x T).
    """
    p = as_tensor(p_batch)
    if p.ndim < 1 or p.shape[-1] < 1:
        raise ValueError(f"support_stats: bad shape {p.shape}")
    rows = p.reshape(-1, p.shape[-1])
    sums = np.add.reduce(rows, axis=1)
    bad = np.flatnonzero((rows.min(axis=1) < -atol) | (np.abs(sums - 1.0) > atol))
    if bad.size:
        r = int(bad[0])
        raise SimplexError(f"row {r} is off the simplex (sum={float(sums[r]):.6g}, min={float(rows[r].min()):.6g})")
    frac = (rows > 0).sum(axis=1) / rows.shape[1]
    return SupportStats(
        mean=float(frac.mean()), min=float(frac.min()), max=float(frac.max()), rows=rows.shape[0]
    )
