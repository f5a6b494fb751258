"""Log-domain probability primitives and deterministic splittable randomness.

Every distribution in this package lives in log space.  The helpers here are
the only place where normalization, sampling and KL arithmetic happen, so the
numerical conventions (max-shifted logsumexp, -inf for empty support, exactly
one uniform per categorical draw) are enforced in a single spot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_TOL = 1e-9
DRIFT_TOL = 1e-12


class ContractError(ValueError):
    """An operation was handed inputs that violate its contract."""


class DomainError(ValueError):
    """Support/domain mismatch, e.g. KL with q zero where p has mass."""


class ConfigError(ValueError):
    """Invalid experiment or game configuration."""


class SizeCapError(RuntimeError):
    """An enumeration was refused because it would exceed the size cap."""


class PropertyViolation(AssertionError):
    """A verified mathematical property failed beyond tolerance."""


def logsumexp(values) -> float:
    """Max-shifted log(sum(exp(values))) for a 1-D collection.

    Empty input raises ContractError; all -inf input returns -inf without
    warnings.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise ContractError("logsumexp expects a 1-D array, got shape %s" % (v.shape,))
    if v.size == 0:
        raise ContractError("logsumexp of an empty collection is undefined")
    m = np.max(v)
    if not np.isfinite(m):
        if m == -np.inf:
            return -np.inf
        raise ContractError("logsumexp input contains +inf or nan")
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_normalize(values) -> np.ndarray:
    """Shift a vector of log scores so it is a normalized log distribution."""
    v = np.asarray(values, dtype=float)
    z = logsumexp(v)
    if z == -np.inf:
        raise DomainError("cannot normalize a vector with zero total mass")
    return v - z


@dataclass(frozen=True)
class LogDist:
    """A normalized distribution stored as log probabilities.

    Entries may be -inf (zero mass).  Construction validates normalization to
    NORM_TOL; use from_logits / from_probs to build one from raw scores.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ContractError("LogDist needs a non-empty 1-D vector")
        if np.any(np.isnan(v)) or np.any(v == np.inf):
            raise ContractError("LogDist entries must be finite or -inf")
        if abs(logsumexp(v)) > NORM_TOL:
            raise ContractError(
                "LogDist not normalized: |logsumexp| = %.3e" % abs(logsumexp(v))
            )
        object.__setattr__(self, "values", v)

    @classmethod
    def from_logits(cls, logits) -> "LogDist":
        return cls(log_normalize(logits))

    @classmethod
    def from_probs(cls, probs) -> "LogDist":
        p = np.asarray(probs, dtype=float)
        if np.any(p < 0):
            raise ContractError("probabilities must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(log_normalize(np.log(p)))

    @classmethod
    def uniform(cls, n: int) -> "LogDist":
        return cls(np.full(n, -np.log(n)))

    def probs(self) -> np.ndarray:
        return np.exp(self.values)

    def __len__(self) -> int:
        return self.values.size


def sample_categorical(dist, rng, order=None) -> int:
    """Draw one index from a log distribution, consuming exactly one uniform.

    Args:
        dist: LogDist or 1-D array of normalized log probabilities
              (|logsumexp| <= NORM_TOL enforced).
        rng: RandomSource (or anything with .uniform()).
        order: optional permutation of the support; the cumulative walk
            visits indices in this order.  Permuting the distribution and
            walking in the permuted order yields the permuted sample for the
            same uniform draw, which is what the relabeling-equivariance
            checks rely on.
    """
    v = dist.values if isinstance(dist, LogDist) else np.asarray(dist, dtype=float)
    if abs(logsumexp(v)) > NORM_TOL:
        raise ContractError("sample_categorical requires a normalized log distribution")
    p = np.exp(v)
    u = rng.uniform()
    if order is None:
        cdf = np.cumsum(p)
        idx = int(np.searchsorted(cdf, u, side="right"))
        return min(idx, p.size - 1)
    order = np.asarray(order)
    cdf = np.cumsum(p[order])
    idx = int(np.searchsorted(cdf, u, side="right"))
    return int(order[min(idx, order.size - 1)])


def kl_divergence(p, q) -> float:
    """KL(p || q) for two normalized log distributions on the same support.

    q zero where p has mass raises DomainError.  The result is mathematically
    >= 0; tiny negatives from rounding (>-1e-12) are returned as computed.
    """
    pv = p.values if isinstance(p, LogDist) else np.asarray(p, dtype=float)
    qv = q.values if isinstance(q, LogDist) else np.asarray(q, dtype=float)
    if pv.shape != qv.shape:
        raise ContractError("KL needs equal-length distributions")
    for v in (pv, qv):
        if abs(logsumexp(v)) > NORM_TOL:
            raise ContractError("KL requires normalized log distributions")
    mask = pv > -np.inf
    if np.any(qv[mask] == -np.inf):
        raise DomainError("KL undefined: q has zero mass where p is positive")
    return float(np.sum(np.exp(pv[mask]) * (pv[mask] - qv[mask])))


def total_variation(p, q) -> float:
    """TV distance between two log distributions: max-event gap in [0, 1]."""
    pv = p.values if isinstance(p, LogDist) else np.asarray(p, dtype=float)
    qv = q.values if isinstance(q, LogDist) else np.asarray(q, dtype=float)
    return 0.5 * float(np.sum(np.abs(np.exp(pv) - np.exp(qv))))


@dataclass
class DirichletCounts:
    """Dirichlet pseudo-counts: a float prior plus integer observed counts.

    Integer counts are stored separately from the prior so that repeated
    increment/decrement round-trips stay exact and the sufficient-statistic
    audit can compare integers.
    """

    alpha: float
    counts: np.ndarray  # int64, >= 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.alpha <= 0:
            raise ContractError("Dirichlet concentration must be positive")
        if self.counts.ndim != 1 or np.any(self.counts < 0):
            raise ContractError("counts must be a non-negative 1-D vector")

    @classmethod
    def fresh(cls, size: int, alpha: float) -> "DirichletCounts":
        return cls(alpha, np.zeros(size, dtype=np.int64))

    def pseudo(self) -> np.ndarray:
        return self.counts + self.alpha

    def log_predictive(self) -> np.ndarray:
        """Log posterior-predictive of one categorical draw per outcome."""
        a = self.pseudo()
        return np.log(a) - np.log(a.sum())


@dataclass
class RandomSource:
    """Deterministic, splittable randomness backed by counter-based Philox.

    A single root seed plus an integer key path fully determines every draw.
    Sub-streams derived with substream() are independent of draws taken from
    the parent, so adding instrumentation that consumes randomness in one
    stream never perturbs another.
    """

    seed: int
    key: tuple = ()
    _gen: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *key) -> "RandomSource":
        """Derive an independent stream for the given integer key path."""
        ikey = tuple(int(k) for k in key)
        return RandomSource(self.seed, self.key + ikey)

    def uniform(self) -> float:
        return float(self._gen.random())

    def integers(self, low: int, high: int) -> int:
        """One integer in [low, high)."""
        return int(self._gen.integers(low, high))

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size=size)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(np.asarray(alpha, dtype=float))

    def multinomial(self, n: int, pvals) -> np.ndarray:
        return self._gen.multinomial(n, np.asarray(pvals, dtype=float))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
