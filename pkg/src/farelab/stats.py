"""Paired sign-flip permutation tests, percentile bootstrap intervals and
Benjamini-Hochberg FDR control."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n_permutations: int
    exact: bool
    seed: int | None = None

    def to_dict(self):
        return {"statistic": self.statistic, "p_value": self.p_value,
                "n_permutations": self.n_permutations, "exact": self.exact, "seed": self.seed}


@dataclass(frozen=True)
class CIResult:
    low: float
    high: float
    level: float
    n_resamples: int
    seed: int | None = None

    def to_dict(self):
        return {"low": self.low, "high": self.high, "level": self.level,
                "n_resamples": self.n_resamples, "seed": self.seed}


def _sign_patterns(n: int) -> np.ndarray:
    return np.array(list(itertools.product((1.0, -1.0), repeat=n)))


def paired_permutation_test(diffs, n_perm: int = 10_000, seed: int = 0,
                            method: str = "auto", chunk: int = 2000) -> TestResult:
    """Two-sided sign-flip test of mean(diffs) = 0.

    ``method="auto"`` enumerates all ``2**n`` sign patterns when that is at most
    ``n_perm`` and otherwise draws ``n_perm`` random patterns, reporting
    ``(1 + hits) / (n_perm + 1)``.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    n = d.size
    if n == 0:
        raise ValueError("diffs must be non-empty")
    t_obs = d.mean()
    # relative slack so that sign patterns equal to the observed statistic up to
    # rounding count as ties
    thresh = abs(t_obs) * (1 - 1e-12) - 1e-300
    exact = method == "exact" or (method == "auto" and 2 ** n <= n_perm)
    if method not in ("auto", "exact", "monte_carlo"):
        raise ValueError(f"unknown method {method!r}")
    if exact:
        if n > 24:
            raise ValueError("exact enumeration is limited to n <= 24")
        t = _sign_patterns(n) @ d / n
        hits = int((np.abs(t) >= thresh).sum())
        return TestResult(float(t_obs), hits / 2 ** n, 2 ** n, True, None)
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        signs = rng.integers(0, 2, size=(m, n)) * 2.0 - 1.0
        hits += int((np.abs(signs @ d / n) >= thresh).sum())
        done += m
    return TestResult(float(t_obs), (1 + hits) / (n_perm + 1), n_perm, False, seed)


def bootstrap_ci(values, n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> CIResult:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("values must be non-empty")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    # constant data: rounding in the means must not widen the interval
    if np.ptp(x) == 0:
        lo = hi = x[0]
    return CIResult(float(lo), float(hi), level, n_resamples, seed)


def bh_correct(p_values, q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up rule.

    Returns ``(reject, adjusted)`` in the input order.
    """
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    m = p.size
    if m == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    order = np.argsort(p, kind="stable")
    ps = p[order]
    ranks = np.arange(1, m + 1)
    below = np.nonzero(ps <= ranks / m * q)[0]
    reject_sorted = np.zeros(m, dtype=bool)
    if below.size:
        reject_sorted[: below[-1] + 1] = True
    adj_sorted = np.minimum.accumulate((m / ranks * ps)[::-1])[::-1]
    adj_sorted = np.minimum(adj_sorted, 1.0)
    reject = np.empty(m, dtype=bool)
    adjusted = np.empty(m)
    reject[order] = reject_sorted
    adjusted[order] = adj_sorted
    return reject, adjusted
