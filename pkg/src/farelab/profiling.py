"""Routing metrics (ARD, JSD, PMI, entropy), per-layer normalisation, the
weighted sensitivity score, and descriptive routing statistics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .capture import ActivationStats
from .sensitivity import SensitivityProfile

PROB_FLOOR = 1e-6


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricWeights:
    ard: float = 1.0
    jsd: float = 0.5
    pmi: float = 0.3
    ent: float = 0.0

    def __post_init__(self):
        vals = (self.ard, self.jsd, self.pmi, self.ent)
        if any(v < 0 for v in vals):
            raise MetricError("metric weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise MetricError("at least one metric weight must be positive")

    def to_dict(self):
        return {"ard": self.ard, "jsd": self.jsd, "pmi": self.pmi, "ent": self.ent}


@dataclass
class MetricTensor:
    """Raw metrics for one :class:`ActivationStats`.

    ``ard`` and ``pmi`` are indexed (layer, expert, group); ``jsd`` (layer,
    group); ``entropy`` (layer, condition) with condition 0 the neutral
    baseline and condition ``g + 1`` group ``g``.
    """

    layers: tuple[int, ...]
    groups: list[tuple[str, str]]
    ard: np.ndarray
    jsd: np.ndarray
    pmi: np.ndarray
    entropy: np.ndarray


def _as_distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise MetricError(f"{name} is not a probability distribution (sum={p.sum():.8g})")
    return p


def entropy(p) -> float:
    """Shannon entropy in bits, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def _kl_to_mid(p, q):
    """``KL(p || (p + q) / 2)`` in bits. The ratio is formed as ``2p / (p + q)``
    so that subnormal entries cannot underflow the midpoint to zero."""
    nz = p > 0
    return float((p[nz] * np.log2(2.0 * p[nz] / (p[nz] + q[nz]))).sum())


def jsd(p_d, p_n) -> float:
    """Jensen-Shannon divergence in bits (so the result lies in [0, 1])."""
    p = _as_distribution(p_d, "P_d")
    q = _as_distribution(p_n, "P_n")
    if p.shape != q.shape:
        raise MetricError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    val = 0.5 * _kl_to_mid(p, q) + 0.5 * _kl_to_mid(q, p)
    return float(min(max(val, 0.0), 1.0))


def ard(stats: ActivationStats) -> np.ndarray:
    """``|P(e|g) - P(e)|`` shaped (layer, expert, group)."""
    return np.abs(stats.p_e_given_g - stats.p_e[None]).transpose(1, 2, 0)


def pmi(stats: ActivationStats, floor: float = PROB_FLOOR, form: str = "paper") -> np.ndarray:
    """``log2(P(e|g) / (P(e) P(g)))`` shaped (layer, expert, group).

    Probabilities are clamped to ``floor`` before the ratio. ``form="standard"``
    drops ``P(g)`` from the denominator (textbook PMI).
    """
    peg = np.maximum(stats.p_e_given_g, floor)
    pe = np.maximum(stats.p_e, floor)[None]
    if form == "paper":
        pg = np.maximum(stats.p_g, floor)[:, None, None]
        val = np.log2(peg / (pe * pg))
    elif form == "standard":
        val = np.log2(peg / pe)
    else:
        raise MetricError(f"unknown PMI form {form!r}")
    return val.transpose(1, 2, 0)


def compute_metrics(stats: ActivationStats, floor: float = PROB_FLOOR, pmi_form: str = "paper") -> MetricTensor:
    L, G = len(stats.layers), len(stats.groups)
    js = np.zeros((L, G))
    ent = np.zeros((L, G + 1))
    for i in range(L):
        ent[i, 0] = entropy(stats.p_neutral[i])
        for g in range(G):
            js[i, g] = jsd(stats.p_demo[g, i], stats.p_neutral[i])
            ent[i, g + 1] = entropy(stats.p_demo[g, i])
    return MetricTensor(stats.layers, list(stats.groups), ard(stats), js, pmi(stats, floor, pmi_form), ent)


def normalize_per_layer(values) -> np.ndarray:
    """Min-max scale each layer (axis 0) to [0, 1]; constant layers become 0."""
    x = np.asarray(values, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    out = np.zeros_like(flat)
    np.divide(flat - lo, span, out=out, where=span > 0)
    return np.clip(out, 0.0, 1.0).reshape(x.shape)


def _normalize_across_layers(v: np.ndarray) -> np.ndarray:
    # one value per layer: scaling happens across the layer axis
    return normalize_per_layer(v[None, :])[0]


def collapse_groups(values: np.ndarray, rule: str = "mean") -> np.ndarray:
    if rule == "mean":
        return values.mean(axis=-1)
    if rule == "max":
        return values.max(axis=-1)
    raise MetricError(f"unknown group-collapse rule {rule!r}")


def fsp_combine(ard_hat, jsd_hat, pmi_hat, ent_hat, weights: MetricWeights) -> np.ndarray:
    """Weighted sum of normalised metrics; layer-level terms broadcast over experts."""
    ard_hat = np.asarray(ard_hat, dtype=np.float64)
    phi = weights.ard * ard_hat + weights.pmi * np.asarray(pmi_hat, dtype=np.float64)
    phi = phi + weights.jsd * np.asarray(jsd_hat, dtype=np.float64)[..., None]
    phi = phi + weights.ent * np.asarray(ent_hat, dtype=np.float64)[..., None]
    return phi


def fsp_score(metrics: MetricTensor, weights: MetricWeights | None = None, collapse: str = "mean",
              log_id: str = "", aggregation: str = "selection") -> SensitivityProfile:
    """Sensitivity score per (layer, expert).

    ARD and PMI are collapsed over groups and min-max normalised within each
    layer. JSD and the entropy shift are per-layer scalars: they are collapsed
    over groups, min-max scaled across layers, and added to every expert of the
    layer.
    """
    weights = weights or MetricWeights()
    ard_hat = normalize_per_layer(collapse_groups(metrics.ard, collapse))
    pmi_hat = normalize_per_layer(collapse_groups(metrics.pmi, collapse))
    jsd_hat = _normalize_across_layers(collapse_groups(metrics.jsd, collapse))
    ent_shift = np.abs(metrics.entropy[:, 1:] - metrics.entropy[:, :1])
    ent_hat = _normalize_across_layers(collapse_groups(ent_shift, collapse))
    phi = fsp_combine(ard_hat, jsd_hat, pmi_hat, ent_hat, weights)
    return SensitivityProfile(
        metrics.layers,
        phi,
        {
            "weights": weights.to_dict(),
            "collapse": collapse,
            "aggregation": aggregation,
            "log_id": log_id,
        },
    )


@dataclass
class DescriptiveStats:
    gini_per_layer: np.ndarray
    gini: float
    top10_share: float
    rho: float
    top_n: int = 10
    top_n_flag: bool = False

    def to_dict(self):
        return {
            "gini_per_layer": self.gini_per_layer.tolist(),
            "gini": self.gini,
            "top10_share": self.top10_share,
            "rho": self.rho,
            "top_n": self.top_n,
            "top_n_flag": self.top_n_flag,
        }


def gini(x) -> float:
    """Gini coefficient, mean-absolute-difference form."""
    x = np.asarray(x, dtype=np.float64).ravel()
    mean = x.mean()
    if mean == 0:
        return 0.0
    mad = np.abs(x[:, None] - x[None, :]).sum()
    return float(mad / (2 * x.size ** 2 * mean))


def top_share(x, n: int = 10) -> tuple[float, bool]:
    x = np.asarray(x, dtype=np.float64).ravel()
    flag = x.size < n
    top = np.sort(x)[::-1][: min(n, x.size)]
    return float(top.sum() / x.sum()), flag


def descriptive_stats(stats: ActivationStats, profile: SensitivityProfile, top_n: int = 10) -> DescriptiveStats:
    f = stats.freq
    per_layer = np.array([gini(row) for row in f])
    share, flag = top_share(f, top_n)
    a, b = profile.phi.ravel(), f.ravel()
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        rho = 0.0
    else:
        rho = float(spearmanr(a, b).statistic)
    return DescriptiveStats(per_layer, gini(f), share, rho, top_n, flag)


# --- export ------------------------------------------------------------------

def write_metrics_csv(metrics: MetricTensor, profile: SensitivityProfile, path) -> None:
    """One row per (layer, expert): group-mean ARD/PMI, layer JSD/entropy, phi."""
    ard_m = metrics.ard.mean(axis=-1)
    pmi_m = metrics.pmi.mean(axis=-1)
    jsd_m = metrics.jsd.mean(axis=-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "expert", "ard", "pmi", "jsd", "entropy_neutral", "phi"])
        for i, lid in enumerate(metrics.layers):
            for e in range(ard_m.shape[1]):
                w.writerow([lid, e, repr(float(ard_m[i, e])), repr(float(pmi_m[i, e])),
                            repr(float(jsd_m[i])), repr(float(metrics.entropy[i, 0])),
                            repr(float(profile.phi[i, e]))])


def write_profile_json(profile: SensitivityProfile, path) -> None:
    with open(path, "w") as fh:
        json.dump(profile.to_dict(), fh, sort_keys=True, indent=1)


def read_profile_json(path) -> SensitivityProfile:
    with open(path) as fh:
        return SensitivityProfile.from_dict(json.load(fh))
