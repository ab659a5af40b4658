"""Layer probing and selection, the constrained lambda search, hard expert
masking, and the masking / synthetic-profile ablation drivers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .arr import InterventionError, InterventionSpec, MaskSpec, arr_adjust
from .evaluation import EvalBundle, Endpoints, evaluate, ppl_budget_check, preference_score
from .model import ConfigError, Model, perplexity
from .sensitivity import ProfileTransform, SensitivityProfile, transform_profile

__all__ = [
    "arr_adjust", "InterventionError", "InterventionSpec", "MaskSpec", "ProfileTransform", "transform_profile",
    "LayerScore", "LayerSelection", "aals_probe", "aals_probe_all", "aals_select",
    "ParetoResult", "pareto_from_curve", "pareto_search", "DEFAULT_LAMBDA_GRID",
    "mask_experts", "group_masking_experiment", "synthetic_ablation", "TABLE5_CONDITIONS",
    "AblationRow", "write_ablation_csv",
]

EPS = 1e-6
DEFAULT_LAMBDA_MAX = 8.0
DEFAULT_LAMBDA_GRID = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, DEFAULT_LAMBDA_MAX)


@dataclass(frozen=True)
class LayerScore:
    layer: int
    delta_bias: float  # baseline preference - intervened preference
    delta_ppl: float  # intervened PPL - baseline PPL

    @property
    def ratio(self) -> float:
        return self.delta_bias / (abs(self.delta_ppl) + EPS)

    def to_dict(self):
        return {"layer": self.layer, "delta_bias": self.delta_bias,
                "delta_ppl": self.delta_ppl, "ratio": self.ratio}


def aals_probe(model: Model, validation: EvalBundle, layer: int, profile: SensitivityProfile,
               lambda_probe: float = 1.0, baseline: tuple[float, float] | None = None) -> LayerScore:
    """Apply the penalty at ``layer`` only and score the bias/perplexity trade-off.

    ``baseline`` may carry a precomputed ``(preference, ppl)`` pair.
    """
    pairs = validation.preference_pairs()
    if baseline is None:
        baseline = (preference_score(model, pairs).preference, perplexity(model, validation.ppl_corpus))
    spec = InterventionSpec({layer}, lambda_probe, profile)
    pref = preference_score(model, pairs, spec).preference
    ppl = perplexity(model, validation.ppl_corpus, spec)
    return LayerScore(layer, baseline[0] - pref, ppl - baseline[1])


def aals_probe_all(model, validation, profile, lambda_probe: float = 1.0, layers=None) -> list[LayerScore]:
    pairs = validation.preference_pairs()
    base = (preference_score(model, pairs).preference, perplexity(model, validation.ppl_corpus))
    layers = profile.layers if layers is None else layers
    return [aals_probe(model, validation, l, profile, lambda_probe, base) for l in layers]


@dataclass(frozen=True)
class LayerSelection:
    layers: frozenset
    threshold: float
    fallback: bool


def aals_select(scores: Sequence[LayerScore], quantile: float = 0.75) -> LayerSelection:
    """Layers whose ratio strictly exceeds the ``quantile`` (linear interpolation).

    If no layer clears the bar, the single best layer (lowest id on ties) is
    returned and ``fallback`` is set.
    """
    if not scores:
        raise ValueError("aals_select needs at least one layer score")
    r = np.array([s.ratio for s in scores])
    thr = float(np.percentile(r, 100 * quantile))
    chosen = frozenset(s.layer for s in scores if s.ratio > thr)
    if chosen:
        return LayerSelection(chosen, thr, False)
    best = max(scores, key=lambda s: (s.ratio, -s.layer))
    return LayerSelection(frozenset({best.layer}), thr, True)


@dataclass
class ParetoResult:
    lambda_star: float
    grid: list[dict]
    beta: float
    ppl_base: float

    @property
    def best(self) -> dict:
        return next(g for g in self.grid if g["lambda"] == self.lambda_star)

    def to_dict(self):
        return {"lambda_star": self.lambda_star, "beta": self.beta, "ppl_base": self.ppl_base,
                "grid": self.grid}


def pareto_from_curve(lambdas, preferences, ppls, beta: float = 1.0, ppl_base: float | None = None) -> ParetoResult:
    """Pick the feasible lambda closest to parity 0.5; ties go to the smaller lambda."""
    if len(lambdas) == 0:
        raise ConfigError("lambda grid is empty")
    rows = sorted(zip(map(float, lambdas), map(float, preferences), map(float, ppls)))
    if rows[0][0] != 0.0:
        raise ConfigError("lambda grid must contain 0")
    base = rows[0][2] if ppl_base is None else ppl_base
    grid = []
    for lam, pref, ppl in rows:
        feasible, ratio = ppl_budget_check(ppl, base, beta)
        grid.append({"lambda": lam, "preference": pref, "ppl": ppl, "ppl_ratio": ratio, "feasible": feasible})
    feas = [g for g in grid if g["feasible"]]
    star = min(feas, key=lambda g: (abs(g["preference"] - 0.5), g["lambda"]))
    return ParetoResult(star["lambda"], grid, beta, base)


def pareto_search(model: Model, bundle: EvalBundle, profile: SensitivityProfile, layers,
                  lambda_grid=DEFAULT_LAMBDA_GRID, beta: float = 1.0,
                  transform: ProfileTransform | None = None) -> ParetoResult:
    grid = sorted(float(x) for x in lambda_grid)
    if not grid:
        raise ConfigError("lambda grid is empty")
    if grid[0] != 0.0:
        raise ConfigError("lambda grid must contain 0")
    pairs = bundle.preference_pairs()
    transform = transform or ProfileTransform()
    prefs, ppls = [], []
    for lam in grid:
        spec = None if lam == 0 else InterventionSpec(layers, lam, profile, transform)
        prefs.append(preference_score(model, pairs, spec).preference)
        ppls.append(perplexity(model, bundle.ppl_corpus, spec))
    return pareto_from_curve(grid, prefs, ppls, beta)


def mask_experts(model: Model, spec: MaskSpec) -> Model:
    """Return a model handle whose router never selects the experts in ``spec``.

    Masks compose: masking an already-masked handle unions the two sets.
    """
    cfg = model.config
    masked = set(spec.masked)
    if model.mask is not None:
        masked |= set(model.mask.masked)
    for l, e in masked:
        if l not in cfg.moe_layer_indices:
            raise ConfigError(f"layer {l} is not an MoE layer")
        if not 0 <= e < cfg.n_experts:
            raise ConfigError(f"expert {e} is not a routed expert (shared experts cannot be masked)")
    for l in cfg.moe_layer_indices:
        left = cfg.n_experts - sum(1 for ll, _ in masked if ll == l)
        if left < cfg.top_k:
            raise ConfigError(
                f"masking leaves {left} selectable experts in layer {l}, fewer than top_k={cfg.top_k}"
            )
    return replace(model, mask=MaskSpec(frozenset(masked)))


@dataclass
class AblationRow:
    condition: str
    lam: float
    delta_preference: float  # percentage points
    delta_utility: float  # percentage points
    ppl_ratio: float
    seeds: tuple[int, ...] = ()
    preference: float = float("nan")
    utility: float = float("nan")
    runs: list = field(default_factory=list)

    def to_dict(self):
        return {"condition": self.condition, "lambda": self.lam,
                "delta_preference": self.delta_preference, "delta_utility": self.delta_utility,
                "ppl_ratio": self.ppl_ratio, "seeds": list(self.seeds),
                "preference": self.preference, "utility": self.utility}


def _row(label, lam, base: Endpoints, new: Endpoints, seeds=()):
    return AblationRow(
        label, lam,
        100.0 * (new.preference.preference - base.preference.preference),
        100.0 * (new.utility.accuracy - base.utility.accuracy),
        new.ppl / base.ppl, tuple(seeds), new.preference.preference, new.utility.accuracy,
    )


def _mean_row(label, lam, rows: list[AblationRow], seeds) -> AblationRow:
    out = AblationRow(
        label, lam,
        float(np.mean([r.delta_preference for r in rows])),
        float(np.mean([r.delta_utility for r in rows])),
        float(np.mean([r.ppl_ratio for r in rows])),
        tuple(seeds),
        float(np.mean([r.preference for r in rows])),
        float(np.mean([r.utility for r in rows])),
    )
    out.runs = rows
    return out


def group_masking_experiment(model: Model, profile: SensitivityProfile, group_size: int,
                             n_random_seeds: int, bundle: EvalBundle, seed: int = 0,
                             baseline: Endpoints | None = None) -> list[AblationRow]:
    """Mask the top / bottom ``group_size`` experts by score and random groups.

    Random groups are drawn uniformly over (layer, expert) pairs of the
    profile; a draw that would leave fewer than ``top_k`` selectable experts
    in some layer is redrawn from the same generator.
    """
    base = baseline or evaluate(model, bundle)
    if group_size == 0:
        zero = _row("top", 0.0, base, base)
        return [zero, replace(zero, condition="bottom"), replace(zero, condition="random (avg)")]
    top = profile.ranked_pairs(descending=True)[:group_size]
    bottom = profile.ranked_pairs(descending=False)[:group_size]
    rows = []
    for label, group in (("top", top), ("bottom", bottom)):
        rows.append(_row(label, 0.0, base, evaluate(mask_experts(model, MaskSpec(group)), bundle)))
    all_pairs = [(l, e) for l in profile.layers for e in range(profile.n_experts)]
    seeds = [seed + i for i in range(n_random_seeds)]
    runs = []
    cap = model.config.n_experts - model.config.top_k
    if group_size > cap * len(profile.layers):
        raise ConfigError(f"cannot mask {group_size} experts while keeping top_k selectable in every layer")
    for s in seeds:
        rng = np.random.default_rng(s)
        while True:  # redraw groups that would leave a layer with fewer than top_k experts
            pick = rng.choice(len(all_pairs), size=group_size, replace=False)
            group = [all_pairs[i] for i in pick]
            if max(sum(1 for l, _ in group if l == lid) for lid in profile.layers) <= cap:
                break
        runs.append(_row(f"random(seed={s})", 0.0, base, evaluate(mask_experts(model, MaskSpec(group)), bundle), (s,)))
    rows.append(_mean_row("random (avg)", 0.0, runs, seeds))
    return rows


TABLE5_CONDITIONS = (
    ("flatten", ProfileTransform.flatten()),
    ("random (5x avg)", ProfileTransform.random(0)),
    ("inverted", ProfileTransform.inverted()),
    ("alpha=0.25", ProfileTransform.power(0.25)),
    ("alpha=0.5", ProfileTransform.power(0.5)),
    ("alpha=1.0 (FSP)", ProfileTransform.identity()),
    ("alpha=2.0", ProfileTransform.power(2.0)),
    ("alpha=4.0", ProfileTransform.power(4.0)),
    ("top-5", ProfileTransform.top_k(5)),
    ("top-10", ProfileTransform.top_k(10)),
    ("top-25", ProfileTransform.top_k(25)),
    ("top-50", ProfileTransform.top_k(50)),
    ("top-100", ProfileTransform.top_k(100)),
)


def synthetic_ablation(model: Model, profile: SensitivityProfile, conditions, bundle: EvalBundle,
                       layers=None, lam: float = 1.0, n_random_seeds: int = 5,
                       baseline: Endpoints | None = None) -> list[AblationRow]:
    """Evaluate each ``(label, ProfileTransform)`` condition at fixed ``lam``.

    Random conditions are averaged over ``n_random_seeds`` consecutive seeds
    starting at the transform's own seed.
    """
    base = baseline or evaluate(model, bundle)
    layers = profile.layers if layers is None else layers
    rows = []
    for label, t in conditions:
        if t.kind == "random":
            seeds = [t.seed + i for i in range(n_random_seeds)]
            runs = [
                _row(f"{label} seed={s}", lam, base,
                     evaluate(model, bundle, InterventionSpec(layers, lam, profile, ProfileTransform.random(s))),
                     (s,))
                for s in seeds
            ]
            rows.append(_mean_row(label, lam, runs, seeds))
        else:
            spec = InterventionSpec(layers, lam, profile, t)
            rows.append(_row(label, lam, base, evaluate(model, bundle, spec)))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "lambda", "delta_preference", "delta_utility", "ppl_ratio", "seeds"])
        for r in rows:
            w.writerow([r.condition, repr(r.lam), repr(r.delta_preference), repr(r.delta_utility),
                        repr(r.ppl_ratio), " ".join(map(str, r.seeds))])
