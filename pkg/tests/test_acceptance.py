"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the verdict lines; they are
written with output capture disabled.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest
from scipy.stats import kstest

from farelab import cli
from farelab.arr import InterventionSpec
from farelab.capture import aggregate, capture_run
from farelab.evaluation import evaluate
from farelab.intervention import LayerScore, aals_select, group_masking_experiment, pareto_from_curve, synthetic_ablation
from farelab.model import ModelConfig, build_model, forward_many
from farelab.planted import BiasPlant, PlantSpec, make_eval_bundle, oracle_activation_rates, planted_setup
from farelab.profiling import compute_metrics, entropy, fsp_score, jsd
from farelab.prompts import DEFAULT_PROFESSIONS, DEFAULT_TEMPLATES, default_descriptors, default_vocabulary, generate_suite
from farelab.sensitivity import ProfileTransform, SensitivityProfile
from farelab.stats import bh_correct, paired_permutation_test

FEMALE = ("gender", "female")


@pytest.fixture()
def verdict(capsys):
    def report(number: int, name: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n[acceptance {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"
    return report


def _profile(setup):
    return fsp_score(compute_metrics(aggregate(capture_run(setup.model, setup.suite))))


# 1 ---------------------------------------------------------------------------

def test_01_planted_recovery(verdict):
    planted = {3, 17, 29, 41, 58}
    worst_rank, worst_time, ok = 0, 0.0, True
    for seed in range(5):
        t0 = time.perf_counter()
        setup = planted_setup(PlantSpec.spread(2, sorted(planted), FEMALE, 0.05), axes=("gender",),
                              n_experts=64, top_k=8, n_layers=4, moe_layer_indices=(0, 1, 2, 3),
                              seed=seed, margin=2.0)
        prof = _profile(setup)
        order = list(np.argsort(-prof.phi[prof.layers.index(2)], kind="stable"))
        rank = max(order.index(e) for e in planted) + 1
        elapsed = time.perf_counter() - t0
        worst_rank, worst_time = max(worst_rank, rank), max(worst_time, elapsed)
        ok &= rank <= 10 and elapsed < 60
    verdict(1, "planted recovery", ok,
            f"worst rank of a planted expert {worst_rank} (<= 10), slowest seed {worst_time:.1f}s (< 60s), 5 seeds")


# 2 ---------------------------------------------------------------------------

def test_02_null_intervention_identity(verdict, planted_small):
    setup, bundle = planted_small
    model = setup.model
    rng = np.random.default_rng(0)
    prompts = [list(rng.integers(0, model.config.vocab_size, size=rng.integers(3, 12))) for _ in range(100)]
    layers, K = model.moe_layers, model.config.n_experts
    random_prof = SensitivityProfile(layers, rng.uniform(0, 3, size=(len(layers), K)))
    const_prof = SensitivityProfile(layers, np.full((len(layers), K), 0.8))
    base_runs = forward_many(model, prompts)
    base_ep = evaluate(model, bundle)
    worst = 0.0
    same_sets = True
    for spec in (InterventionSpec(layers, 0.0, random_prof), InterventionSpec(layers, 3.0, const_prof)):
        for b, n in zip(base_runs, forward_many(model, prompts, spec)):
            for rb, rn in zip(b.routing_records, n.routing_records):
                same_sets &= rb.selected == rn.selected
                worst = max(worst, float(np.abs(rb.probs - rn.probs).max()),
                            float(np.abs(rb.gate_weights - rn.gate_weights).max()))
            worst = max(worst, float(np.abs(b.next_token_log_probs - n.next_token_log_probs).max()))
        ep = evaluate(model, bundle, spec)
        worst = max(worst, abs(ep.preference.preference - base_ep.preference.preference),
                    abs(ep.utility.accuracy - base_ep.utility.accuracy), abs(ep.ppl - base_ep.ppl) / base_ep.ppl)
    verdict(2, "null-intervention identity", same_sets and worst <= 1e-9,
            f"max deviation {worst:.2e} (<= 1e-9), identical expert sets={same_sets}, 100 prompts")


# 3 ---------------------------------------------------------------------------

def test_03_masking_ordering(verdict, entangled_setup):
    setup, bundle = entangled_setup
    rows = {r.condition: abs(r.delta_utility) for r in
            group_masking_experiment(setup.model, _profile(setup), 10, 5, bundle)}
    top, rnd, bottom = rows["top"], rows["random (avg)"], rows["bottom"]
    verdict(3, "masking ordering", top > rnd > bottom,
            f"|dUtil| top {top:.1f} > random {rnd:.1f} > bottom {bottom:.1f} (pts, k=10)")


# 4 ---------------------------------------------------------------------------

def test_04_breadth_threshold(verdict):
    plants = [BiasPlant(l, e, FEMALE, 0.02) for l in (1, 2) for e in range(1, 31, 3)]
    spec = PlantSpec(biased_experts=plants, breadth=len(plants), knowledge_experts=[(1, 0), (2, 0)])
    setup = planted_setup(spec, axes=("gender",), n_experts=32, top_k=12, n_layers=3,
                          moe_layer_indices=(1, 2), seed=0)
    bundle = make_eval_bundle(setup)
    rows = synthetic_ablation(setup.model, _profile(setup),
                              [("top-5", ProfileTransform.top_k(5)), ("top-20", ProfileTransform.top_k(20))],
                              bundle, lam=1.0)
    d5, d20 = (abs(r.delta_preference) for r in rows)
    verdict(4, "breadth threshold", d5 < d20,
            f"|dPref| top-5 {d5:.2f} < top-20 {d20:.2f} (pts, lambda=1, 20 planted experts)")


# 5 ---------------------------------------------------------------------------

def test_05_permutation_exactness(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(20):
        d = rng.normal(0.3, 1.0, size=10)
        exact = paired_permutation_test(d, method="exact").p_value
        mc = paired_permutation_test(d, n_perm=10_000, seed=i, method="monte_carlo").p_value
        worst = max(worst, abs(exact - mc))
    verdict(5, "permutation exactness", worst <= 0.02, f"max |p_mc - p_exact| {worst:.4f} (<= 0.02), 20 instances")


# 6 ---------------------------------------------------------------------------

def test_06_null_calibration(verdict):
    rng = np.random.default_rng(6)
    ps = [paired_permutation_test(rng.normal(size=30), n_perm=10_000, seed=i).p_value for i in range(1000)]
    ks = kstest(ps, "uniform").statistic
    verdict(6, "null calibration", ks < 0.05, f"KS statistic {ks:.4f} (< 0.05), 1000 null datasets of n=30")


# 7 ---------------------------------------------------------------------------

def _brute_step_up(p, q):
    """Largest k with p_(k) <= k q / m by scanning every k; reject the k smallest."""
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    k_max = 0
    for k in range(1, m + 1):
        if p[order[k - 1]] <= k * q / m:
            k_max = k
    reject = [False] * m
    for i in order[:k_max]:
        reject[i] = True
    return reject


def test_07_bh_oracle(verdict):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        m = int(rng.integers(1, 11))
        p = rng.uniform(0, 0.2, size=m)
        p[rng.random(m) < 0.2] = 0.05  # exact ties and values on the boundary
        q = float(rng.choice([0.05, 0.1, 0.2]))
        reject, _ = bh_correct(p, q)
        mismatches += list(reject) != _brute_step_up(list(p), q)
    verdict(7, "BH oracle equivalence", mismatches == 0, f"{mismatches} mismatches over 1000 vectors")


# 8 ---------------------------------------------------------------------------

def test_08_metric_analytics(verdict):
    rng = np.random.default_rng(8)
    in_range, worst_asym = True, 0.0
    for _ in range(10_000):
        K = int(rng.integers(2, 17))
        p, q = rng.dirichlet(np.ones(K)), rng.dirichlet(np.ones(K))
        a, b = jsd(p, q), jsd(q, p)
        in_range &= 0.0 <= a <= 1.0
        worst_asym = max(worst_asym, abs(a - b))
    disjoint = jsd([1.0, 0.0], [0.0, 1.0])
    ent_err = max(abs(entropy(np.full(K, 1.0 / K)) - np.log2(K)) for K in (2, 3, 8, 64, 1000))
    ok = in_range and worst_asym <= 1e-12 and disjoint == 1.0 and ent_err <= 1e-12
    verdict(8, "metric analytics", ok,
            f"range ok={in_range}, max asymmetry {worst_asym:.1e}, jsd disjoint {disjoint!r}, entropy error {ent_err:.1e}")


# 9 ---------------------------------------------------------------------------

PARETO_CURVES = [
    # monotone curve, every point inside the budget: the point nearest parity
    (dict(lambdas=[0, 0.5, 1, 2], preferences=[0.70, 0.62, 0.55, 0.41], ppls=[10.0, 10.5, 11.0, 12.0]), 1.0),
    # infeasible tail: the two points closest to parity exceed 2x PPL
    (dict(lambdas=[0, 1, 2, 4], preferences=[0.70, 0.60, 0.52, 0.50], ppls=[10.0, 14.0, 20.5, 30.0]), 1.0),
    # budget boundary at beta=1: ratio 1.96 is feasible, 2.01 is not
    (dict(lambdas=[0, 1, 2], preferences=[0.70, 0.60, 0.45], ppls=[10.0, 19.6, 20.1]), 1.0),
]


def test_09_pareto_correctness(verdict):
    got = [pareto_from_curve(beta=1.0, **c).lambda_star for c, _ in PARETO_CURVES]
    want = [w for _, w in PARETO_CURVES]
    verdict(9, "Pareto search", got == want, f"lambda* {got}, hand-computed {want}")


# 10 --------------------------------------------------------------------------

def test_10_dual_path_oracle(verdict):
    rng = np.random.default_rng(10)
    vocab = default_vocabulary(n_subjects=2, n_answers=2)
    worst = 0.0
    for i in range(10):
        n_layers = int(rng.integers(1, 4))
        moe = tuple(sorted(rng.choice(n_layers, size=int(rng.integers(1, n_layers + 1)), replace=False).tolist()))
        K = int(rng.integers(4, 17))
        cfg = ModelConfig(vocab_size=len(vocab), d_model=int(rng.choice([8, 16])), n_layers=n_layers,
                          moe_layer_indices=moe, n_experts=K, top_k=int(rng.integers(1, K)),
                          n_shared=int(rng.integers(0, 2)), d_expert_hidden=8, seed=int(rng.integers(1000)))
        axes = [["gender"], ["race"], ["gender", "race"]][i % 3]
        suite = generate_suite(DEFAULT_TEMPLATES[: int(rng.integers(1, 4))],
                               DEFAULT_PROFESSIONS[: int(rng.integers(1, 5))], default_descriptors(axes), vocab)
        model = build_model(cfg)
        log = capture_run(model, suite)
        for mode in ("selection", "probability"):
            a, o = aggregate(log, mode), oracle_activation_rates(model, suite, mode)
            assert a.groups == o.groups
            for f in ("p_e", "p_e_given_g", "p_g", "p_neutral", "p_demo", "freq"):
                worst = max(worst, float(np.abs(getattr(a, f) - getattr(o, f)).max()))
    verdict(10, "dual-path oracle", worst <= 1e-12, f"max |aggregate - oracle| {worst:.1e} (<= 1e-12), 10 configs x 2 modes")


# 11 --------------------------------------------------------------------------

def test_11_end_to_end_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    sums = []
    for name in ("a", "b"):
        assert cli.main(["run-all", "--out-dir", str(tmp_path / name)]) == 0
        sums.append(json.loads((tmp_path / name / "report.json").read_text())["report_checksum"])
    elapsed = time.perf_counter() - t0
    verdict(11, "end-to-end determinism", sums[0] == sums[1] and elapsed < 300,
            f"checksums {sums[0][:12]} / {sums[1][:12]}, two runs in {elapsed:.1f}s (< 300s)")


# 12 --------------------------------------------------------------------------

AALS_FIXTURES = [
    # ratios, hand-computed selection (75th percentile, linear interpolation, strict >)
    ((1.0, 2.0, 3.0, 4.0), {3}),                         # threshold 3.25
    ((0.1, 9.0, 8.0, 0.2, 0.3, 0.4, 0.5, 0.6), {1, 2}),  # threshold 2.45
    ((4.0, 1.0, 3.0, 2.0, 5.0), {4}),                    # threshold 4.0; 4.0 itself is not above it
    ((-1.0, -3.0, 2.0, 2.0), {2}),                       # threshold 2.0, nothing above: best ratio, lowest id
    ((5.0, 5.0, 5.0, 5.0), {0}),                         # all ties: fallback to layer 0
]


def test_12_aals_quantile_rule(verdict):
    got = []
    for ratios, _ in AALS_FIXTURES:
        # delta_ppl = 0 turns each ratio into r / eps, which preserves order and ties
        sel = aals_select([LayerScore(i, r, 0.0) for i, r in enumerate(ratios)], quantile=0.75)
        got.append(set(sel.layers))
    want = [w for _, w in AALS_FIXTURES]
    verdict(12, "AALS quantile rule", got == want, f"selections {got}, hand-computed {want}")
