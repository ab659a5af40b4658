import csv

import numpy as np
import pytest
from scipy.special import softmax

from farelab.arr import InterventionError, InterventionSpec, MaskSpec, arr_adjust
from farelab.evaluation import evaluate
from farelab.intervention import (
    DEFAULT_LAMBDA_GRID, TABLE5_CONDITIONS, LayerScore, aals_probe, aals_probe_all, aals_select,
    group_masking_experiment, mask_experts, pareto_from_curve, pareto_search, synthetic_ablation,
    write_ablation_csv,
)
from farelab.model import ConfigError, ModelConfig, build_model, forward
from farelab.sensitivity import ProfileTransform, SensitivityProfile, transform_profile


def _rand_profile(layers, K, seed=0):
    return SensitivityProfile(tuple(layers), np.random.default_rng(seed).uniform(0, 2, size=(len(layers), K)))


# --- arr_adjust --------------------------------------------------------------

def test_arr_identity_at_zero():
    z = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(arr_adjust(z, [5, 1, 2], 0.0), z)


def test_arr_constant_profile_keeps_routing():
    z = np.random.default_rng(0).normal(size=8)
    np.testing.assert_allclose(softmax(arr_adjust(z, np.full(8, 0.7), 3.0)), softmax(z), atol=1e-12)


def test_arr_hand_example():
    out = arr_adjust([1.0, 0.0], [1.0, 0.0], 1.0)
    np.testing.assert_array_equal(out, [0.0, 0.0])
    np.testing.assert_allclose(softmax(out), [0.5, 0.5])


def test_arr_errors_and_shared_entries():
    with pytest.raises(InterventionError):
        arr_adjust([1.0, 2.0], [1.0], 1.0)
    with pytest.raises(InterventionError):
        arr_adjust([1.0], [1.0], -0.5)
    z = np.array([1.0, 2.0, 3.0])
    out = arr_adjust(z, [1.0, 1.0, 1.0], 2.0, shared_mask=[2])
    assert out[2] == z[2]
    np.testing.assert_array_equal(out[:2], z[:2] - 2.0)


def test_profiles_equal_up_to_layer_constant_route_identically(small_model):
    p = _rand_profile(small_model.moe_layers, small_model.config.n_experts)
    shifted = p.with_phi(p.phi + np.array([[0.3], [1.7]]))
    a = forward(small_model, [1, 2, 3, 4, 5], InterventionSpec(p.layers, 1.5, p))
    b = forward(small_model, [1, 2, 3, 4, 5], InterventionSpec(p.layers, 1.5, shifted))
    for ra, rb in zip(a.routing_records, b.routing_records):
        np.testing.assert_allclose(ra.probs, rb.probs, atol=1e-9)
        assert ra.selected == rb.selected


# --- profile transforms ------------------------------------------------------

def test_flatten_leaves_routing_unchanged(small_model):
    p = _rand_profile(small_model.moe_layers, small_model.config.n_experts)
    spec = InterventionSpec(p.layers, 4.0, p, ProfileTransform.flatten())
    base = forward(small_model, [3, 1, 4, 1, 5])
    new = forward(small_model, [3, 1, 4, 1, 5], spec)
    for rb, rn in zip(base.routing_records, new.routing_records):
        assert rb.selected == rn.selected
        np.testing.assert_allclose(rb.gate_weights, rn.gate_weights, atol=1e-12)
    np.testing.assert_allclose(base.next_token_log_probs, new.next_token_log_probs, atol=1e-12)


def test_inverted_twice_restores_ranks():
    p = _rand_profile((0, 1, 2), 16, seed=4)
    inv = transform_profile(p, ProfileTransform.inverted())
    assert inv.ranked_pairs() == p.ranked_pairs(descending=False)
    twice = transform_profile(inv, ProfileTransform.inverted())
    assert twice.ranked_pairs() == p.ranked_pairs()
    np.testing.assert_allclose(twice.phi - p.phi, twice.phi.max() - p.phi.max())


def test_topk_counts_and_clipping():
    p = _rand_profile((0, 1, 2), 64, seed=1)
    t5 = transform_profile(p, ProfileTransform.top_k(5))
    assert np.count_nonzero(t5.phi) == 5
    keep = set(p.ranked_pairs()[:5])
    for i, l in enumerate(p.layers):
        for e in range(64):
            assert (t5.phi[i, e] > 0) == ((l, e) in keep)
    big = transform_profile(p, ProfileTransform.top_k(1000))
    assert big.provenance["topk_clipped"] and np.array_equal(big.phi, p.phi)
    per = transform_profile(p, ProfileTransform.top_k(4, per_layer=True))
    assert [np.count_nonzero(r) for r in per.phi] == [4, 4, 4]


def test_power_and_random_transforms():
    p = SensitivityProfile((0, 1), np.array([[1.0, 2.0, 3.0], [0.0, 5.0, 10.0]]))
    sq = transform_profile(p, ProfileTransform.power(2.0))
    np.testing.assert_allclose(sq.phi, [[0.0, 0.75, 3.0], [0.0, 2.5, 10.0]])
    assert transform_profile(p, ProfileTransform.power(1.0)).phi.max() == 10.0
    r = transform_profile(p, ProfileTransform.random(3))
    assert np.all((r.phi >= 0) & (r.phi <= 10.0))
    assert np.array_equal(r.phi, transform_profile(p, ProfileTransform.random(3)).phi)
    assert transform_profile(p, ProfileTransform.identity()) is p
    flat = transform_profile(p, ProfileTransform.flatten())
    assert np.all(flat.phi == p.phi.mean())


# --- AALS ----------------------------------------------------------------------

def test_ratio_hand_value():
    assert LayerScore(0, 0.04, 0.02).ratio == pytest.approx(1.99990, abs=1e-5)
    assert LayerScore(0, 0.04, -0.02).ratio == LayerScore(0, 0.04, 0.02).ratio


def test_probe_with_zero_profile(planted_small):
    setup, bundle = planted_small
    zero = SensitivityProfile.zeros(setup.model.moe_layers, setup.model.config.n_experts)
    s = aals_probe(setup.model, bundle, setup.model.moe_layers[0], zero)
    assert (s.delta_bias, s.delta_ppl, s.ratio) == (0.0, 0.0, 0.0)


def test_probe_is_layer_local(small_model):
    p = _rand_profile(small_model.moe_layers, small_model.config.n_experts)
    later = small_model.moe_layers[1]
    spec = InterventionSpec({later}, 2.0, p)
    base = forward(small_model, [1, 2, 3, 4]).routing_records
    new = forward(small_model, [1, 2, 3, 4], spec).routing_records
    for b, n in zip(base, new):
        if n.layer_id != later:
            np.testing.assert_array_equal(b.probs, n.probs)
            np.testing.assert_array_equal(n.gate_logits, n.raw_logits)


@pytest.mark.parametrize("ratios, expected, fallback", [
    ((1, 2, 3, 4), {3}, False),
    ((5, 5, 5, 5), {0}, True),
    ((7,), {0}, True),
    ((0.1, 9.0, 8.0, 0.2, 0.3, 0.4, 0.5, 0.6), {1, 2}, False),
    ((-1.0, -3.0, 2.0, 2.0), {2}, True),
])
def test_aals_select_fixtures(ratios, expected, fallback):
    scores = [LayerScore(i, r, 0.0) for i, r in enumerate(ratios)]
    # with delta_ppl = 0 the ratio is r / 1e-6; ranks and percentile scale together
    sel = aals_select(scores)
    assert set(sel.layers) == expected
    assert sel.fallback == fallback


def test_aals_select_threshold_value():
    scores = [LayerScore(i, r * 1e-6, 0.0) for i, r in enumerate((1, 2, 3, 4))]
    assert aals_select(scores).threshold == pytest.approx(3.25)
    with pytest.raises(ValueError):
        aals_select([])


def test_probe_all_on_planted(planted_small):
    setup, bundle = planted_small
    from farelab.capture import aggregate, capture_run
    from farelab.profiling import compute_metrics, fsp_score
    prof = fsp_score(compute_metrics(aggregate(capture_run(setup.model, setup.suite))))
    scores = aals_probe_all(setup.model, bundle, prof)
    assert [s.layer for s in scores] == list(setup.model.moe_layers)
    assert scores[0].delta_bias > 0


# --- Pareto ----------------------------------------------------------------------

def test_pareto_singleton_grid():
    r = pareto_from_curve([0.0], [0.7], [10.0])
    assert r.lambda_star == 0.0 and r.best["preference"] == 0.7


def test_pareto_constructed_curves():
    r = pareto_from_curve([0, 0.5, 1.0], [0.68, 0.61, 0.52], [10.0, 11.0, 12.0], beta=1.0)
    assert r.lambda_star == 1.0
    r = pareto_from_curve([0, 0.5, 1.0], [0.68, 0.61, 0.52], [10.0, 11.0, 25.0], beta=1.0)
    assert r.lambda_star == 0.5
    assert [g["feasible"] for g in r.grid] == [True, True, False]
    r = pareto_from_curve([0, 1, 2], [0.7, 0.6, 0.45], [10.0, 19.6, 20.1], beta=1.0)
    assert r.lambda_star == 1.0  # 1.96x feasible, 2.01x is not


def test_pareto_ties_and_order_independence():
    r = pareto_from_curve([1.0, 0.0, 0.5], [0.375, 0.7, 0.625], [10, 10, 10])
    assert r.lambda_star == 0.5
    assert [g["lambda"] for g in r.grid] == [0.0, 0.5, 1.0]
    with pytest.raises(ConfigError):
        pareto_from_curve([], [], [])
    with pytest.raises(ConfigError):
        pareto_from_curve([0.5], [0.5], [1.0])


def test_pareto_search_on_model(planted_small):
    setup, bundle = planted_small
    prof = _rand_profile(setup.model.moe_layers, setup.model.config.n_experts)
    r0 = pareto_search(setup.model, bundle, prof, setup.model.moe_layers, [0.0])
    assert r0.lambda_star == 0.0
    r = pareto_search(setup.model, bundle, prof, setup.model.moe_layers, [0.0, 1.0, 0.5])
    again = pareto_search(setup.model, bundle, prof, setup.model.moe_layers, [1.0, 0.5, 0.0])
    assert r.to_dict() == again.to_dict()
    assert r.grid[0]["ppl"] == evaluate(setup.model, bundle).ppl
    assert len(DEFAULT_LAMBDA_GRID) == 13 and DEFAULT_LAMBDA_GRID[0] == 0.0
    with pytest.raises(ConfigError):
        pareto_search(setup.model, bundle, prof, setup.model.moe_layers, [])


# --- masking ---------------------------------------------------------------------

def test_empty_mask_is_identity(small_model):
    m = mask_experts(small_model, MaskSpec())
    np.testing.assert_array_equal(forward(m, [1, 2, 3]).next_token_log_probs,
                                  forward(small_model, [1, 2, 3]).next_token_log_probs)


def test_masked_expert_never_selected(small_model):
    m = mask_experts(small_model, MaskSpec({(l, 2) for l in small_model.moe_layers}))
    for r in forward(m, [1, 2, 3, 4, 5, 6, 7]).routing_records:
        assert 2 not in r.selected
        assert r.gate_logits[2] == -np.inf


def test_mask_leaving_too_few_experts(vocab):
    m = build_model(ModelConfig(vocab_size=len(vocab), n_experts=4, top_k=2, n_layers=1, moe_layer_indices=(0,)))
    with pytest.raises(ConfigError, match="fewer than top_k"):
        mask_experts(m, MaskSpec({(0, 0), (0, 1), (0, 2)}))
    with pytest.raises(ConfigError):
        mask_experts(m, MaskSpec({(0, 7)}))
    with pytest.raises(ConfigError):
        mask_experts(mask_experts(m, MaskSpec({(0, 0), (0, 1)})), MaskSpec({(0, 2)}))


def test_mask_composes_with_arr(small_model):
    p = _rand_profile(small_model.moe_layers, small_model.config.n_experts)
    spec = InterventionSpec(p.layers, 1.3, p)
    a = forward(mask_experts(small_model, MaskSpec()), [4, 5, 6], spec).next_token_log_probs
    b = forward(small_model, [4, 5, 6], spec).next_token_log_probs
    np.testing.assert_array_equal(a, b)
    masked = mask_experts(small_model, MaskSpec({(small_model.moe_layers[0], 0)}))
    for r in forward(masked, [4, 5, 6], spec).routing_records:
        assert 0 not in r.selected or r.layer_id != small_model.moe_layers[0]


def test_shared_experts_unaffected_by_masking(shared_model):
    lid = shared_model.moe_layers[0]
    lw = shared_model.layers[lid]
    routed_off = shared_model.with_layer(lid, w2=np.zeros_like(lw.w2), b2=np.zeros_like(lw.b2))
    masked = mask_experts(routed_off, MaskSpec({(lid, e) for e in range(3)}))
    np.testing.assert_allclose(forward(masked, [1, 2, 3]).next_token_log_probs,
                               forward(routed_off, [1, 2, 3]).next_token_log_probs, atol=1e-12)


# --- experiment drivers ----------------------------------------------------------

def test_group_masking_zero_size(planted_small):
    setup, bundle = planted_small
    prof = _rand_profile(setup.model.moe_layers, setup.model.config.n_experts)
    rows = group_masking_experiment(setup.model, prof, 0, 5, bundle)
    assert all(r.delta_utility == 0 and r.delta_preference == 0 for r in rows)


def test_group_masking_random_mean(planted_small):
    setup, bundle = planted_small
    prof = _rand_profile(setup.model.moe_layers, setup.model.config.n_experts, seed=2)
    rows = group_masking_experiment(setup.model, prof, 3, 5, bundle)
    labels = [r.condition for r in rows]
    assert labels == ["top", "bottom", "random (avg)"]
    rnd = rows[2]
    assert len(rnd.runs) == 5 and rnd.seeds == (0, 1, 2, 3, 4)
    assert rnd.delta_utility == pytest.approx(np.mean([r.delta_utility for r in rnd.runs]))
    assert rnd.delta_preference == pytest.approx(np.mean([r.delta_preference for r in rnd.runs]))
    with pytest.raises(ConfigError):
        group_masking_experiment(setup.model, prof, 100, 1, bundle)


def test_table5_conditions_and_flatten(planted_small, tmp_path):
    setup, bundle = planted_small
    from farelab.capture import aggregate, capture_run
    from farelab.profiling import compute_metrics, fsp_score
    prof = fsp_score(compute_metrics(aggregate(capture_run(setup.model, setup.suite))))
    assert len(TABLE5_CONDITIONS) == 13
    rows = synthetic_ablation(setup.model, prof, TABLE5_CONDITIONS, bundle, lam=1.0)
    assert [r.condition for r in rows] == [c for c, _ in TABLE5_CONDITIONS]
    flat = rows[0]
    assert flat.delta_preference == 0.0 and flat.delta_utility == 0.0
    assert rows[1].seeds == (0, 1, 2, 3, 4) and len(rows[1].runs) == 5
    write_ablation_csv(rows, tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["condition", "lambda", "delta_preference", "delta_utility", "ppl_ratio", "seeds"]
    assert len(table) == 14
