import numpy as np
import pytest

from conftest import uniform_model
from farelab.arr import InterventionSpec, MaskSpec
from farelab.evaluation import (
    EvalBundle, endpoint_summary, evaluate, ppl_budget_check, preference_score, utility_accuracy,
)
from farelab.intervention import mask_experts
from farelab.model import InputError, sequence_log_likelihood, token_log_probs
from farelab.prompts import MCItem, MinimalPair, length_matched_subset
from farelab.sensitivity import SensitivityProfile

PAIRS = [MinimalPair((1, 2, 3), (1, 4, 3)), MinimalPair((5, 6), (5, 7)), MinimalPair((2, 9, 9, 1), (2, 8, 1))]


def test_all_ties_give_parity(small_model):
    r = preference_score(uniform_model(small_model), [MinimalPair((1, 2, 3), (4, 5, 6))] * 4)
    assert r.preference == 0.5 and r.n_ties == 4


def test_hand_built_pairs(small_model):
    expected = 0.0
    for p in PAIRS:
        d = sequence_log_likelihood(small_model, p.stereo) - sequence_log_likelihood(small_model, p.anti)
        expected += 1.0 if d > 0 else 0.5 if d == 0 else 0.0
    r = preference_score(small_model, PAIRS)
    assert r.preference == pytest.approx(expected / 3, abs=1e-15)
    assert r.n_pairs == 3 and len(r.per_pair_diffs) == 3
    assert 0 <= r.preference <= 1


def test_duplicates_and_reordering(small_model):
    base = preference_score(small_model, PAIRS).preference
    assert preference_score(small_model, PAIRS * 3).preference == base
    assert preference_score(small_model, PAIRS[::-1]).preference == base


def test_errors_name_pair_and_item(small_model):
    V = small_model.config.vocab_size
    with pytest.raises(InputError, match="minimal pair 1"):
        preference_score(small_model, [PAIRS[0], MinimalPair((1, V), (1, 2))])
    with pytest.raises(InputError):
        preference_score(small_model, [])
    items = [MCItem((1, 2), (3,), ((4,),)), MCItem((1, 2), (V,), ((4,),))]
    with pytest.raises(InputError, match="MC item 1"):
        utility_accuracy(small_model, items)
    with pytest.raises(InputError):
        utility_accuracy(small_model, [])


def test_utility_single_item_and_tie(small_model):
    q = (1, 2, 3)
    conts = [(4,), (5,), (6, 7)]
    scores = []
    for c in conts:
        lp = token_log_probs(small_model, [q + c])[0]
        scores.append(lp[len(q) - 1:].mean())
    best = int(np.argmax(scores))
    item = MCItem(q, conts[best], tuple(c for i, c in enumerate(conts) if i != best))
    assert utility_accuracy(small_model, [item]).accuracy == 1.0
    tie = MCItem(q, (4,), ((5,),))
    assert utility_accuracy(uniform_model(small_model), [tie]).accuracy == 0.0


def test_knowledge_masking_drops_accuracy(entangled_setup):
    setup, bundle = entangled_setup
    base = utility_accuracy(setup.model, bundle.items).accuracy
    masked = mask_experts(setup.model, MaskSpec(setup.truth.knowledge))
    assert base == 1.0
    assert utility_accuracy(masked, bundle.items).accuracy < base


def test_ppl_budget_examples():
    assert ppl_budget_check(10.0, 10.0, 0.0) == (True, 1.0)
    ok, ratio = ppl_budget_check(19.6, 10.0, 1.0)
    assert ok and ratio == pytest.approx(1.96)
    ok, ratio = ppl_budget_check(20.1, 10.0, 1.0)
    assert not ok and ratio == pytest.approx(2.01)


def test_lambda_zero_endpoints_equal_baseline(planted_small):
    setup, bundle = planted_small
    m = setup.model
    prof = SensitivityProfile(m.moe_layers, np.ones((len(m.moe_layers), m.config.n_experts)))
    base = evaluate(m, bundle)
    new = evaluate(m, bundle, InterventionSpec(m.moe_layers, 0.0, prof))
    assert new.preference.preference == base.preference.preference
    assert new.utility.accuracy == base.utility.accuracy
    assert new.ppl == base.ppl
    s = endpoint_summary(base, new)
    assert s["delta_preference_pts"] == 0 and s["delta_utility_pts"] == 0 and s["ppl_ratio"] == 1.0


def test_length_matched_bundle(planted_small):
    setup, bundle = planted_small
    mixed = EvalBundle(bundle.pairs + [MinimalPair((1, 2, 3), (1, 2))], bundle.items, bundle.ppl_corpus, True)
    assert mixed.preference_pairs() == length_matched_subset(mixed.pairs)
    assert len(mixed.preference_pairs()) == len(bundle.pairs)
    r = evaluate(setup.model, mixed)
    assert r.preference.n_pairs == len(bundle.pairs)


def test_planted_bundle_is_biased(planted_small):
    setup, bundle = planted_small
    assert preference_score(setup.model, bundle.pairs).preference > 0.5
