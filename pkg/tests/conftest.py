"""Shared fixtures: small random models, a prompt suite and planted setups."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from farelab.model import ModelConfig, build_model
from farelab.planted import PlantSpec, make_eval_bundle, planted_setup
from farelab.prompts import (
    DEFAULT_PROFESSIONS, DEFAULT_TEMPLATES, default_descriptors, default_vocabulary, generate_suite,
)


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary(n_subjects=4, n_answers=4)


@pytest.fixture(scope="session")
def small_suite(vocab):
    return generate_suite(DEFAULT_TEMPLATES[:2], DEFAULT_PROFESSIONS[:3], default_descriptors(["gender"]), vocab)


@pytest.fixture(scope="session")
def small_model(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=2, moe_layer_indices=(0, 1),
                      n_experts=6, top_k=2, d_expert_hidden=8, seed=3)
    return build_model(cfg)


@pytest.fixture(scope="session")
def shared_model(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=2, moe_layer_indices=(1,),
                      n_experts=6, top_k=2, n_shared=2, d_expert_hidden=8, seed=5)
    return build_model(cfg)


def uniform_model(model):
    """Same architecture with a zero output head, so every next-token
    distribution is uniform."""
    return replace(model, unembed=np.zeros_like(model.unembed))


@pytest.fixture(scope="session")
def planted_small():
    """Two gender plants in the single MoE layer of a small model."""
    spec = PlantSpec.spread(1, [2, 5], ("gender", "female"), 0.05)
    setup = planted_setup(spec, axes=("gender",), n_templates=2, n_professions=6, seed=0,
                          n_experts=12, top_k=4, n_layers=2, moe_layer_indices=(1,),
                          d_model=24, d_expert_hidden=8)
    return setup, make_eval_bundle(setup)


@pytest.fixture(scope="session")
def entangled_setup():
    """Ten entangled plants in one layer: the biased experts also carry the facts."""
    spec = PlantSpec.spread(1, list(range(1, 31, 3)), ("gender", "female"), 0.05, entangled=True)
    setup = planted_setup(spec, axes=("gender",), seed=0, n_experts=32, top_k=12, n_layers=2,
                          moe_layer_indices=(1,))
    return setup, make_eval_bundle(setup)
