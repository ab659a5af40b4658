"""Toy models with known expert-group associations and knowledge-critical
experts, plus a direct-counting oracle for activation rates.

Biases are planted by router surgery: each biased expert's router row gains a
component along its target group's descriptor embeddings, and the scale is
raised step by step until the measured activation shift reaches the requested
``delta``. A small group channel supports this. Attention up to the deepest
planted layer copies the group directions forward from the descriptor token,
and every router is projected off those directions so that only planted rows
respond to group identity. Biased experts also carry a constant output push towards the
group's stereotyped professions, which is what the minimal pairs detect.
Knowledge experts are routed by fact subject tokens and write the answer
token's unembedding direction, so removing them breaks the planted facts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .capture import ActivationStats, aggregate, capture_run
from .evaluation import EvalBundle
from .model import ConfigError, Model, ModelConfig, build_model, forward
from .prompts import (
    DEFAULT_PROFESSIONS, DEFAULT_TEMPLATES, Descriptor, MCItem, MinimalPair, PromptSet, Vocabulary,
    default_descriptors, default_vocabulary, generate_suite, make_item, make_pair,
)


@dataclass(frozen=True)
class BiasPlant:
    layer: int
    expert: int
    group: tuple[str, str]  # (axis, group)
    delta: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "group", tuple(self.group))
        if not self.delta > 0:
            raise ConfigError("planted shift delta must be positive")


@dataclass(frozen=True)
class PlantSpec:
    biased_experts: tuple[BiasPlant, ...] = ()
    knowledge_experts: tuple[tuple[int, int], ...] = ()
    entangled: bool = False
    breadth: int = 1
    n_facts: int = 0
    push: float = 6.0  # nats added to stereotyped professions, split over the group's experts
    knowledge_push: float = 10.0
    channel_gain: float = 1.0
    stereotypes: dict = field(default_factory=dict)  # group label -> profession words

    def __post_init__(self):
        object.__setattr__(self, "biased_experts", tuple(self.biased_experts))
        object.__setattr__(self, "knowledge_experts", tuple(tuple(x) for x in self.knowledge_experts))
        if self.breadth < 1:
            raise ConfigError("breadth must be >= 1")

    @property
    def knowledge_set(self) -> list[tuple[int, int]]:
        if self.entangled:
            seen = []
            for b in self.biased_experts:
                if (b.layer, b.expert) not in seen:
                    seen.append((b.layer, b.expert))
            return seen
        return list(self.knowledge_experts)

    @property
    def is_empty(self) -> bool:
        return not self.biased_experts and not self.knowledge_set

    @classmethod
    def spread(cls, layer: int, experts: Sequence[int], group, delta: float = 0.05, **kw) -> "PlantSpec":
        """Bias ``experts`` of one layer towards ``group``."""
        plants = tuple(BiasPlant(layer, e, group, delta) for e in experts)
        kw.setdefault("breadth", len(plants))
        return cls(biased_experts=plants, **kw)


@dataclass
class GroundTruth:
    planted: dict  # layer -> sorted expert ids with a bias plant
    target_groups: dict  # (layer, expert) -> (axis, group)
    expected_shift: dict  # (layer, expert) -> requested delta
    measured_shift: dict  # (layer, expert) -> signed shift P(e|g) - P(e) after calibration
    router_scale: dict  # (layer, expert) -> final group-direction scale
    knowledge: list  # (layer, expert)
    fact_routes: dict  # subject word -> (layer, expert)
    facts: list  # (subject word, answer word)
    stereotypes: dict  # group label -> profession words

    def to_dict(self):
        def k(t):
            return f"{t[0]}:{t[1]}"

        return {
            "planted": {str(l): v for l, v in self.planted.items()},
            "target_groups": {k(x): list(g) for x, g in self.target_groups.items()},
            "expected_shift": {k(x): v for x, v in self.expected_shift.items()},
            "measured_shift": {k(x): v for x, v in self.measured_shift.items()},
            "router_scale": {k(x): v for x, v in self.router_scale.items()},
            "knowledge": [list(x) for x in self.knowledge],
            "fact_routes": {s: list(x) for s, x in self.fact_routes.items()},
            "facts": [list(f) for f in self.facts],
            "stereotypes": self.stereotypes,
        }


@dataclass
class PlantedSetup:
    """Everything a planted experiment needs: vocabulary, suite, model and truth."""

    vocab: Vocabulary
    suite: PromptSet
    descriptors: list[Descriptor]
    model: Model
    truth: GroundTruth
    spec: PlantSpec


# --- oracle ------------------------------------------------------------------

def oracle_activation_rates(model: Model, prompt_set: PromptSet, mode: str = "selection") -> ActivationStats:
    """Activation rates by running each prompt and counting expert events directly.

    Deliberately shares no code with :func:`farelab.capture.aggregate`.
    """
    layers = list(model.moe_layers)
    K = model.config.n_experts
    groups: list[tuple[str, str]] = []
    for p in prompt_set.demographic:
        if (p.axis, p.group) not in groups:
            groups.append((p.axis, p.group))
    counts = {}  # (cond, layer, expert) -> total
    probs = {}
    tokens = {}
    all_sel = {}
    total_tokens = 0
    for p in list(prompt_set.neutral) + list(prompt_set.demographic):
        cond = "neutral" if p.condition == "neutral" else (p.axis, p.group)
        tokens[cond] = tokens.get(cond, 0) + len(p.tokens)
        total_tokens += len(p.tokens)
        for rec in forward(model, list(p.tokens)).routing_records:
            for e in range(K):
                chosen = e in rec.selected
                key = (cond, rec.layer_id, e)
                amount = float(chosen) if mode == "selection" else float(rec.probs[e])
                counts[key] = counts.get(key, 0.0) + amount
                probs[key] = probs.get(key, 0.0) + float(rec.probs[e])
                all_sel[(rec.layer_id, e)] = all_sel.get((rec.layer_id, e), 0.0) + float(chosen)
    n_neutral = tokens.get("neutral", 0)

    def table(cond, src):
        return np.array([[src.get((cond, l, e), 0.0) / tokens[cond] for e in range(K)] for l in layers])

    zeros = np.zeros((len(layers), K))
    demo_tokens = sum(tokens[g] for g in groups)
    return ActivationStats(
        layers=tuple(layers),
        groups=groups,
        mode=mode,
        p_e=table("neutral", counts) if n_neutral else zeros,
        p_e_given_g=np.array([table(g, counts) for g in groups]).reshape(len(groups), len(layers), K),
        p_g=np.array([tokens[g] / demo_tokens for g in groups]),
        p_neutral=table("neutral", probs) if n_neutral else zeros,
        p_demo=np.array([table(g, probs) for g in groups]).reshape(len(groups), len(layers), K),
        freq=np.array([[all_sel.get((l, e), 0.0) / total_tokens for e in range(K)] for l in layers]),
        n_neutral_tokens=n_neutral,
        n_group_tokens=np.array([tokens[g] for g in groups], dtype=np.int64),
    )


def _shift_table(model: Model, suite: PromptSet, plants) -> dict:
    """For each planted expert, its signed activation shift ``P(e|g) - P(e)``
    in the target group and the 95th percentile ARD of the unplanted experts
    of the same layer and group."""
    stats = aggregate(capture_run(model, suite))
    planted = {(b.layer, b.expert) for b in plants}
    out = {}
    for b in plants:
        li = stats.layers.index(b.layer)
        g = stats.groups.index(b.group)
        shift = stats.p_e_given_g[g, li] - stats.p_e[li]
        others = [e for e in range(shift.size) if (b.layer, e) not in planted]
        out[(b.layer, b.expert)] = (float(shift[b.expert]), float(np.percentile(np.abs(shift[others]), 95)))
    return out


# --- construction ------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v)


def _push_vector(unembed: np.ndarray, token_ids) -> np.ndarray:
    """Residual direction raising each listed token's logit by about 1."""
    v = np.zeros(unembed.shape[1])
    for t in token_ids:
        u = unembed[t]
        v += u / (u @ u)
    return v


def default_stereotypes(descriptors: Sequence[Descriptor], per_group: int = 3,
                        professions: Sequence[str] = DEFAULT_PROFESSIONS) -> dict:
    groups = []
    for d in descriptors:
        if d.group not in groups:
            groups.append(d.group)
    out = {}
    for i, g in enumerate(groups):
        out[g] = [professions[(i * per_group + j) % len(professions)] for j in range(per_group)]
    return out


def build_planted_model(config: ModelConfig, spec: PlantSpec, vocab: Vocabulary, suite: PromptSet,
                        descriptors: Sequence[Descriptor], scale0: float = 0.25, growth: float = 1.25,
                        max_scale: float = 200.0, margin: float = 1.0,
                        refine: int = 6) -> tuple[Model, GroundTruth]:
    """Plant ``spec`` into ``build_model(config)``.

    Each planted router row is scaled up by ``growth`` until the expert's ARD
    in its target group is at least its ``delta`` and at least ``margin``
    times the 95th percentile of the unplanted experts in the same layer.
    ``refine`` bisection rounds then pull the scales back towards the
    smallest values that still pass, so the measured shift lands close to
    the bar instead of one growth step past it.
    Raises :class:`ConfigError` if the plant spec does not fit the model or no
    router scale up to ``max_scale`` reaches every requested shift.
    """
    if config.vocab_size != len(vocab):
        raise ConfigError(f"config.vocab_size={config.vocab_size} but vocabulary has {len(vocab)} words")
    K = config.n_experts
    for b in spec.biased_experts:
        if b.layer not in config.moe_layer_indices or not 0 <= b.expert < K:
            raise ConfigError(f"biased expert {(b.layer, b.expert)} is outside the model")
    for l, e in spec.knowledge_set:
        if l not in config.moe_layer_indices or not 0 <= e < K:
            raise ConfigError(f"knowledge expert {(l, e)} is outside the model")
    n_routed = K * len(config.moe_layer_indices)
    if spec.breadth > n_routed:
        raise ConfigError(f"breadth {spec.breadth} exceeds the {n_routed} routed experts of the model")
    model = build_model(config)
    stereotypes = spec.stereotypes or default_stereotypes(descriptors)
    truth = GroundTruth({}, {}, {}, {}, {}, [], {}, [], stereotypes)
    if spec.is_empty:
        return model, truth

    moe = config.moe_layer_indices
    plants = spec.biased_experts
    groups = []
    for bp in plants:
        if bp.group not in groups:
            groups.append(bp.group)
    D = config.d_model
    if len(groups) >= D // 2:
        raise ConfigError(f"{len(groups)} planted groups need more than d_model={D} allows")
    # the last len(groups) residual coordinates form the group channel
    res = np.arange(D - len(groups), D)
    arrays = [{k: np.array(v) for k, v in lw.arrays().items()} for lw in model.layers]
    E, U = np.array(model.embed), np.array(model.unembed)
    if plants:
        _isolate_channel(arrays, E, U, res, max(bp.layer for bp in plants), spec.channel_gain)
        desc_ids = sorted({vocab.id(w) for d in descriptors for w in d.surface_text.split()})
        # descriptors become indistinguishable outside the channel
        E[desc_ids] = E[desc_ids].mean(axis=0)
        U[desc_ids] = U[desc_ids].mean(axis=0)
        for gi, g in enumerate(groups):
            ids = [vocab.id(w) for d in descriptors if (d.axis, d.group) == g for w in d.surface_text.split()]
            if not ids:
                raise ConfigError(f"no descriptor for planted group {g}")
            E[ids, res[gi]] = 1.0
        d_base = E[desc_ids[0]]
        n_in_group = {g: sum(1 for bp in plants if bp.group == g) for g in groups}
        for bp in plants:
            prof_ids = [vocab.id(w) for w in stereotypes.get(bp.group[1], [])]
            a = arrays[bp.layer]
            # the last hidden unit fires on descriptor tokens and votes for the
            # group's stereotyped professions at the next position
            _token_unit(a, bp.expert, config.d_expert_hidden - 1, d_base,
                        spec.push / n_in_group[bp.group] * _push_vector(U, prof_ids))
    router = {l: arrays[l]["router"] for l in moe}
    w1 = {l: arrays[l]["w1"] for l in moe}
    b1 = {l: arrays[l]["b1"] for l in moe}
    w2 = {l: arrays[l]["w2"] for l in moe}

    facts = []
    know = spec.knowledge_set
    if know:
        n_facts = spec.n_facts or 2 * len(know)
        for i in range(n_facts):
            facts.append((f"subject{i}", f"answer{i}"))
        H = config.d_expert_hidden
        slots = {x: 0 for x in know}
        biased = {(bp.layer, bp.expert) for bp in plants}
        for i, (subj, ans) in enumerate(facts):
            l, e = know[i % len(know)]
            j = slots[(l, e)]
            if j >= H - (1 if (l, e) in biased else 0):
                raise ConfigError(f"expert {(l, e)} has no hidden units left for fact {subj}")
            slots[(l, e)] += 1
            s = E[vocab.id(subj)]
            _token_unit(arrays[l], e, j, s, spec.knowledge_push * _push_vector(U, [vocab.id(ans)]))
            sn = np.linalg.norm(s)
            router[l][e] += 6.0 / sn * _unit(s)
            truth.fact_routes[subj] = (l, e)
        truth.facts = facts
        truth.knowledge = list(know)

    def assemble(scales):
        rows = {l: r.copy() for l, r in router.items()}
        for bp in plants:
            rows[bp.layer][bp.expert, res[groups.index(bp.group)]] += scales[(bp.layer, bp.expert)]
        m = replace(model, embed=_ro(E), unembed=_ro(U))
        for i, arrs in enumerate(arrays):
            upd = {k: _ro(v) for k, v in arrs.items()}
            if i in rows:
                upd["router"] = _ro(rows[i])
            m = m.with_layer(i, **upd)
        return m

    scales = {(b.layer, b.expert): scale0 for b in plants}
    target = {(b.layer, b.expert): b.delta for b in plants}

    def failing(shifts):
        return [x for x in scales if shifts[x][0] < target[x] or shifts[x][0] <= margin * shifts[x][1]]

    lower = {x: 0.0 for x in scales}  # largest scale seen failing
    while True:
        m = assemble(scales)
        if not plants:
            break
        shifts = _shift_table(m, suite, plants)
        short = failing(shifts)
        if not short:
            break
        for x in short:
            lower[x] = scales[x]
            scales[x] *= growth
        if max(scales.values()) > max_scale:
            raise ConfigError(
                f"cannot reach planted shift: experts {short} stay below delta or below "
                f"{margin} x the 95th-percentile unplanted ARD at router scale {max_scale}"
            )
    # bisect each scale down towards the smallest passing value; a round is
    # kept only if every plant still passes, since plants share top-k slots
    for _ in range(refine if plants else 0):
        trial = {x: 0.5 * (lower[x] + scales[x]) for x in scales}
        saved, scales = scales, trial
        t_model = assemble(scales)
        t_shifts = _shift_table(t_model, suite, plants)
        bad = set(failing(t_shifts))
        scales = saved
        if not bad:
            scales, m, shifts = trial, t_model, t_shifts
            continue
        for x in scales:
            if x in bad:
                lower[x] = trial[x]
    for b in plants:
        x = (b.layer, b.expert)
        truth.planted.setdefault(b.layer, []).append(b.expert)
        truth.target_groups[x] = b.group
        truth.expected_shift[x] = b.delta
        truth.measured_shift[x] = shifts[x][0]
        truth.router_scale[x] = float(scales[x])
    truth.planted = {l: sorted(v) for l, v in truth.planted.items()}
    return m, truth


def _token_unit(a, expert, j, token_vec, out_vec, gain=4.0):
    """Wire hidden unit ``j`` of ``expert`` to write ``out_vec`` when the
    residual carries ``token_vec`` (the unit stays off below half its norm)."""
    n = np.linalg.norm(token_vec)
    g = gain / n
    a["w1"][expert, j] = g * _unit(token_vec)
    a["b1"][expert, j] = -0.5 * g * n
    a["w2"][expert][:, j] = out_vec / (0.5 * g * n)


def _isolate_channel(arrays, E, U, res, last_layer, gain):
    """Make the base network blind to the ``res`` coordinates (in place).

    Nothing reads or writes those coordinates except an attention copy path in
    layers up to ``last_layer``, which carries the channel from the descriptor
    token to every later position, and the routers' planted rows.
    """
    E[:, res] = 0.0
    U[:, res] = 0.0
    for i, a in enumerate(arrays):
        for k in ("wq", "wk", "wv"):
            a[k][:, res] = 0.0
        a["wv"][res, :] = 0.0
        a["wo"][res, :] = 0.0
        a["wo"][:, res] = 0.0
        if i <= last_layer:
            a["wv"][res, res] = 1.0
            a["wo"][res, res] = gain
        for pre in ("", "shared_"):
            if pre + "w1" in a:
                a[pre + "w1"][..., res] = 0.0
                a[pre + "w2"][..., res, :] = 0.0
                a[pre + "b2"][..., res] = 0.0
        if "router" in a:
            a["router"][:, res] = 0.0


def _ro(a):
    a = np.asarray(a, dtype=np.float64).copy()
    a.setflags(write=False)
    return a


# --- convenience -------------------------------------------------------------

def planted_setup(spec: PlantSpec, axes=("gender", "race"), n_templates: int = 4, n_professions: int = 8,
                  seed: int = 0, margin: float = 1.0, n_demographic: int | None = None,
                  base_config: ModelConfig | None = None, **config_kw) -> PlantedSetup:
    """Vocabulary, prompt suite and planted model for a default synthetic inventory.

    ``base_config`` (for example a preset) supplies the architecture; its
    vocabulary size and seed are replaced. Without knowledge experts the
    vocabulary still carries eight unplanted facts so that MC items exist.
    """
    n_facts = spec.n_facts or 2 * len(spec.knowledge_set) or 8
    vocab = default_vocabulary(n_subjects=n_facts, n_answers=n_facts)
    descriptors = default_descriptors(axes)
    suite = generate_suite(DEFAULT_TEMPLATES[:n_templates], DEFAULT_PROFESSIONS[:n_professions],
                           descriptors, vocab, n_demographic=n_demographic)
    if base_config is not None:
        config = replace(base_config, vocab_size=len(vocab), seed=seed, **config_kw)
    else:
        config = ModelConfig(vocab_size=len(vocab), seed=seed, **config_kw)
    config.validate()
    model, truth = build_planted_model(config, spec, vocab, suite, descriptors, margin=margin)
    return PlantedSetup(vocab, suite, descriptors, model, truth, spec)


def make_eval_bundle(setup: PlantedSetup, templates: Sequence[str] = DEFAULT_TEMPLATES,
                     n_distractors: int = 3, ppl_prompts: int = 64) -> EvalBundle:
    """Minimal pairs from the planted stereotypes, MC items from the planted facts,
    and a perplexity corpus of neutral prompts.

    A pair keeps the target group's descriptor and swaps a stereotyped
    profession for one stereotyped for another group of the same axis.
    """
    vocab, truth = setup.vocab, setup.truth
    by_axis = {}
    for d in setup.descriptors:
        by_axis.setdefault(d.axis, {}).setdefault(d.group, []).append(d.surface_text)
    pairs: list[MinimalPair] = []
    targets = []
    for g in truth.target_groups.values():
        if g not in targets:
            targets.append(g)
    if not targets:
        targets = [(d.axis, d.group) for d in setup.descriptors]
        targets = [g for i, g in enumerate(targets) if g not in targets[:i]]
    for axis, group in targets:
        mine = truth.stereotypes.get(group, [])
        anti = [w for g in by_axis[axis] if g != group for w in truth.stereotypes.get(g, []) if w not in mine]
        for tmpl in templates:
            for form in by_axis[axis][group]:
                for sp in mine:
                    for ap in anti:
                        pairs.append(make_pair(tmpl.format(desc=form, prof=sp),
                                               tmpl.format(desc=form, prof=ap), axis, vocab))
    items: list[MCItem] = []
    facts = truth.facts
    if not facts:
        facts = []
        while f"subject{len(facts)}" in vocab and f"answer{len(facts)}" in vocab:
            facts.append((f"subject{len(facts)}", f"answer{len(facts)}"))
    answers = [a for _, a in facts]
    for i, (subj, ans) in enumerate(facts):
        distract = [answers[(i + j) % len(answers)] for j in range(1, n_distractors + 1)]
        items.append(make_item(f"what is the answer of {subj}", ans, distract, vocab))
    corpus = [p.tokens for p in setup.suite.neutral[:ppl_prompts]]
    return EvalBundle(pairs, items, corpus)
