"""Deterministic toy Mixture-of-Experts decoder.

Each layer is a single-head causal attention block followed by either a dense
MLP or a routed MoE block (plus optional always-on shared experts). Weights are
drawn once from ``ModelConfig.seed`` and never trained. Every router is a hook
point: an :class:`~farelab.arr.InterventionSpec` penalises gate logits before
top-k selection and a :class:`~farelab.arr.MaskSpec` carried by the model
handle pins masked experts to ``-inf``.

All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .arr import InterventionSpec, MaskSpec, arr_adjust

MODEL_MAGIC = "FARELAB-MODEL-v1"


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


class InputError(ValueError):
    """Token ids or sequences are not acceptable to the model."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 32
    n_layers: int = 4
    moe_layer_indices: tuple[int, ...] = (0, 1, 2, 3)
    n_experts: int = 8
    top_k: int = 2
    n_shared: int = 0
    d_expert_hidden: int = 16
    seed: int = 0
    router_scale: float = 1.0
    attn_scale: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "moe_layer_indices", tuple(sorted(int(i) for i in self.moe_layer_indices)))
        self.validate()

    def validate(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_experts", "top_k", "d_expert_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1 (got {getattr(self, name)})")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"invariant 1 <= top_k <= n_experts violated: top_k={self.top_k}, n_experts={self.n_experts}"
            )
        if self.n_shared < 0:
            raise ConfigError(f"n_shared must be >= 0 (got {self.n_shared})")
        if len(set(self.moe_layer_indices)) != len(self.moe_layer_indices):
            raise ConfigError("moe_layer_indices contains duplicates")
        bad = [i for i in self.moe_layer_indices if not 0 <= i < self.n_layers]
        if bad:
            raise ConfigError(f"moe_layer_indices {bad} not within [0, n_layers={self.n_layers})")
        if self.router_scale <= 0:
            raise ConfigError("router_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["moe_layer_indices"] = list(self.moe_layer_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["moe_layer_indices"] = tuple(d.get("moe_layer_indices", ()))
        return cls(**d)


# Table-1 shapes at toy depth/width.
PRESETS = {
    "olmoe-like": dict(n_experts=64, top_k=8, n_shared=0),
    "mixtral-like": dict(n_experts=8, top_k=2, n_shared=0),
    "deepseek-like": dict(n_experts=64, top_k=6, n_shared=2),
    "qwen15-like": dict(n_experts=60, top_k=4, n_shared=1),
    "qwen3-like": dict(n_experts=128, top_k=8, n_shared=0),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    # dense MLP (non-MoE layers), or stacked routed experts (MoE layers)
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    router: np.ndarray | None = None
    shared_w1: np.ndarray | None = None
    shared_b1: np.ndarray | None = None
    shared_w2: np.ndarray | None = None
    shared_b2: np.ndarray | None = None

    @property
    def is_moe(self) -> bool:
        return self.router is not None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    embed: np.ndarray
    unembed: np.ndarray
    layers: tuple[LayerWeights, ...]
    mask: MaskSpec | None = None

    @property
    def moe_layers(self) -> tuple[int, ...]:
        return self.config.moe_layer_indices

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "unembed": self.unembed}
        for i, lw in enumerate(self.layers):
            for k, v in lw.arrays().items():
                out[f"layer{i}.{k}"] = v
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.named_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def with_layer(self, index: int, **arrays) -> "Model":
        layers = list(self.layers)
        layers[index] = replace(layers[index], **arrays)
        return replace(self, layers=tuple(layers))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def build_model(config: ModelConfig) -> Model:
    """Draw all weights from ``config.seed``; equal configs give equal weights."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    V, D, H = config.vocab_size, config.d_model, config.d_expert_hidden
    K, S = config.n_experts, config.n_shared

    def normal(*shape, std):
        return _freeze(rng.normal(0.0, std, size=shape))

    embed = normal(V, D, std=1.0 / np.sqrt(D))
    unembed = normal(V, D, std=1.0)
    layers = []
    for i in range(config.n_layers):
        attn = dict(
            wq=normal(D, D, std=0.3 / np.sqrt(D)),
            wk=normal(D, D, std=0.3 / np.sqrt(D)),
            wv=normal(D, D, std=1.0 / np.sqrt(D)),
            wo=normal(D, D, std=config.attn_scale / np.sqrt(D)),
        )
        if i in config.moe_layer_indices:
            lw = LayerWeights(
                **attn,
                router=normal(K, D, std=config.router_scale),
                w1=normal(K, H, D, std=1.0 / np.sqrt(D)),
                b1=normal(K, H, std=0.1),
                w2=normal(K, D, H, std=0.5 / np.sqrt(H)),
                b2=_freeze(np.zeros((K, D))),
                shared_w1=normal(S, H, D, std=1.0 / np.sqrt(D)),
                shared_b1=normal(S, H, std=0.1),
                shared_w2=normal(S, D, H, std=0.5 / np.sqrt(H)),
                shared_b2=_freeze(np.zeros((S, D))),
            )
        else:
            lw = LayerWeights(
                **attn,
                w1=normal(H, D, std=1.0 / np.sqrt(D)),
                b1=normal(H, std=0.1),
                w2=normal(D, H, std=0.5 / np.sqrt(H)),
                b2=_freeze(np.zeros(D)),
            )
        layers.append(lw)
    return Model(config, embed, unembed, tuple(layers))


@dataclass(frozen=True)
class RoutingRecord:
    layer_id: int
    position: int
    gate_logits: np.ndarray  # after intervention and masking
    probs: np.ndarray
    selected: tuple[int, ...]
    gate_weights: np.ndarray
    raw_logits: np.ndarray  # before intervention


@dataclass(frozen=True, eq=False)
class LayerRouting:
    """Routing arrays for one MoE layer over the positions of one sequence."""

    raw_logits: np.ndarray  # (T, K)
    logits: np.ndarray  # (T, K)
    probs: np.ndarray  # (T, K)
    selected: np.ndarray  # (T, k) expert ids in rank order
    weights: np.ndarray  # (T, k)

    def selection_mask(self) -> np.ndarray:
        m = np.zeros(self.probs.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=-1)
        return m


@dataclass(frozen=True, eq=False)
class ForwardOutput:
    next_token_log_probs: np.ndarray  # (T, V): row t predicts token t+1
    routing: dict[int, LayerRouting] = field(default_factory=dict)

    @property
    def routing_records(self) -> list[RoutingRecord]:
        out = []
        for lid in sorted(self.routing):
            r = self.routing[lid]
            for t in range(r.probs.shape[0]):
                out.append(RoutingRecord(
                    layer_id=lid, position=t, gate_logits=r.logits[t], probs=r.probs[t],
                    selected=tuple(int(e) for e in r.selected[t]), gate_weights=r.weights[t],
                    raw_logits=r.raw_logits[t],
                ))
        return out


def _check_tokens(model: Model, tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("token sequence must be a non-empty 1-D sequence")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {arr.dtype}")
    bad = arr[(arr < 0) | (arr >= model.config.vocab_size)]
    if bad.size:
        raise InputError(f"unknown token id {int(bad[0])} (vocab_size={model.config.vocab_size})")
    return arr.astype(np.int64)


def _mlp(x, w1, b1, w2, b2):
    return np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2


def _stacked_experts(x2, w1, b1, w2, b2):
    """Outputs of every expert for every row of ``x2``: (N, D) -> (N, E, D)."""
    E, H, D = w1.shape
    hid = x2 @ w1.reshape(E * H, D).T + b1.reshape(-1)
    hid = np.maximum(hid, 0.0).reshape(-1, E, H).transpose(1, 0, 2)  # (E, N, H)
    out = np.matmul(hid, w2.transpose(0, 2, 1)) + b2[:, None, :]  # (E, N, D)
    return out.transpose(1, 0, 2)


def _moe_block(model: Model, lid: int, lw: LayerWeights, h: np.ndarray,
               intervention: InterventionSpec | None):
    B, T, D = h.shape
    k = model.config.top_k
    raw = h @ lw.router.T
    z = raw
    if intervention is not None:
        pen = intervention.penalty(lid)
        if pen is not None:
            z = arr_adjust(raw, pen, intervention.lam)
    if model.mask is not None:
        masked = model.mask.experts_in(lid)
        if masked:
            z = z.copy()
            z[..., masked] = -np.inf
    probs = softmax(z, axis=-1)
    # stable sort on -z: equal logits keep the lower expert id first
    sel = np.argsort(-z, axis=-1, kind="stable")[..., :k]
    w = np.take_along_axis(probs, sel, axis=-1)
    w = w / w.sum(axis=-1, keepdims=True)

    x2 = h.reshape(B * T, D)
    out = _stacked_experts(x2, lw.w1, lw.b1, lw.w2, lw.b2).reshape(B, T, -1, D)
    picked = np.take_along_axis(out, sel[..., None], axis=2)
    y = (w[..., None] * picked).sum(axis=2)
    if lw.shared_w1.shape[0]:
        sh = _stacked_experts(x2, lw.shared_w1, lw.shared_b1, lw.shared_w2, lw.shared_b2)
        y = y + sh.sum(axis=1).reshape(B, T, D)
    return y, (raw, z, probs, sel, w)


def _forward_batch(model: Model, batch: np.ndarray, intervention: InterventionSpec | None):
    """Run equal-length sequences ``batch`` (B, T) in one pass."""
    B, T = batch.shape
    D = model.config.d_model
    h = model.embed[batch]
    causal = np.triu(np.full((T, T), -np.inf), 1)
    routing = {}
    for lid, lw in enumerate(model.layers):
        q, kk, v = h @ lw.wq.T, h @ lw.wk.T, h @ lw.wv.T
        att = softmax(q @ kk.transpose(0, 2, 1) / np.sqrt(D) + causal, axis=-1)
        h = h + (att @ v) @ lw.wo.T
        if lw.is_moe:
            y, routing[lid] = _moe_block(model, lid, lw, h, intervention)
        else:
            y = _mlp(h, lw.w1, lw.b1, lw.w2, lw.b2)
        h = h + y
    logp = log_softmax(h @ model.unembed.T, axis=-1)
    return logp, routing


def forward_many(model: Model, sequences: Sequence, intervention: InterventionSpec | None = None,
                 chunk: int = 128) -> list[ForwardOutput]:
    """Forward several sequences, batching those of equal length."""
    seqs = [_check_tokens(model, s) for s in sequences]
    outputs: list[ForwardOutput | None] = [None] * len(seqs)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    for T in sorted(by_len):
        idx = by_len[T]
        for start in range(0, len(idx), chunk):
            part = idx[start:start + chunk]
            logp, routing = _forward_batch(model, np.stack([seqs[i] for i in part]), intervention)
            for b, i in enumerate(part):
                outputs[i] = ForwardOutput(
                    next_token_log_probs=logp[b],
                    routing={lid: LayerRouting(*(a[b] for a in arrs)) for lid, arrs in routing.items()},
                )
    return outputs


def forward(model: Model, tokens, intervention: InterventionSpec | None = None) -> ForwardOutput:
    return forward_many(model, [tokens], intervention)[0]


def token_log_probs(model: Model, sequences: Sequence, intervention=None) -> list[np.ndarray]:
    """For each sequence, ``log p(t_i | t_<i)`` for ``i = 1..n-1``."""
    outs = forward_many(model, sequences, intervention)
    res = []
    for s, o in zip(sequences, outs):
        s = np.asarray(s)
        res.append(o.next_token_log_probs[np.arange(len(s) - 1), s[1:]])
    return res


def sequence_log_likelihoods(model: Model, sequences: Sequence, intervention=None) -> np.ndarray:
    for s in sequences:
        if len(s) < 2:
            raise InputError("sequences must contain at least 2 tokens to be scored")
    return np.array([lp.sum() for lp in token_log_probs(model, sequences, intervention)])


def sequence_log_likelihood(model: Model, tokens, intervention=None) -> float:
    """Sum of ``log p`` of tokens 2..n given their prefixes, in nats."""
    return float(sequence_log_likelihoods(model, [tokens], intervention)[0])


def perplexity(model: Model, corpus: Sequence, intervention=None) -> float:
    if len(corpus) == 0:
        raise InputError("perplexity needs a non-empty corpus")
    lls = sequence_log_likelihoods(model, corpus, intervention)
    n_pred = sum(len(s) - 1 for s in corpus)
    return float(np.exp(-lls.sum() / n_pred))


def greedy_decode(model: Model, prompt, max_new: int, intervention=None) -> list[int]:
    seq = [int(t) for t in _check_tokens(model, prompt)]
    for _ in range(max_new):
        logp = forward(model, seq, intervention).next_token_log_probs[-1]
        seq.append(int(np.argmax(logp)))  # argmax returns the lowest id on ties
    return seq


def save_model(model: Model, path, metadata: dict | None = None) -> None:
    """Write ``model`` as ``.npz``; ``metadata`` is stored as JSON alongside."""
    arrays = {name: np.asarray(a) for name, a in model.named_arrays().items()}
    buf = io.BytesIO()
    np.savez(
        buf,
        __magic__=np.array(MODEL_MAGIC),
        __config__=np.array(json.dumps(model.config.to_dict(), sort_keys=True)),
        __meta__=np.array(json.dumps(metadata or {}, sort_keys=True)),
        **arrays,
    )
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> Model:
    try:
        data = np.load(Path(path), allow_pickle=False)
    except Exception as exc:  # zipfile / value errors for truncated or foreign files
        raise InputError(f"{path}: not a readable model file ({exc})") from exc
    with data:
        if "__magic__" not in data.files or str(data["__magic__"]) != MODEL_MAGIC:
            raise InputError(f"{path}: missing magic string {MODEL_MAGIC!r}")
        config = ModelConfig.from_dict(json.loads(str(data["__config__"])))
        arrs = {k: _freeze(data[k]) for k in data.files if not k.startswith("__")}
    layers = []
    for i in range(config.n_layers):
        prefix = f"layer{i}."
        fields = {k[len(prefix):]: v for k, v in arrs.items() if k.startswith(prefix)}
        layers.append(LayerWeights(**fields))
    return Model(config, arrs["embed"], arrs["unembed"], tuple(layers))


def read_model_metadata(path) -> dict:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            return json.loads(str(data["__meta__"])) if "__meta__" in data.files else {}
    except Exception as exc:
        raise InputError(f"{path}: not a readable model file ({exc})") from exc


def all_finite(model: Model) -> bool:
    return all(np.all(np.isfinite(a)) for a in model.named_arrays().values())


def iter_moe(model: Model) -> Iterable[tuple[int, LayerWeights]]:
    for i in model.moe_layers:
        yield i, model.layers[i]
