"""Per-expert sensitivity profiles and the synthetic transforms applied to them.

A profile holds one non-negative score per (MoE layer, routed expert). The
transforms here generate the control conditions used by the ablation driver:
flattened, inverted, power-reshaped, top-n truncated and random profiles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass(frozen=True)
class SensitivityProfile:
    """Scores ``phi[i, e]`` for MoE layer ``layers[i]`` and routed expert ``e``."""

    layers: tuple[int, ...]
    phi: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        if phi.ndim != 2 or phi.shape[0] != len(self.layers):
            raise ValueError(
                f"phi must have shape (n_layers={len(self.layers)}, n_experts), got {phi.shape}"
            )
        if not np.all(np.isfinite(phi)):
            raise ValueError("profile contains non-finite scores")
        if np.any(phi < 0):
            raise ValueError("profile scores must be non-negative")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))

    @property
    def n_experts(self) -> int:
        return self.phi.shape[1]

    def layer(self, layer_id: int) -> np.ndarray:
        return self.phi[self.layers.index(layer_id)]

    def ranked_pairs(self, descending: bool = True) -> list[tuple[int, int]]:
        """All (layer, expert) pairs ordered by score; ties go to the earlier pair."""
        flat = self.phi.ravel()
        order = np.argsort(-flat if descending else flat, kind="stable")
        n = self.n_experts
        return [(self.layers[i // n], int(i % n)) for i in order]

    def with_phi(self, phi: np.ndarray, **extra) -> "SensitivityProfile":
        prov = dict(self.provenance)
        prov.update(extra)
        return SensitivityProfile(self.layers, phi, prov)

    def to_dict(self) -> dict:
        return {
            "layers": list(self.layers),
            "phi": self.phi.tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityProfile":
        return cls(tuple(d["layers"]), np.asarray(d["phi"], dtype=np.float64), d.get("provenance", {}))

    @classmethod
    def zeros(cls, layers, n_experts: int) -> "SensitivityProfile":
        return cls(tuple(layers), np.zeros((len(layers), n_experts)))


TRANSFORM_KINDS = ("identity", "flatten", "inverted", "power", "topk", "random")


@dataclass(frozen=True)
class ProfileTransform:
    kind: str = "identity"
    alpha: float = 1.0
    n: int = 10
    seed: int = 0
    per_layer: bool = False

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "power" and not self.alpha > 0:
            raise ValueError("power transform needs alpha > 0")
        if self.kind == "topk" and self.n < 1:
            raise ValueError("topk transform needs n >= 1")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def inverted(cls):
        return cls("inverted")

    @classmethod
    def power(cls, alpha: float):
        return cls("power", alpha=float(alpha))

    @classmethod
    def top_k(cls, n: int, per_layer: bool = False):
        return cls("topk", n=int(n), per_layer=per_layer)

    @classmethod
    def random(cls, seed: int):
        return cls("random", seed=int(seed))

    @property
    def label(self) -> str:
        if self.kind == "power":
            return f"power(alpha={self.alpha:g})"
        if self.kind == "topk":
            return f"top-{self.n}" + ("/layer" if self.per_layer else "")
        if self.kind == "random":
            return f"random(seed={self.seed})"
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "n": self.n, "seed": self.seed,
                "per_layer": self.per_layer}


def _minmax_rows(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=1, keepdims=True)
    span = x.max(axis=1, keepdims=True) - lo
    out = np.zeros_like(x)
    np.divide(x - lo, span, out=out, where=span > 0)
    return out


def transform_profile(profile: SensitivityProfile, t: ProfileTransform) -> SensitivityProfile:
    """Apply ``t`` to ``profile`` and return a new profile.

    ``topk`` keeps the ``n`` largest entries across all (layer, expert) pairs
    (or per layer when ``per_layer`` is set); asking for more entries than
    exist keeps everything and records ``topk_clipped`` in the provenance.
    ``random`` draws uniformly from ``[0, max(phi)]``.
    """
    phi = profile.phi
    kind = t.kind
    extra: dict[str, Any] = {"transform": t.label}
    if kind == "identity":
        return profile
    if kind == "flatten":
        out = np.full_like(phi, phi.mean())
    elif kind == "inverted":
        out = phi.max() - phi
    elif kind == "power":
        u = _minmax_rows(phi) ** t.alpha
        out = u * phi.max(axis=1, keepdims=True)
    elif kind == "topk":
        out = np.zeros_like(phi)
        if t.per_layer:
            n = min(t.n, phi.shape[1])
            extra["topk_clipped"] = t.n > phi.shape[1]
            for i, row in enumerate(phi):
                keep = np.argsort(-row, kind="stable")[:n]
                out[i, keep] = row[keep]
        else:
            flat = phi.ravel()
            n = min(t.n, flat.size)
            extra["topk_clipped"] = t.n > flat.size
            keep = np.argsort(-flat, kind="stable")[:n]
            out.ravel()[keep] = flat[keep]
    else:  # random
        rng = np.random.default_rng(t.seed)
        out = rng.uniform(0.0, phi.max(), size=phi.shape)
    return profile.with_phi(out, **extra)
