"""Router-level interventions: sensitivity-weighted logit penalties and hard masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .sensitivity import ProfileTransform, SensitivityProfile, transform_profile


class InterventionError(ValueError):
    pass


def arr_adjust(gate_logits, phi_layer, lam: float, shared_mask=()) -> np.ndarray:
    """Return ``gate_logits - lam * phi_layer`` with shared-expert entries untouched.

    ``gate_logits`` may carry leading token axes; the last axis indexes experts.
    """
    z = np.asarray(gate_logits, dtype=np.float64)
    phi = np.asarray(phi_layer, dtype=np.float64)
    if phi.ndim != 1 or z.shape[-1] != phi.shape[0]:
        raise InterventionError(
            f"penalty length {phi.shape} does not match gate logits {z.shape}"
        )
    if lam < 0:
        raise InterventionError("lambda must be non-negative")
    penalty = lam * phi
    shared = list(shared_mask)
    if shared:
        penalty = penalty.copy()
        penalty[shared] = 0.0
    return z - penalty


@dataclass(frozen=True)
class InterventionSpec:
    """Apply ``lam * phi_l`` as a logit penalty at each layer in ``layers``."""

    layers: frozenset
    lam: float
    profile: SensitivityProfile
    transform: ProfileTransform = field(default_factory=ProfileTransform)

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(int(l) for l in self.layers))
        if not self.lam >= 0:
            raise InterventionError(f"lambda must be >= 0, got {self.lam}")
        unknown = self.layers - set(self.profile.layers)
        if unknown:
            raise InterventionError(f"layers {sorted(unknown)} are not in the profile")

    @cached_property
    def effective_profile(self) -> SensitivityProfile:
        return transform_profile(self.profile, self.transform)

    def penalty(self, layer_id: int):
        if layer_id not in self.layers:
            return None
        return self.effective_profile.layer(layer_id)

    def describe(self) -> dict:
        return {
            "layers": sorted(self.layers),
            "lambda": self.lam,
            "transform": self.transform.to_dict(),
        }


@dataclass(frozen=True)
class MaskSpec:
    """Routed experts that are forced out of every top-k set."""

    masked: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(
            self, "masked", frozenset((int(l), int(e)) for l, e in self.masked)
        )

    def experts_in(self, layer_id: int) -> list[int]:
        return sorted(e for l, e in self.masked if l == layer_id)

    def __len__(self):
        return len(self.masked)
