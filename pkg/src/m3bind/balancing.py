"""Adaptive modality balancing: inverse-size sampling, LR scaling, loss weights."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12


@dataclass(frozen=True)
class ModalityStats:
    sizes: dict[str, int]
    beta: float = 0.5
    eta0: float = 2e-5

    def __post_init__(self):
        if not self.sizes:
            raise ValueError("ModalityStats needs at least one modality")
        for m, n in self.sizes.items():
            if int(n) != n or n < 1:
                raise ValueError(f"dataset size for {m!r} must be a positive integer, got {n}")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if not self.eta0 > 0:
            raise ValueError(f"eta0 must be positive, got {self.eta0}")


def sampling_probs(stats: ModalityStats) -> dict[str, float]:
    """p_m proportional to (1/|D_m|)^beta, computed in log space."""
    names = list(stats.sizes)
    logits = np.array([-stats.beta * math.log(stats.sizes[m]) for m in names])
    w = np.exp(logits - logits.max())
    p = w / w.sum()
    return dict(zip(names, p.tolist()))


def scaled_lr(stats: ModalityStats) -> dict[str, float]:
    return {m: stats.eta0 / math.sqrt(n) for m, n in stats.sizes.items()}


def loss_weight(stats: ModalityStats) -> dict[str, float]:
    return {m: 1.0 / math.sqrt(n) for m, n in stats.sizes.items()}


@dataclass(frozen=True)
class BalancePlan:
    probs: dict[str, float]
    lrs: dict[str, float]
    weights: dict[str, float]
    amb: bool = True
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if set(self.probs) != set(self.lrs) or set(self.probs) != set(self.weights):
            raise ValueError("probs, lrs and weights must cover the same modalities")
        total = sum(self.probs.values())
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"sampling probabilities sum to {total!r}, not 1")
        if any(p < 0 for p in self.probs.values()):
            raise ValueError("negative sampling probability")
        if any(v <= 0 for v in (*self.lrs.values(), *self.weights.values())):
            raise ValueError("learning rates and loss weights must be positive")
        object.__setattr__(self, "_cum", np.cumsum(list(self.probs.values())))

    @property
    def modalities(self) -> list[str]:
        return list(self.probs)

    def to_record(self) -> dict:
        return {"amb": self.amb, "probs": dict(self.probs), "lrs": dict(self.lrs),
                "weights": dict(self.weights)}


def make_plan(stats: ModalityStats, amb: bool = True) -> BalancePlan:
    """AMB on: the three balancing rules. AMB off: size-proportional sampling,
    every rate equal to eta0, every weight 1."""
    if amb:
        return BalancePlan(sampling_probs(stats), scaled_lr(stats), loss_weight(stats), True)
    total = sum(stats.sizes.values())
    probs = {m: n / total for m, n in stats.sizes.items()}
    return BalancePlan(probs, {m: stats.eta0 for m in stats.sizes},
                       {m: 1.0 for m in stats.sizes}, False)


def draw_many(plan: BalancePlan, rng: np.random.Generator, n: int) -> list[str]:
    """``n`` independent categorical draws (inverse-CDF on uniforms)."""
    names = plan.modalities
    u = rng.random(n)
    idx = np.searchsorted(plan._cum, u * plan._cum[-1], side="right")
    idx = np.minimum(idx, len(names) - 1)
    return [names[i] for i in idx]


def draw_modality(plan: BalancePlan, rng: np.random.Generator) -> str:
    return draw_many(plan, rng, 1)[0]
