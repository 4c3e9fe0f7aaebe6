"""Loss functions for binding and distillation.

All losses take and return :class:`~m3bind.autodiff.Tensor` so they can be
recorded on a tape. Contrastive losses are batch *sums*; the trainers divide
by the batch size before stepping.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    DimensionError,
    Tape,
    Tensor,
    add,
    diagonal,
    exp,
    log_softmax_rows,
    matmul,
    mse,
    mul,
    reduce_sum,
    scale,
    transpose,
)

UNIT_TOL = 1e-6
TAU_MIN, TAU_MAX = 1e-3, 10.0


@dataclass
class Temperature:
    """Softmax temperature; when learnable it is stored as ``log_tau``."""

    tau: float = 0.07
    learnable: bool = False
    log_tau: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        self.log_tau = np.array([math.log(self.tau)])

    @property
    def value(self) -> float:
        return float(np.exp(self.log_tau[0])) if self.learnable else self.tau

    def clamp_(self) -> None:
        np.clip(self.log_tau, math.log(TAU_MIN), math.log(TAU_MAX), out=self.log_tau)

    def divide(self, logits: Tensor, tape: Tape | None = None) -> Tensor:
        if not self.learnable:
            return scale(logits, 1.0 / self.tau)
        lt = Tensor(self.log_tau) if tape is None else tape.watch(self.log_tau, key="temperature:log_tau")
        return mul(logits, exp(scale(lt, -1.0)))


def _as_temperature(tau) -> Temperature:
    return tau if isinstance(tau, Temperature) else Temperature(float(tau))


def _check_unit_rows(x: Tensor, name: str) -> None:
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise ValueError(f"{name} row {bad[0]} has norm {norms[bad[0]]:.6f}; expected unit rows")


def _one_way(rows: Tensor, cols: Tensor, tau: Temperature, tape) -> Tensor:
    logits = tau.divide(matmul(rows, transpose(cols)), tape)
    return scale(reduce_sum(diagonal(log_softmax_rows(logits))), -1.0)


def clip_contrastive_loss(img: Tensor, txt: Tensor, tau=0.07, symmetric: bool = False,
                          tape: Tape | None = None) -> Tensor:
    """Image-to-text InfoNCE summed over the batch; row i of ``img`` pairs with row i of ``txt``.

    ``symmetric=True`` averages the image->text and text->image directions.
    ``tape`` is only needed for a learnable temperature.
    """
    if img.data.ndim != 2 or img.shape != txt.shape:
        raise DimensionError(f"clip loss needs equal (N, d) inputs, got {img.shape} and {txt.shape}")
    if img.shape[0] == 0:
        raise ValueError("clip loss needs a non-empty batch")
    _check_unit_rows(img, "image embedding")
    _check_unit_rows(txt, "text embedding")
    tau = _as_temperature(tau)
    i2t = _one_way(img, txt, tau, tape)
    if not symmetric:
        return i2t
    return scale(add(i2t, _one_way(txt, img, tau, tape)), 0.5)


def pairwise_text_mse(embeds: dict[str, Tensor]) -> dict[tuple[str, str], Tensor]:
    """Mean squared difference for every unordered pair of text encoders."""
    shapes = {m: t.shape for m, t in embeds.items()}
    if len(set(shapes.values())) > 1:
        raise DimensionError(f"text embeddings differ in shape: {shapes}")
    return {(a, b): mse(embeds[a], embeds[b]) for a, b in itertools.combinations(embeds, 2)}


@dataclass
class BindLossReport:
    per_modality_clip: dict[str, float]
    per_pair_mse: dict[tuple[str, str], float]
    total: float
    weights_used: dict[str, float]
    lam: float
    pair_weighting: str = "inside"
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    def recompute(self) -> float:
        w = self.weights_used
        clip = sum(w[m] * v for m, v in self.per_modality_clip.items())
        if self.pair_weighting == "inside":
            pairs = sum(w[a] * w[b] * v for (a, b), v in self.per_pair_mse.items())
        else:
            pairs = sum(self.per_pair_mse.values())
        return clip + self.lam * pairs

    def to_record(self) -> dict:
        return {
            "clip": dict(self.per_modality_clip),
            "mse": {f"{a}|{b}": v for (a, b), v in self.per_pair_mse.items()},
            "total": self.total,
            "weights": dict(self.weights_used),
            "lambda": self.lam,
        }


def total_bind_loss(clip_losses: dict[str, Tensor], mse_losses: dict[tuple[str, str], Tensor],
                    weights: dict[str, float], lam: float,
                    pair_weighting: str = "inside") -> BindLossReport:
    """Weighted CLIP terms plus lambda times the text-alignment pair terms.

    With ``pair_weighting="inside"`` each unordered pair (a, b) contributes
    ``w_a * w_b * mse_ab``; ``"none"`` drops the pair weights.
    """
    if pair_weighting not in ("inside", "none"):
        raise ValueError(f"unknown pair_weighting {pair_weighting!r}")
    needed = set(clip_losses) | {m for pair in mse_losses for m in pair}
    missing = sorted(needed - set(weights))
    if missing:
        raise KeyError(f"no loss weight for modality {missing[0]!r}")
    terms = [scale(v, weights[m]) for m, v in clip_losses.items()]
    for (a, b), v in mse_losses.items():
        c = lam * (weights[a] * weights[b] if pair_weighting == "inside" else 1.0)
        terms.append(scale(v, c))
    total = terms[0] if terms else Tensor(0.0)
    for t in terms[1:]:
        total = add(total, t)
    return BindLossReport(
        per_modality_clip={m: v.item() for m, v in clip_losses.items()},
        per_pair_mse={p: v.item() for p, v in mse_losses.items()},
        total=total.item(),
        weights_used={m: float(weights[m]) for m in sorted(needed)},
        lam=float(lam),
        pair_weighting=pair_weighting,
        loss=total,
    )


def kd_mse_loss(teacher_embeds: dict[str, Tensor], student_embed: Tensor) -> Tensor:
    """Sum over teachers of the MSE between teacher and student embeddings."""
    total = None
    for m, t in teacher_embeds.items():
        if t.shape != student_embed.shape:
            raise DimensionError(f"teacher {m} shape {t.shape} != student shape {student_embed.shape}")
        term = mse(t, student_embed)
        total = term if total is None else add(total, term)
    if total is None:
        raise ValueError("no teacher embeddings given")
    return total


def kd_contrastive_loss(student_txt: Tensor, imgs: Tensor, tau=0.07,
                        tape: Tape | None = None) -> Tensor:
    """Student text row i against all image rows j; same kernel as the CLIP loss."""
    return clip_contrastive_loss(student_txt, imgs, tau, symmetric=False, tape=tape)


def seskd_loss(kd: Tensor, contrastive: Tensor | None = None) -> Tensor:
    """Unweighted sum of the distillation terms; ``contrastive=None`` is the KD-only stage."""
    if contrastive is None:
        return kd
    return add(kd, contrastive)
