"""Small MLP image/text encoders with unit-norm outputs and LoRA adapters.

Parameters live as plain float64 arrays in ``encoder.params``. A forward
pass given a :class:`~m3bind.autodiff.Tape` watches every non-frozen
parameter (and every attached adapter) under the key
``"<prefix>:<name>"`` so the trainer can route gradients back.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    Tape,
    Tensor,
    add,
    embedding_bag_mean,
    matmul,
    row_l2_normalize,
    scale,
    tanh,
)

DEFAULT_HIDDEN = (64, 64)
DEFAULT_EMBED_DIM = 32
DEFAULT_TOKEN_DIM = 32
LORA_INIT_STD = 0.02


@dataclass
class LoraAdapter:
    target: str
    A: np.ndarray
    B: np.ndarray
    alpha: float
    consumed: bool = False

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.A @ self.B)


class LoraConsumedError(RuntimeError):
    pass


def _mlp_params(rng: np.random.Generator, dims) -> dict[str, np.ndarray]:
    params = {}
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        params[f"b{i}"] = np.zeros(d_out)
    return params


class Encoder:
    """Shared machinery: parameter storage, freezing, adapters, MLP forward."""

    kind = "encoder"

    def __init__(self, modality_id: str, params: dict[str, np.ndarray], n_layers: int):
        self.modality_id = modality_id
        self.params = params
        self.n_layers = n_layers
        self.frozen: set[str] = set()
        self.adapters: dict[str, LoraAdapter] = {}

    @property
    def prefix(self) -> str:
        return f"{self.modality_id}/{self.kind}"

    @property
    def output_dim(self) -> int:
        return self.params[f"W{self.n_layers - 1}"].shape[1]

    def weight_names(self) -> list[str]:
        return [f"W{i}" for i in range(self.n_layers)]

    def head_names(self) -> list[str]:
        last = self.n_layers - 1
        return [f"W{last}", f"b{last}"]

    def freeze(self, names=None) -> None:
        self.frozen.update(self.params if names is None else names)

    def unfreeze(self, names=None) -> None:
        self.frozen.difference_update(self.params if names is None else names)

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Base parameters plus adapter matrices as ``lora.<target>.A/B``."""
        out = dict(self.params)
        for t, ad in self.adapters.items():
            out[f"lora.{t}.A"] = ad.A
            out[f"lora.{t}.B"] = ad.B
        return out

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.named_parameters().items() if k not in self.frozen}

    def copy(self) -> "Encoder":
        return copy.deepcopy(self)

    def _param(self, name: str, tape: Tape | None) -> Tensor:
        arr = self.params[name]
        if tape is None or name in self.frozen:
            return Tensor(arr)
        return tape.watch(arr, key=f"{self.prefix}:{name}")

    def _weight(self, name: str, tape: Tape | None) -> Tensor:
        w = self._param(name, tape)
        ad = self.adapters.get(name)
        if ad is None:
            return w
        if tape is None:
            A, B = Tensor(ad.A), Tensor(ad.B)
        else:
            A = tape.watch(ad.A, key=f"{self.prefix}:lora.{name}.A")
            B = tape.watch(ad.B, key=f"{self.prefix}:lora.{name}.B")
        return add(w, scale(matmul(A, B), ad.scaling))

    def _mlp(self, h: Tensor, tape: Tape | None) -> Tensor:
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = add(matmul(h, self._weight(f"W{i}", tape)), self._param(f"b{i}", tape))
            if i < last:
                h = tanh(h)
        return h


class ImageEncoder(Encoder):
    kind = "image"

    def __init__(self, modality_id: str, in_dim: int, seed: int,
                 hidden=DEFAULT_HIDDEN, embed_dim: int = DEFAULT_EMBED_DIM):
        rng = np.random.default_rng(seed)
        dims = (in_dim, *hidden, embed_dim)
        super().__init__(modality_id, _mlp_params(rng, dims), len(dims) - 1)

    @property
    def input_dim(self) -> int:
        return self.params["W0"].shape[0]


class TextEncoder(Encoder):
    kind = "text"

    def __init__(self, modality_id: str, vocab_size: int, seed: int,
                 token_dim: int = DEFAULT_TOKEN_DIM, hidden=DEFAULT_HIDDEN,
                 embed_dim: int = DEFAULT_EMBED_DIM):
        rng = np.random.default_rng(seed)
        params = {"table": rng.normal(0.0, 1.0, size=(vocab_size, token_dim))}
        dims = (token_dim, *hidden, embed_dim)
        params.update(_mlp_params(rng, dims))
        super().__init__(modality_id, params, len(dims) - 1)

    @property
    def vocab_size(self) -> int:
        return self.params["table"].shape[0]

    def weight_names(self) -> list[str]:
        return ["table", *super().weight_names()]

    def pooled(self, token_batch, tape: Tape | None = None) -> Tensor:
        return embedding_bag_mean(self._weight("table", tape), token_batch)


def StudentTextEncoder(vocab_size: int, seed: int, **kw) -> TextEncoder:
    """Text encoder with the same layout as the teachers, independently initialized."""
    return TextEncoder("student", vocab_size, seed, **kw)


def encode_image(enc: ImageEncoder, batch, tape: Tape | None = None) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != enc.input_dim:
        raise DimensionError(
            f"{enc.modality_id} image encoder expects (N, {enc.input_dim}) input, got {x.shape}")
    return row_l2_normalize(enc._mlp(x, tape))


def encode_text(enc: TextEncoder, token_batch, tape: Tape | None = None) -> Tensor:
    if len(token_batch) == 0:
        raise ValueError("empty token batch")
    return row_l2_normalize(enc._mlp(enc.pooled(token_batch, tape), tape))


def attach_lora(enc: Encoder, rank: int = 4, alpha: float = 8.0, seed: int = 0,
                targets=None) -> dict[str, LoraAdapter]:
    """Freeze every base parameter and attach one adapter per weight matrix.

    ``A`` ~ N(0, 0.02^2), ``B`` = 0, so the adapted forward equals the base
    forward exactly until the first update.
    """
    targets = enc.weight_names() if targets is None else list(targets)
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    for t in targets:
        d_in, d_out = enc.params[t].shape
        if rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} exceeds min({d_in}, {d_out}) for {enc.prefix}:{t}")
    rng = np.random.default_rng(seed)
    enc.freeze()
    adapters = {}
    for t in targets:
        d_in, d_out = enc.params[t].shape
        adapters[t] = LoraAdapter(t, rng.normal(0.0, LORA_INIT_STD, size=(d_in, rank)),
                                  np.zeros((rank, d_out)), float(alpha))
    enc.adapters.update(adapters)
    return adapters


def merge_lora(enc: Encoder, adapters: dict[str, LoraAdapter] | None = None) -> Encoder:
    """Return a plain copy of ``enc`` with ``W + (alpha/r) A B`` materialized.

    Adapters are consumed: merging the same adapters again raises
    :class:`LoraConsumedError` instead of silently applying the delta twice.
    """
    adapters = enc.adapters if adapters is None else adapters
    for ad in adapters.values():
        if ad.consumed:
            raise LoraConsumedError(f"adapter on {enc.prefix}:{ad.target} was already merged")
    merged = copy.deepcopy(enc)
    merged.adapters = {}
    for t, ad in adapters.items():
        merged.params[t] = merged.params[t] + ad.delta()
    for ad in adapters.values():
        ad.consumed = True
    return merged
