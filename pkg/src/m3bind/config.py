"""Run configuration, canonical JSON and SHA-256 fingerprints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    modalities: dict = field(default_factory=lambda: {
        "xray": [48, 4000], "ct": [96, 1500], "retina": [32, 800],
        "ecg": [24, 400], "path": [64, 2000]})
    num_classes: int = 8
    latent_dim: int = 16
    vocab_size: int = 64
    templates_per_class: int = 4
    noise_sigma: float = 0.1
    heldout_per_class: int = 20
    num_probes: int = 50


@dataclass
class EncoderConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    embed_dim: int = 32
    token_dim: int = 32


@dataclass
class PretrainConfig:
    steps: int = 1000
    lr: float = 3e-3
    batch: int = 72
    tau: float = 0.2
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    clip_norm: float = 1.0


@dataclass
class BindConfig:
    # 0.07 saturates the contrastive loss before images settle on their text
    tau: float = 0.2
    learnable_tau: bool = False
    beta: float = 0.5
    lam: float = 10.0
    # desk-scale default; 2e-5 suits large pretrained backbones
    eta0: float = 0.5
    batch_pair: int = 72
    batch_text: int = 64
    iters: int = 3000
    lora_rank: int = 8
    lora_alpha: float = 8.0
    amb: bool = True
    symmetric_loss: bool = True
    modalities: list = field(default_factory=list)
    pair_weighting: str = "inside"
    sample_pairs: bool = True
    sample_text: bool = True
    train_heads: bool = False
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.1
    checkpoint_every: int = 0

    def validate(self, available=None) -> None:
        for name in ("tau", "eta0", "batch_pair", "batch_text", "lora_rank", "lora_alpha"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"bind.{name} must be positive")
        if self.iters < 0 or self.lam < 0 or self.beta < 0:
            raise ConfigError("bind.iters, bind.lam and bind.beta must be >= 0")
        if available is not None:
            subset = self.modalities or list(available)
            if not subset:
                raise ConfigError("modality subset is empty")
            unknown = [m for m in subset if m not in available]
            if unknown:
                raise ConfigError(f"unknown modality {unknown[0]!r}")

    @classmethod
    def large_scale(cls, **kw) -> "BindConfig":
        """Schedule for large pretrained backbones: eta0 2e-5, 15,000 iterations."""
        return cls(**{"eta0": 2e-5, "iters": 15000, "tau": 0.07, "lora_rank": 4, **kw})


@dataclass
class DistillConfig:
    enabled: bool = True
    contrastive: bool = True
    iters_stage1: int = 600
    iters_stage2: int = 600
    lr: float = 3e-3
    batch_text: int = 64
    tau: float = 0.2
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.1
    clip_norm: float = 1.0

    @classmethod
    def large_scale(cls, **kw) -> "DistillConfig":
        return cls(**{"iters_stage1": 1200, "iters_stage2": 1200, **kw})


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [1, 5, 10])
    shots: list = field(default_factory=lambda: [1, 5, 10])
    probe_seeds: int = 5
    prompt_mode: str = "multi"


@dataclass
class RunConfig:
    master_seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    bind: BindConfig = field(default_factory=BindConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def modalities(self) -> list[str]:
        return list(self.bind.modalities or self.dataset.modalities)

    def fingerprint(self, section: str | None = None) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        if section is not None:
            d = {"master_seed": self.master_seed, section: d[section]}
        return fingerprint(d)

    def dataset_fingerprint(self) -> str:
        return self.fingerprint("dataset")


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, d: dict, where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config key {(where + '.' if where else '') + unknown[0]!r}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in d.items()}
    return cls(**kwargs)


def _normalize(x):
    if isinstance(x, bool) or x is None or isinstance(x, (str, int)):
        return x
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ConfigError("non-finite number in config")
        return 0.0 if x == 0 else x
    if isinstance(x, dict):
        return {str(k): _normalize(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_normalize(v) for v in x]
    raise ConfigError(f"cannot canonicalize {type(x).__name__}")


def canonical_json(d) -> str:
    return json.dumps(_normalize(d), sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(d) -> str:
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def set_path(d: dict, dotted: str, value) -> None:
    """``set_path(cfg, "bind.lam", 0)`` for CLI overrides."""
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            raise ConfigError(f"no config section {k!r} in {dotted!r}")
        cur = cur[k]
    cur[keys[-1]] = value
