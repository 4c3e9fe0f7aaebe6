"""The optimizer and the three training phases.

* Phase 0 (:func:`pretrain_modality`): each modality's image/text pair is
  trained alone with the CLIP loss, then frozen.
* Phase A (:class:`BindTrainer`): LoRA adapters on every frozen encoder are
  trained on the weighted CLIP terms plus the cross-encoder text MSE, with
  adaptive modality balancing.
* Phase B (:class:`DistillTrainer`): one student text encoder is distilled
  from the bound text encoders, KD-only first, then KD + contrastive.

Every step draws from a generator keyed by (seed, phase, step), so a run
resumed from a checkpoint replays exactly the same batches.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .autodiff import NonFiniteError, Tape, backward, gather_rows, scale
from .balancing import BalancePlan, ModalityStats, draw_many, draw_modality, make_plan
from .checkpoint import Checkpoint, text_tensor
from .config import BindConfig, DistillConfig, EncoderConfig, PretrainConfig
from .encoders import (
    ImageEncoder,
    TextEncoder,
    attach_lora,
    encode_image,
    encode_text,
)
from .objectives import (
    BindLossReport,
    Temperature,
    clip_contrastive_loss,
    kd_contrastive_loss,
    kd_mse_loss,
    pairwise_text_mse,
    seskd_loss,
    total_bind_loss,
)
from .synth import SyntheticCorpus, derive_seed, stream
from .autodiff import mse as mse_op


class TrainingDivergence(FloatingPointError):
    def __init__(self, phase: str, step: int, cause: Exception | None = None):
        super().__init__(f"{phase} diverged at step {step}" + (f": {cause}" if cause else ""))
        self.phase = phase
        self.step = step


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------

class AdamW:
    """Decoupled weight decay Adam over a dict of named float64 arrays (updated in place)."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        """Update every parameter that has a gradient; ``lrs`` maps key -> rate."""
        for key in sorted(grads):
            p, g = params[key], grads[key]
            if p.shape != g.shape:
                raise ValueError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
                self.t[key] = 0
            self.t[key] += 1
            t = self.t[key]
            _kernels.adamw_update(p, np.ascontiguousarray(g), self.m[key], self.v[key],
                                  float(lrs[key]), self.beta1, self.beta2, self.eps,
                                  self.weight_decay, 1.0 - self.beta1 ** t, 1.0 - self.beta2 ** t)

    def state_tensors(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        out = {}
        for key in self.m:
            out[f"{prefix}/m/{key}"] = self.m[key]
            out[f"{prefix}/v/{key}"] = self.v[key]
            out[f"{prefix}/t/{key}"] = np.array(self.t[key], dtype=np.int64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str = "opt") -> None:
        self.m, self.v, self.t = {}, {}, {}
        head = f"{prefix}/m/"
        for name, arr in tensors.items():
            if name.startswith(head):
                key = name[len(head):]
                self.m[key] = np.array(arr, dtype=np.float64)
                self.v[key] = np.array(tensors[f"{prefix}/v/{key}"], dtype=np.float64)
                self.t[key] = int(tensors[f"{prefix}/t/{key}"])


def warmup_cosine(step: int, total: int, warmup_frac: float = 0.05, floor: float = 0.1) -> float:
    """Linear warm-up to 1 over ``warmup_frac * total`` steps, then cosine decay toward ``floor``."""
    if total <= 0:
        return 1.0
    warmup = max(1, int(round(warmup_frac * total)))
    if step < warmup:
        return (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


def _finite(x: float, phase: str, step: int) -> float:
    if not math.isfinite(x):
        raise TrainingDivergence(phase, step)
    return x


# --------------------------------------------------------------------------
# bundles
# --------------------------------------------------------------------------

@dataclass
class ModalityBundle:
    modality_id: str
    image: ImageEncoder
    text: TextEncoder
    corpus: SyntheticCorpus
    templates: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.corpus)

    def encoders(self):
        return (self.image, self.text)


def new_bundle(corpus: SyntheticCorpus, templates, seed: int,
               enc: EncoderConfig | None = None) -> ModalityBundle:
    enc = enc or EncoderConfig()
    m = corpus.modality_id
    kw = dict(hidden=tuple(enc.hidden), embed_dim=enc.embed_dim)
    image = ImageEncoder(m, corpus.obs_dim, derive_seed(seed, m, "image"), **kw)
    text = TextEncoder(m, corpus.vocab_size, derive_seed(seed, m, "text"),
                       token_dim=enc.token_dim, **kw)
    return ModalityBundle(m, image, text, corpus, templates)


def encoder_tensors(encoders) -> dict[str, np.ndarray]:
    out = {}
    for enc in encoders:
        for name, arr in enc.named_parameters().items():
            out[f"{enc.prefix}:{name}"] = arr
    return out


def load_encoder_tensors(encoders, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint values into existing parameter arrays (adapters must be attached)."""
    for enc in encoders:
        for name, arr in enc.named_parameters().items():
            key = f"{enc.prefix}:{name}"
            if key not in tensors:
                raise KeyError(f"checkpoint has no tensor {key!r}")
            src = tensors[key]
            if src.shape != arr.shape:
                raise ValueError(f"{key}: checkpoint shape {src.shape} != {arr.shape}")
            arr[...] = src


def _probe_batch(corpus: SyntheticCorpus) -> np.ndarray:
    """First record of every class: a fixed batch whose loss can reach zero."""
    return np.array([int(np.flatnonzero(corpus.labels == k)[0]) for k in range(corpus.num_classes)])


def clip_loss_on(bundle: ModalityBundle, idx, tau=0.07, symmetric=True) -> float:
    c = bundle.corpus
    img = encode_image(bundle.image, c.signals[idx])
    txt = encode_text(bundle.text, [c.tokens[i] for i in idx])
    return clip_contrastive_loss(img, txt, tau, symmetric).item() / len(idx)


# --------------------------------------------------------------------------
# phase 0
# --------------------------------------------------------------------------

def pretrain_modality(bundle: ModalityBundle, steps: int, config: PretrainConfig | None = None,
                      seed: int = 0) -> dict:
    """Train one image/text pair alone on the symmetric CLIP loss, then freeze it.

    Returns probe-batch losses before and after training.
    """
    cfg = config or PretrainConfig()
    m = bundle.modality_id
    probe = _probe_batch(bundle.corpus)
    try:
        before = clip_loss_on(bundle, probe, cfg.tau)
    except NonFiniteError as exc:
        raise TrainingDivergence(f"pretrain[{m}]", 0, exc) from exc
    params = encoder_tensors(bundle.encoders())
    opt = AdamW(weight_decay=cfg.weight_decay)
    c = bundle.corpus
    for t in range(steps):
        rng = stream(seed, "pretrain", m, t)
        idx = rng.integers(0, len(c), size=cfg.batch)
        tape = Tape()
        try:
            img = encode_image(bundle.image, c.signals[idx], tape)
            txt = encode_text(bundle.text, [c.tokens[i] for i in idx], tape)
            loss = scale(clip_contrastive_loss(img, txt, cfg.tau, symmetric=True), 1.0 / cfg.batch)
        except NonFiniteError as exc:
            raise TrainingDivergence(f"pretrain[{m}]", t, exc) from exc
        _finite(loss.item(), f"pretrain[{m}]", t)
        grads = tape.grads_by_key(backward(tape, loss))
        clip_grad_norm(grads, cfg.clip_norm)
        lr = cfg.lr * warmup_cosine(t, steps, cfg.warmup_frac)
        opt.step(params, grads, {k: lr for k in grads})
    for enc in bundle.encoders():
        enc.freeze()
    return {"modality": m, "probe_loss_before": before,
            "probe_loss_after": clip_loss_on(bundle, probe, cfg.tau)}


def pretrain_all(bundles: dict[str, ModalityBundle], config: PretrainConfig | None = None,
                 seed: int = 0, workers: int = 1) -> dict[str, dict]:
    """Phase 0 for every bundle; modalities are independent, so they may run in parallel."""
    cfg = config or PretrainConfig()

    def run(m):
        return pretrain_modality(bundles[m], cfg.steps, cfg, seed)

    names = list(bundles)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, names))
    else:
        results = [run(m) for m in names]
    return dict(zip(names, results))


# --------------------------------------------------------------------------
# phase A
# --------------------------------------------------------------------------

def attach_bind_adapters(bundles: dict[str, ModalityBundle], cfg: BindConfig, seed: int) -> None:
    for m, b in bundles.items():
        for enc in b.encoders():
            attach_lora(enc, cfg.lora_rank, cfg.lora_alpha, derive_seed(seed, m, enc.kind, "lora"))
            if cfg.train_heads:
                enc.unfreeze(enc.head_names())


def draw_texts(plan: BalancePlan, corpora: dict[str, SyntheticCorpus], n: int,
               rng: np.random.Generator, balanced: bool = True):
    """``n`` (modality, record index) pairs; modality drawn from the plan (or uniformly)."""
    if balanced:
        src = draw_many(plan, rng, n)
    else:
        names = plan.modalities
        src = [names[i] for i in rng.integers(0, len(names), size=n)]
    idx = [int(rng.integers(0, len(corpora[m]))) for m in src]
    return src, idx


class BindTrainer:
    """Text-anchored binding of frozen, LoRA-adapted modality bundles."""

    phase = "bind"

    def __init__(self, bundles: dict[str, ModalityBundle], config: BindConfig | None = None,
                 seed: int = 0):
        self.cfg = cfg = config or BindConfig()
        cfg.validate(bundles)
        names = cfg.modalities or list(bundles)
        self.bundles = {m: bundles[m] for m in names}
        self.seed = seed
        stats = ModalityStats({m: b.size for m, b in self.bundles.items()}, cfg.beta, cfg.eta0)
        self.plan = make_plan(stats, cfg.amb)
        self.tau = Temperature(cfg.tau, cfg.learnable_tau)
        self.opt = AdamW(weight_decay=cfg.weight_decay)
        self.step_count = 0
        self.log: list[dict] = []
        for b in self.bundles.values():
            for enc in b.encoders():
                if not enc.adapters:
                    raise ValueError(f"{enc.prefix} has no LoRA adapters attached")
        self.params = encoder_tensors(e for b in self.bundles.values() for e in b.encoders())
        self.params = {k: v for k, v in self.params.items() if self._trainable(k)}
        if cfg.learnable_tau:
            self.params["temperature:log_tau"] = self.tau.log_tau

    def _trainable(self, key: str) -> bool:
        prefix, name = key.split(":", 1)
        m, kind = prefix.split("/")
        enc = getattr(self.bundles[m], kind)
        return name not in enc.frozen

    def _group(self, key: str) -> str | None:
        return None if key.startswith("temperature:") else key.split("/", 1)[0]

    @property
    def modalities(self) -> list[str]:
        return list(self.bundles)

    def header(self) -> dict:
        return {"phase": self.phase, "header": True, "modalities": self.modalities,
                "plan": self.plan.to_record(), "iters": self.cfg.iters, "seed": self.seed}

    def losses(self, rng: np.random.Generator, tape: Tape | None):
        """Sample one step's batches and build the binding objective."""
        cfg, plan = self.cfg, self.plan
        if cfg.sample_pairs:
            drawn = [draw_modality(plan, rng)]
        else:
            drawn = list(self.modalities)
        clip = {}
        for m in drawn:
            b = self.bundles[m]
            idx = rng.integers(0, b.size, size=cfg.batch_pair)
            img = encode_image(b.image, b.corpus.signals[idx], tape)
            txt = encode_text(b.text, [b.corpus.tokens[i] for i in idx], tape)
            loss = clip_contrastive_loss(img, txt, self.tau, cfg.symmetric_loss, tape)
            clip[m] = scale(loss, 1.0 / cfg.batch_pair)
        mse = {}
        counts = {}
        if len(self.bundles) > 1:
            corpora = {m: b.corpus for m, b in self.bundles.items()}
            src, idx = draw_texts(plan, corpora, cfg.batch_text, rng, cfg.sample_text)
            texts = [corpora[m].tokens[i] for m, i in zip(src, idx)]
            embeds = {m: encode_text(b.text, texts, tape) for m, b in self.bundles.items()}
            mse = pairwise_text_mse(embeds)
            counts = {m: src.count(m) for m in self.modalities}
        report = total_bind_loss(clip, mse, plan.weights, cfg.lam, cfg.pair_weighting)
        return report, drawn, counts

    def step(self) -> BindLossReport:
        t = self.step_count
        rng = stream(self.seed, self.phase, t)
        tape = Tape()
        try:
            report, drawn, counts = self.losses(rng, tape)
        except NonFiniteError as exc:
            raise TrainingDivergence(self.phase, t, exc) from exc
        _finite(report.total, self.phase, t)
        grads = {k: g for k, g in tape.grads_by_key(backward(tape, report.loss)).items()
                 if k in self.params}
        gnorm = clip_grad_norm(grads, self.cfg.clip_norm)
        mult = warmup_cosine(t, self.cfg.iters, self.cfg.warmup_frac, self.cfg.min_lr_frac)
        lrs = {}
        for k in grads:
            g = self._group(k)
            lrs[k] = mult * (self.cfg.eta0 if g is None else self.plan.lrs[g])
        self.opt.step(self.params, grads, lrs)
        if self.cfg.learnable_tau:
            self.tau.clamp_()
        rec = {"phase": self.phase, "step": t, "drawn": drawn, "text_draws": counts,
               "lr_mult": mult, "grad_norm": gnorm, "tau": self.tau.value}
        rec.update(report.to_record())
        self.log.append(rec)
        self.step_count += 1
        return report

    def run(self, until: int | None = None, callback=None) -> list[dict]:
        until = self.cfg.iters if until is None else min(until, self.cfg.iters)
        while self.step_count < until:
            self.step()
            if callback is not None:
                callback(self)
        return self.log

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = encoder_tensors(e for b in self.bundles.values() for e in b.encoders())
        out.update(self.opt.state_tensors())
        out[f"{self.phase}/step"] = np.array(self.step_count, dtype=np.int64)
        out["temperature:log_tau"] = self.tau.log_tau
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        load_encoder_tensors([e for b in self.bundles.values() for e in b.encoders()], tensors)
        self.opt.load_state_tensors(tensors)
        self.step_count = int(tensors[f"{self.phase}/step"])
        self.tau.log_tau[...] = tensors["temperature:log_tau"]


def bind_phase(bundles: dict[str, ModalityBundle], config: BindConfig | None = None,
               seed: int = 0) -> tuple[dict[str, ModalityBundle], list[dict]]:
    """Run phase A to completion; adapters must already be attached."""
    trainer = BindTrainer(bundles, config, seed)
    trainer.run()
    return trainer.bundles, [trainer.header()] + trainer.log


# --------------------------------------------------------------------------
# phase B
# --------------------------------------------------------------------------

class DistillTrainer:
    """Distill the bound text encoders into one student text encoder."""

    phase = "distill"

    def __init__(self, bundles: dict[str, ModalityBundle], student: TextEncoder,
                 plan: BalancePlan, config: DistillConfig | None = None, seed: int = 0):
        self.cfg = config or DistillConfig()
        self.bundles = {m: bundles[m] for m in plan.modalities}
        self.student = student
        self.plan = plan
        self.seed = seed
        self.opt = AdamW(weight_decay=self.cfg.weight_decay)
        self.params = encoder_tensors([student])
        self.step_count = 0
        self.log: list[dict] = []

    @property
    def total_iters(self) -> int:
        return self.cfg.iters_stage1 + self.cfg.iters_stage2

    def stage(self, t: int) -> int:
        return 1 if t < self.cfg.iters_stage1 else 2

    def header(self) -> dict:
        return {"phase": self.phase, "header": True, "modalities": list(self.bundles),
                "iters_stage1": self.cfg.iters_stage1, "iters_stage2": self.cfg.iters_stage2,
                "seed": self.seed}

    def step(self) -> float:
        cfg, t = self.cfg, self.step_count
        rng = stream(self.seed, self.phase, t)
        corpora = {m: b.corpus for m, b in self.bundles.items()}
        src, idx = draw_texts(self.plan, corpora, cfg.batch_text, rng)
        texts = [corpora[m].tokens[i] for m, i in zip(src, idx)]
        tape = Tape()
        try:
            student = encode_text(self.student, texts, tape)
            teachers = {m: encode_text(b.text, texts) for m, b in self.bundles.items()}
            kd = kd_mse_loss(teachers, student)
            contrastive = None
            per_mod = {}
            if self.stage(t) == 2 and cfg.contrastive:
                src_arr = np.array(src)
                for m, b in self.bundles.items():
                    rows = np.flatnonzero(src_arr == m)
                    if rows.size == 0:
                        continue
                    imgs = encode_image(b.image, b.corpus.signals[[idx[r] for r in rows]])
                    term = kd_contrastive_loss(gather_rows(student, rows), imgs, cfg.tau)
                    per_mod[m] = term.item()
                    contrastive = term if contrastive is None else contrastive + term
                if contrastive is not None:
                    contrastive = scale(contrastive, 1.0 / cfg.batch_text)
            loss = seskd_loss(kd, contrastive)
        except NonFiniteError as exc:
            raise TrainingDivergence(self.phase, t, exc) from exc
        value = _finite(loss.item(), self.phase, t)
        grads = tape.grads_by_key(backward(tape, loss))
        gnorm = clip_grad_norm(grads, cfg.clip_norm)
        mult = warmup_cosine(t, self.total_iters, cfg.warmup_frac, cfg.min_lr_frac)
        self.opt.step(self.params, grads, {k: cfg.lr * mult for k in grads})
        self.log.append({"phase": self.phase, "step": t, "stage": self.stage(t),
                         "kd": kd.item(), "contrastive": per_mod, "total": value,
                         "lr_mult": mult, "grad_norm": gnorm})
        self.step_count += 1
        return value

    def run(self, until: int | None = None) -> list[dict]:
        until = self.total_iters if until is None else min(until, self.total_iters)
        while self.step_count < until:
            self.step()
        return self.log

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = encoder_tensors([self.student])
        out.update(self.opt.state_tensors())
        out[f"{self.phase}/step"] = np.array(self.step_count, dtype=np.int64)
        return out

    def load_state_tensors(self, tensors) -> None:
        load_encoder_tensors([self.student], tensors)
        self.opt.load_state_tensors(tensors)
        self.step_count = int(tensors[f"{self.phase}/step"])


def new_student(vocab_size: int, seed: int, enc: EncoderConfig | None = None) -> TextEncoder:
    enc = enc or EncoderConfig()
    return TextEncoder("student", vocab_size, derive_seed(seed, "student", "text"),
                       token_dim=enc.token_dim, hidden=tuple(enc.hidden), embed_dim=enc.embed_dim)


def distill_phase(bundles: dict[str, ModalityBundle], student: TextEncoder, plan: BalancePlan,
                  config: DistillConfig | None = None, seed: int = 0):
    trainer = DistillTrainer(bundles, student, plan, config, seed)
    trainer.run()
    return trainer.student, [trainer.header()] + trainer.log


def student_teacher_mse(bundles: dict[str, ModalityBundle], student: TextEncoder, texts) -> float:
    """Mean over teachers of the student-teacher embedding MSE on ``texts``."""
    s = encode_text(student, texts)
    vals = [mse_op(encode_text(b.text, texts), s).item() for b in bundles.values()]
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# persistence helpers
# --------------------------------------------------------------------------

def make_checkpoint(tensors: dict[str, np.ndarray], fingerprint: str, config: dict) -> Checkpoint:
    tensors = dict(tensors)
    tensors["meta/config"] = text_tensor(json.dumps(config, sort_keys=True, separators=(",", ":")))
    return Checkpoint(tensors, fingerprint)


def write_jsonl(records, path, mode: str = "w") -> None:
    with open(path, mode) as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")
