"""In-memory orchestration of phase 0 -> A -> B plus evaluation and ablations.

The CLI wraps these functions with file I/O; the acceptance suite calls them
directly. Phase-0 encoders depend only on (seed, modality), so a
:class:`Phase0Cache` lets ablation variants share them.
"""
from __future__ import annotations

import copy
import itertools
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .balancing import ModalityStats, make_plan
from .config import RunConfig
from .evaluation import (
    cross_image_matrix,
    cross_image_retrieval,
    few_shot_curve,
    image_embeddings,
    student_consistency,
    text_to_image_retrieval,
    zero_shot_for,
    metric_record,
)
from .synth import LoadedDataset, as_loaded, build_dataset
from .training import (
    BindTrainer,
    DistillTrainer,
    ModalityBundle,
    attach_bind_adapters,
    new_bundle,
    new_student,
    pretrain_all,
    student_teacher_mse,
)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("M3BIND_THREADS", "1")))
    except ValueError:
        return 1


def make_dataset(cfg: RunConfig) -> LoadedDataset:
    d = cfg.dataset
    ds = build_dataset(cfg.master_seed, {m: tuple(v) for m, v in d.modalities.items()},
                       d.num_classes, d.latent_dim, d.vocab_size, d.templates_per_class,
                       d.noise_sigma, d.heldout_per_class, d.num_probes)
    loaded = as_loaded(ds)
    loaded.fingerprint = cfg.dataset_fingerprint()
    return loaded


def fresh_bundles(data: LoadedDataset, cfg: RunConfig, modalities=None) -> dict[str, ModalityBundle]:
    names = list(data.corpora) if modalities is None else list(modalities)
    return {m: new_bundle(data.corpora[m], data.templates[m], cfg.master_seed, cfg.encoder)
            for m in names}


@dataclass
class Phase0Cache:
    """Frozen phase-0 bundles keyed by (master seed, modality)."""
    store: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)

    def get(self, data: LoadedDataset, cfg: RunConfig, modalities) -> dict[str, ModalityBundle]:
        missing = [m for m in modalities if (cfg.master_seed, m) not in self.store]
        if missing:
            todo = fresh_bundles(data, cfg, missing)
            rep = pretrain_all(todo, cfg.pretrain, cfg.master_seed, worker_count())
            for m in missing:
                self.store[(cfg.master_seed, m)] = todo[m]
                self.reports[(cfg.master_seed, m)] = rep[m]
        return {m: copy.deepcopy(self.store[(cfg.master_seed, m)]) for m in modalities}


@dataclass
class RunResult:
    config: RunConfig
    data: LoadedDataset
    phase0: dict[str, ModalityBundle]
    bundles: dict[str, ModalityBundle]
    bind_log: list = field(default_factory=list)
    student: object = None
    distill_log: list = field(default_factory=list)
    distill_mse: tuple | None = None


def distill_texts(data: LoadedDataset, modalities) -> list:
    return [t for m in modalities for t in data.eval.heldout[m].tokens]


def run_experiment(cfg: RunConfig, data: LoadedDataset | None = None,
                   cache: Phase0Cache | None = None, distill: bool | None = None) -> RunResult:
    data = make_dataset(cfg) if data is None else data
    cache = Phase0Cache() if cache is None else cache
    names = cfg.modalities()
    cfg.bind.validate(data.corpora)
    phase0 = cache.get(data, cfg, names)
    bundles = copy.deepcopy(phase0)
    attach_bind_adapters(bundles, cfg.bind, cfg.master_seed)
    trainer = BindTrainer(bundles, cfg.bind, cfg.master_seed)
    trainer.run()
    result = RunResult(cfg, data, phase0, trainer.bundles, [trainer.header()] + trainer.log)
    if cfg.distill.enabled if distill is None else distill:
        student = new_student(next(iter(data.corpora.values())).vocab_size, cfg.master_seed, cfg.encoder)
        texts = distill_texts(data, names)
        before = student_teacher_mse(trainer.bundles, student, texts)
        dt = DistillTrainer(trainer.bundles, student, trainer.plan, cfg.distill, cfg.master_seed)
        dt.run()
        after = student_teacher_mse(trainer.bundles, student, texts)
        result.student = student
        result.distill_log = [dt.header()] + dt.log
        result.distill_mse = (before, after)
    return result


def bind_plan(bundles: dict[str, ModalityBundle], cfg: RunConfig):
    stats = ModalityStats({m: b.size for m, b in bundles.items()}, cfg.bind.beta, cfg.bind.eta0)
    return make_plan(stats, cfg.bind.amb)


# --------------------------------------------------------------------------
# evaluation suite
# --------------------------------------------------------------------------

def evaluate(bundles: dict[str, ModalityBundle], data: LoadedDataset, cfg: RunConfig,
             student=None, tasks=("zero-shot", "few-shot", "retrieval", "cross-image", "student"),
             pair=None, setting: str = "default") -> list[dict]:
    ev = cfg.eval
    ks = tuple(ev.ks)
    seed = cfg.master_seed
    records = []
    if "zero-shot" in tasks:
        for m, b in bundles.items():
            rep = zero_shot_for(b, b.text, data.eval.heldout[m], data.templates[m], ev.prompt_mode)
            records.append(metric_record("zero-shot", m, setting, seed, rep.to_record()))
    if "few-shot" in tasks:
        for m, b in bundles.items():
            h = data.eval.heldout[m]
            curve = few_shot_curve(image_embeddings(b, h.signals), h.labels, ev.shots, ev.probe_seeds)
            for s, (mean, std) in curve.items():
                records.append(metric_record("few-shot", m, f"{setting}/shots={s}", seed,
                                             {"accuracy_mean": mean, "accuracy_std": std,
                                              "seeds": ev.probe_seeds}))
    if "retrieval" in tasks:
        for m, b in bundles.items():
            r = text_to_image_retrieval(b, data.eval.heldout[m], ks)
            records.append(metric_record("text-image", m, setting, seed, _recall_record(r)))
    if "cross-image" in tasks:
        pairs = [tuple(pair)] if pair else list(itertools.combinations(bundles, 2))
        for a, b in pairs:
            r = cross_image_retrieval(bundles[a], bundles[b], data.eval, ks)
            records.append(metric_record("cross-image", f"{a}:{b}", setting, seed, _recall_record(r)))
    if "student" in tasks and student is not None:
        cons = student_consistency(bundles, student, data.eval.heldout, data.templates, ev.prompt_mode)
        for m, v in cons.items():
            records.append(metric_record("student", m, setting, seed, v))
    return records


def _recall_record(r: dict) -> dict:
    return {"recall_at": {str(k): v for k, v in r.items()}}


def mean_cross_recall(bundles, data: LoadedDataset, k: int = 1) -> dict[tuple[str, str], float]:
    return {p: v[k] for p, v in cross_image_matrix(bundles, data.eval).items()}


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

SUBSET_ORDER = ["xray", "ecg", "retina", "path", "ct"]


def variant(cfg: RunConfig, **bind_changes) -> RunConfig:
    return replace(cfg, bind=replace(cfg.bind, **bind_changes))


def ablation_grid(cfg: RunConfig, data: LoadedDataset | None = None,
                  cache: Phase0Cache | None = None) -> list[dict]:
    """Modality-subset sweep (xray,ecg -> +retina -> +path -> +ct) and AMB / lambda / SESKD toggles."""
    data = make_dataset(cfg) if data is None else data
    cache = Phase0Cache() if cache is None else cache
    records = []
    seed = cfg.master_seed
    for n in range(2, len(SUBSET_ORDER) + 1):
        subset = SUBSET_ORDER[:n]
        if not all(m in data.corpora for m in subset):
            break
        res = run_experiment(variant(cfg, modalities=subset), data, cache, distill=False)
        rec = mean_cross_recall(res.bundles, data)
        records.append(metric_record("ablation-subset", "xray:ecg", "+".join(subset), seed,
                                     {"recall_at_1": rec[("xray", "ecg")],
                                      "mean_recall_at_1": float(np.mean(list(rec.values())))}))
    for name, changes in (("full", {}), ("amb_off", {"amb": False}), ("lambda0", {"lam": 0.0})):
        res = run_experiment(variant(cfg, **changes), data, cache, distill=(name == "full"))
        rec = mean_cross_recall(res.bundles, data)
        zs = {m: zero_shot_for(b, b.text, data.eval.heldout[m], data.templates[m]).accuracy
              for m, b in res.bundles.items()}
        metrics = {"mean_recall_at_1": float(np.mean(list(rec.values()))), "zero_shot": zs}
        records.append(metric_record("ablation", "all", name, seed, metrics))
        if name == "full" and res.student is not None:
            cons = student_consistency(res.bundles, res.student, data.eval.heldout, data.templates)
            records.append(metric_record("ablation", "all", "seskd_on", seed,
                                         {"student_zero_shot": {m: v["student"] for m, v in cons.items()}}))
            records.append(metric_record("ablation", "all", "seskd_off", seed,
                                         {"teacher_zero_shot": {m: v["teacher"] for m, v in cons.items()}}))
    return records
