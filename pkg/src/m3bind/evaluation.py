"""Zero-shot classification, few-shot linear probes and retrieval metrics.

Retrieval ranks gallery rows by cosine similarity; ties go to the lower
gallery index, so every metric here is deterministic.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .encoders import TextEncoder, encode_image, encode_text
from .synth import EvalSplit

DEFAULT_KS = (1, 5, 10)


@dataclass
class PromptSet:
    templates: list[list[list[int]]]
    mode: str = "multi"

    def __post_init__(self):
        if self.mode not in ("naive", "multi"):
            raise ValueError(f"prompt mode must be 'naive' or 'multi', got {self.mode!r}")
        for k, pool in enumerate(self.templates):
            if not pool:
                raise ValueError(f"class {k} has no prompt template")

    @property
    def num_classes(self) -> int:
        return len(self.templates)

    def per_class(self) -> list[list[list[int]]]:
        return [pool[:1] for pool in self.templates] if self.mode == "naive" else self.templates


@dataclass
class MetricsReport:
    accuracy: float | None = None
    macro_f1: float | None = None
    precision: float | None = None
    recall_at: dict = field(default_factory=dict)
    per_class_counts: list = field(default_factory=list)
    n: int = 0

    def to_record(self) -> dict:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        return d


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def classification_report(pred, labels, num_classes: int) -> MetricsReport:
    pred, labels = np.asarray(pred), np.asarray(labels)
    tp = np.array([np.sum((pred == k) & (labels == k)) for k in range(num_classes)], float)
    npred = np.array([np.sum(pred == k) for k in range(num_classes)], float)
    ntrue = np.array([np.sum(labels == k) for k in range(num_classes)], float)
    prec = np.divide(tp, npred, out=np.zeros_like(tp), where=npred > 0)
    rec = np.divide(tp, ntrue, out=np.zeros_like(tp), where=ntrue > 0)
    f1 = np.divide(2 * prec * rec, prec + rec, out=np.zeros_like(tp), where=(prec + rec) > 0)
    present = ntrue > 0
    return MetricsReport(
        accuracy=float(np.mean(pred == labels)),
        macro_f1=float(f1[present].mean()),
        precision=float(prec[present].mean()),
        per_class_counts=ntrue.astype(int).tolist(),
        n=int(labels.size),
    )


def class_embeddings(prompts: PromptSet, text_encoder: TextEncoder) -> np.ndarray:
    """Mean of each class's template embeddings, re-normalized."""
    rows = []
    for pool in prompts.per_class():
        rows.append(encode_text(text_encoder, pool).data.mean(axis=0))
    return _unit(np.array(rows))


def zero_shot_predict(img_embeds, class_embeds) -> np.ndarray:
    return np.argmax(_unit(img_embeds) @ class_embeds.T, axis=1)


def zero_shot_classify(img_embeds, prompts: PromptSet, text_encoder: TextEncoder,
                       labels) -> MetricsReport:
    cls = class_embeddings(prompts, text_encoder)
    if cls.shape[1] != np.shape(img_embeds)[1]:
        raise ValueError(f"text encoder dim {cls.shape[1]} != image embedding dim {np.shape(img_embeds)[1]}")
    return classification_report(zero_shot_predict(img_embeds, cls), labels, prompts.num_classes)


def _recalls(ranks: np.ndarray, ks) -> dict[int, float]:
    return {int(k): float(np.mean(ranks < k)) for k in ks}


def retrieval(query_embeds, gallery_embeds, pair_index, ks=DEFAULT_KS) -> dict[int, float]:
    """Recall@k where query i's single correct item is gallery row ``pair_index[i]``."""
    q, g = _unit(query_embeds), _unit(gallery_embeds)
    pair_index = np.asarray(pair_index, dtype=np.int64)
    if pair_index.shape != (q.shape[0],):
        raise ValueError("pair_index needs one entry per query")
    if pair_index.size and (pair_index.min() < 0 or pair_index.max() >= g.shape[0]):
        raise IndexError(f"pair_index entries must lie in [0, {g.shape[0]})")
    relevant = np.zeros((q.shape[0], g.shape[0]), dtype=np.bool_)
    relevant[np.arange(q.shape[0]), pair_index] = True
    return _recalls(_kernels.first_relevant_rank(q @ g.T, relevant), ks)


def class_retrieval(query_embeds, gallery_embeds, query_labels, gallery_labels,
                    ks=DEFAULT_KS) -> dict[int, float]:
    """Recall@k where any gallery row of the query's class counts as a hit."""
    q, g = _unit(query_embeds), _unit(gallery_embeds)
    relevant = np.asarray(query_labels)[:, None] == np.asarray(gallery_labels)[None, :]
    if not relevant.any(axis=1).all():
        raise ValueError("some query has no gallery item of its class")
    return _recalls(_kernels.first_relevant_rank(q @ g.T, relevant), ks)


def image_embeddings(bundle, signals) -> np.ndarray:
    return encode_image(bundle.image, signals).numpy()


def cross_image_retrieval(bundle_a, bundle_b, probe: EvalSplit, ks=DEFAULT_KS) -> dict[int, float]:
    """Image(a) -> image(b) class-level retrieval over the probe tuples, through the shared space."""
    for m in (bundle_a.modality_id, bundle_b.modality_id):
        if m not in probe.probes:
            raise KeyError(f"probe set has no signals for modality {m!r}")
    qa = image_embeddings(bundle_a, probe.probes[bundle_a.modality_id].signals)
    gb = image_embeddings(bundle_b, probe.probes[bundle_b.modality_id].signals)
    return class_retrieval(qa, gb, probe.probe_labels, probe.probe_labels, ks)


def cross_image_matrix(bundles: dict, probe: EvalSplit, ks=DEFAULT_KS) -> dict[tuple[str, str], dict]:
    """Both directions for every unordered modality pair, averaged."""
    out = {}
    for a, b in itertools.combinations(bundles, 2):
        ab = cross_image_retrieval(bundles[a], bundles[b], probe, ks)
        ba = cross_image_retrieval(bundles[b], bundles[a], probe, ks)
        out[(a, b)] = {k: 0.5 * (ab[k] + ba[k]) for k in ab}
    return out


def text_to_image_retrieval(bundle, heldout, ks=DEFAULT_KS) -> dict[int, float]:
    txt = encode_text(bundle.text, heldout.tokens).numpy()
    img = image_embeddings(bundle, heldout.signals)
    return class_retrieval(txt, img, heldout.labels, heldout.labels, ks)


def fit_softmax_regression(x, y, num_classes: int, steps: int = 500, lr: float = 0.1):
    """Full-batch gradient descent on unregularized multinomial cross-entropy."""
    n, d = x.shape
    W = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(steps):
        z = x @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        W -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return W, b


def few_shot_probe(embeds, labels, shots: int, seed: int, num_classes: int | None = None,
                   steps: int = 500, lr: float = 0.1) -> float:
    """Train on ``shots`` random examples per class, report accuracy on the rest."""
    embeds, labels = np.asarray(embeds, float), np.asarray(labels)
    K = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(seed)
    train = []
    for k in range(K):
        rows = np.flatnonzero(labels == k)
        if rows.size < shots:
            raise ValueError(f"class {k} has {rows.size} examples, fewer than {shots} shots")
        train.extend(rng.choice(rows, size=shots, replace=False).tolist())
    train = np.array(sorted(train))
    test = np.setdiff1d(np.arange(labels.size), train)
    if test.size == 0:
        test = train
    W, b = fit_softmax_regression(embeds[train], labels[train], K, steps, lr)
    pred = np.argmax(embeds[test] @ W + b, axis=1)
    return float(np.mean(pred == labels[test]))


def few_shot_curve(embeds, labels, shots=(1, 5, 10), seeds=5) -> dict[int, tuple[float, float]]:
    out = {}
    for s in shots:
        accs = [few_shot_probe(embeds, labels, s, seed) for seed in range(seeds)]
        out[int(s)] = (float(np.mean(accs)), float(np.std(accs)))
    return out


def zero_shot_for(bundle, text_encoder, heldout, templates, mode: str = "multi") -> MetricsReport:
    img = image_embeddings(bundle, heldout.signals)
    return zero_shot_classify(img, PromptSet(templates, mode), text_encoder, heldout.labels)


def student_consistency(bundles: dict, student: TextEncoder, heldout: dict, templates: dict,
                        mode: str = "multi") -> dict[str, dict]:
    """Per-modality zero-shot accuracy with the teacher vs the student text encoder."""
    out = {}
    for m, b in bundles.items():
        t = zero_shot_for(b, b.text, heldout[m], templates[m], mode).accuracy
        s = zero_shot_for(b, student, heldout[m], templates[m], mode).accuracy
        out[m] = {"teacher": t, "student": s, "delta": s - t}
    return out


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def metric_record(task: str, pair: str, setting, seed, metrics: dict) -> dict:
    return {"task": task, "pair": pair, "setting": setting, "seed": seed, "metrics": metrics}


def write_reports(records: list[dict], json_path, csv_path) -> None:
    """JSON document keyed by (task, pair, setting, seed) plus a flat CSV for plotting."""
    doc = {}
    for r in records:
        key = f"{r['task']}|{r['pair']}|{r['setting']}|{r['seed']}"
        doc[key] = r
    with open(json_path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "pair", "setting", "seed", "metric", "value"])
        for r in records:
            for name, value in sorted(_flatten(r["metrics"]).items()):
                w.writerow([r["task"], r["pair"], r["setting"], r["seed"], name, value])


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            for i, x in enumerate(v):
                out[f"{key}.{i}"] = x
        else:
            out[key] = v
    return out
