"""Synthetic multi-modality corpora generated from one shared concept model.

Every modality observes the same K class latents through its own fixed
random linear mixing plus Gaussian noise, and carries text built from a
vocabulary shared by all modalities. No record ever references another
modality, so text is the only bridge between image modalities.

Corpus files (``.m3bd``) are little-endian::

    magic "M3BD" | u32 version | u32 K | u32 d_m | u32 V | u32 count
    count x ( d_m x f64 signal | varint n_tokens | n_tokens x varint | varint label )

Each file has a JSON sidecar (``<file>.json``) with seeds, the modality
spec and the text template pool.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CORPUS_MAGIC = b"M3BD"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

MAX_REJECTION_ROUNDS = 1000
MAX_ABS_COS = 0.3


class GenerationError(RuntimeError):
    pass


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")
        self.offset = offset


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator keyed by a master seed plus stable string/int labels."""
    words = [int(seed) & 0xFFFFFFFF]
    for n in names:
        words.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    return np.random.default_rng(words)


def derive_seed(seed: int, *names) -> int:
    return int(stream(seed, *names).integers(0, 2**31 - 1))


@dataclass
class ConceptModel:
    class_latents: np.ndarray
    noise_sigma: float = 0.1
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.class_latents.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.class_latents.shape[1]


def generate_concepts(num_classes: int, latent_dim: int, seed: int,
                      noise_sigma: float = 0.1) -> ConceptModel:
    """Unit class latents with all pairwise |cos| < 0.3, by per-vector rejection."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = stream(seed, "concepts")
    accepted: list[np.ndarray] = []
    for k in range(num_classes):
        for _ in range(MAX_REJECTION_ROUNDS):
            v = rng.normal(size=latent_dim)
            v /= np.linalg.norm(v)
            if all(abs(v @ u) < MAX_ABS_COS for u in accepted):
                accepted.append(v)
                break
        else:
            raise GenerationError(
                f"could not place class {k} of {num_classes} with |cos| < {MAX_ABS_COS} "
                f"in {latent_dim} dims after {MAX_REJECTION_ROUNDS} rounds; use a larger latent_dim")
    return ConceptModel(np.array(accepted), float(noise_sigma), int(seed))


@dataclass
class ModalitySpec:
    modality_id: str
    obs_dim: int
    corpus_size: int
    mixing: np.ndarray
    templates: list[list[list[int]]]
    vocab_size: int

    def check(self, num_classes: int) -> None:
        if len(self.templates) != num_classes:
            raise ValueError(f"{self.modality_id}: template pool covers {len(self.templates)} "
                             f"classes, expected {num_classes}")
        for k, pool in enumerate(self.templates):
            if not pool:
                raise ValueError(f"{self.modality_id}: empty template pool for class {k}")
            for tpl in pool:
                if k not in tpl:
                    raise ValueError(f"{self.modality_id}: template {tpl} lacks class token {k}")


def make_templates(num_classes: int, vocab_size: int, per_class: int,
                   rng: np.random.Generator, min_len: int = 3, max_len: int = 6):
    """Token ids ``0..K-1`` are class tokens; the rest are shared filler tokens."""
    if vocab_size <= num_classes:
        raise ValueError("vocabulary must be larger than the number of classes")
    pools = []
    for k in range(num_classes):
        pool = []
        for _ in range(per_class):
            n = int(rng.integers(min_len, max_len + 1))
            seq = rng.integers(num_classes, vocab_size, size=n).tolist()
            seq[int(rng.integers(0, n))] = k
            pool.append(seq)
        pools.append(pool)
    return pools


def make_modality_spec(modality_id: str, obs_dim: int, corpus_size: int, cm: ConceptModel,
                       vocab_size: int, seed: int, templates_per_class: int = 4) -> ModalitySpec:
    rng = stream(seed, "spec", modality_id)
    mixing = rng.normal(0.0, 1.0 / np.sqrt(cm.latent_dim), size=(obs_dim, cm.latent_dim))
    templates = make_templates(cm.num_classes, vocab_size, templates_per_class, rng)
    return ModalitySpec(modality_id, obs_dim, corpus_size, mixing, templates, vocab_size)


@dataclass
class SyntheticCorpus:
    modality_id: str
    signals: np.ndarray
    tokens: list[list[int]]
    labels: np.ndarray
    num_classes: int
    vocab_size: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def obs_dim(self) -> int:
        return self.signals.shape[1]

    def subset(self, idx) -> "SyntheticCorpus":
        idx = np.asarray(idx)
        return SyntheticCorpus(self.modality_id, self.signals[idx],
                               [self.tokens[i] for i in idx], self.labels[idx],
                               self.num_classes, self.vocab_size)


def _sample_records(cm: ConceptModel, spec: ModalitySpec, n: int, rng: np.random.Generator,
                    labels=None):
    K = cm.num_classes
    labels = np.arange(n) % K if labels is None else np.asarray(labels)
    z = cm.class_latents[labels] + cm.noise_sigma * rng.normal(size=(n, cm.latent_dim))
    signals = z @ spec.mixing.T
    choice = rng.integers(0, len(spec.templates[0]), size=n)
    tokens = [list(spec.templates[k][c]) for k, c in zip(labels, choice)]
    return signals, tokens, labels.astype(np.int64)


def generate_corpus(cm: ConceptModel, spec: ModalitySpec, seed: int) -> SyntheticCorpus:
    """Round-robin classes, ``signal = mixing @ (z_k + eps)``, one random template per record."""
    spec.check(cm.num_classes)
    rng = stream(seed, "corpus", spec.modality_id)
    signals, tokens, labels = _sample_records(cm, spec, spec.corpus_size, rng)
    return SyntheticCorpus(spec.modality_id, signals, tokens, labels, cm.num_classes, spec.vocab_size)


@dataclass
class EvalSplit:
    """Held-out records per modality plus cross-modal probe tuples.

    Probe tuple ``i`` is (``probe_labels[i]``, ``probes[m][i]`` for every m);
    each signal is drawn fresh and never enters a training corpus.
    """
    heldout: dict[str, SyntheticCorpus]
    probes: dict[str, SyntheticCorpus]
    probe_labels: np.ndarray


def generate_eval_split(cm: ConceptModel, specs: dict[str, ModalitySpec], seed: int,
                        heldout_per_class: int = 20, num_probes: int = 50) -> EvalSplit:
    K = cm.num_classes
    probe_labels = np.arange(num_probes) % K
    heldout, probes = {}, {}
    for m, spec in specs.items():
        rng = stream(seed, "heldout", m)
        s, t, y = _sample_records(cm, spec, heldout_per_class * K, rng)
        heldout[m] = SyntheticCorpus(m, s, t, y, K, spec.vocab_size)
        rng = stream(seed, "probe", m)
        s, t, y = _sample_records(cm, spec, num_probes, rng, labels=probe_labels)
        probes[m] = SyntheticCorpus(m, s, t, y, K, spec.vocab_size)
    return EvalSplit(heldout, probes, probe_labels.astype(np.int64))


DEFAULT_MODALITIES = {
    "xray": (48, 4000),
    "ct": (96, 1500),
    "retina": (32, 800),
    "ecg": (24, 400),
    "path": (64, 2000),
}


@dataclass
class Dataset:
    concepts: ConceptModel
    specs: dict[str, ModalitySpec]
    corpora: dict[str, SyntheticCorpus]
    eval: EvalSplit
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def sizes(self) -> dict[str, int]:
        return {m: len(c) for m, c in self.corpora.items()}


def build_dataset(seed: int = 0, modalities=None, num_classes: int = 8, latent_dim: int = 16,
                  vocab_size: int = 64, templates_per_class: int = 4, noise_sigma: float = 0.1,
                  heldout_per_class: int = 20, num_probes: int = 50) -> Dataset:
    modalities = DEFAULT_MODALITIES if modalities is None else modalities
    cm = generate_concepts(num_classes, latent_dim, seed, noise_sigma)
    specs = {m: make_modality_spec(m, d, n, cm, vocab_size, seed, templates_per_class)
             for m, (d, n) in modalities.items()}
    corpora = {m: generate_corpus(cm, s, seed) for m, s in specs.items()}
    ev = generate_eval_split(cm, specs, seed, heldout_per_class, num_probes)
    config = dict(seed=seed, modalities={m: list(v) for m, v in modalities.items()},
                  num_classes=num_classes, latent_dim=latent_dim, vocab_size=vocab_size,
                  templates_per_class=templates_per_class, noise_sigma=noise_sigma,
                  heldout_per_class=heldout_per_class, num_probes=num_probes)
    return Dataset(cm, specs, corpora, ev, seed, config)


def default_dataset(seed: int = 0) -> Dataset:
    """Five imbalanced modalities (xray:ecg = 10:1), K=8, shared V=64, 50 probe tuples."""
    return build_dataset(seed)


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def encode_varint(n: int, out: bytearray) -> None:
    if n < 0:
        raise ValueError("varint must be non-negative")
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def decode_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    start = pos
    while True:
        if pos >= len(buf):
            raise FormatError("truncated varint", start)
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise FormatError("varint too long", start)


def corpus_to_bytes(corpus: SyntheticCorpus) -> bytes:
    out = bytearray(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, corpus.num_classes,
                                 corpus.obs_dim, corpus.vocab_size, len(corpus)))
    signals = np.ascontiguousarray(corpus.signals, dtype="<f8")
    for i in range(len(corpus)):
        out += signals[i].tobytes()
        seq = corpus.tokens[i]
        encode_varint(len(seq), out)
        for t in seq:
            encode_varint(int(t), out)
        encode_varint(int(corpus.labels[i]), out)
    return bytes(out)


def corpus_from_bytes(buf: bytes, modality_id: str = "") -> SyntheticCorpus:
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the M3BD header", len(buf))
    magic, version, K, d, V, count = _HEADER.unpack_from(buf, 0)
    if magic != CORPUS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CORPUS_MAGIC!r}", 0)
    if version != CORPUS_VERSION:
        raise FormatError(f"unsupported corpus version {version}", 4)
    pos = _HEADER.size
    signals = np.empty((count, d))
    tokens, labels = [], np.empty(count, dtype=np.int64)
    rec = 8 * d
    for i in range(count):
        if pos + rec > len(buf):
            raise FormatError(f"truncated signal in record {i}", pos)
        signals[i] = np.frombuffer(buf, dtype="<f8", count=d, offset=pos)
        pos += rec
        n, pos = decode_varint(buf, pos)
        seq = []
        for _ in range(n):
            at = pos
            t, pos = decode_varint(buf, pos)
            if t >= V:
                raise FormatError(f"token id {t} >= vocabulary size {V}", at)
            seq.append(t)
        tokens.append(seq)
        at = pos
        labels[i], pos = decode_varint(buf, pos)
        if labels[i] >= K:
            raise FormatError(f"class label {labels[i]} >= K={K}", at)
    if pos != len(buf):
        raise FormatError("trailing bytes after last record", pos)
    return SyntheticCorpus(modality_id, signals, tokens, labels, K, V)


def write_corpus(corpus: SyntheticCorpus, path, meta: dict) -> str:
    """Write ``path`` and its JSON sidecar; returns the SHA-256 of the binary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = corpus_to_bytes(corpus)
    digest = hashlib.sha256(data).hexdigest()
    path.write_bytes(data)
    sidecar = dict(meta, format="M3BD", version=CORPUS_VERSION,
                   modality=corpus.modality_id, sha256=digest)
    Path(f"{path}.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
    return digest


def read_metadata(path) -> dict:
    side = Path(f"{path}.json")
    text = side.read_text()
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt metadata in {side}: {exc.msg}", exc.pos) from None
    if not isinstance(meta, dict) or meta.get("format") != "M3BD":
        raise FormatError(f"{side} is not an M3BD sidecar", 0)
    return meta


def read_corpus(path) -> tuple[SyntheticCorpus, dict]:
    meta = read_metadata(path)
    data = Path(path).read_bytes()
    if hashlib.sha256(data).hexdigest() != meta.get("sha256"):
        raise FormatError(f"{path} does not match the checksum in its sidecar", 0)
    return corpus_from_bytes(data, meta.get("modality", "")), meta


def _spec_meta(spec: ModalitySpec) -> dict:
    return {"obs_dim": spec.obs_dim, "corpus_size": spec.corpus_size,
            "vocab_size": spec.vocab_size, "templates": spec.templates}


def save_dataset(ds: Dataset, root, fingerprint: str = "") -> dict[str, str]:
    """Train, held-out and probe files per modality; returns {relative path: sha256}."""
    root = Path(root)
    digests = {}
    for m, spec in ds.specs.items():
        base = {"seed": ds.seed, "dataset": ds.config, "spec": _spec_meta(spec),
                "fingerprint": fingerprint}
        for split, corpus in (("train", ds.corpora[m]), ("heldout", ds.eval.heldout[m]),
                              ("probe", ds.eval.probes[m])):
            rel = f"{m}.{split}.m3bd"
            digests[rel] = write_corpus(corpus, root / rel, dict(base, split=split))
    return digests


@dataclass
class LoadedDataset:
    """What training and evaluation need from corpora on disk."""
    corpora: dict[str, SyntheticCorpus]
    eval: EvalSplit
    templates: dict[str, list[list[list[int]]]]
    config: dict
    fingerprint: str

    @property
    def sizes(self) -> dict[str, int]:
        return {m: len(c) for m, c in self.corpora.items()}


def load_dataset(root, modalities=None) -> LoadedDataset:
    root = Path(root)
    if modalities is None:
        modalities = sorted({p.name.split(".")[0] for p in root.glob("*.train.m3bd")})
    if not modalities:
        raise FileNotFoundError(f"no corpora found in {root}")
    corpora, heldout, probes, templates = {}, {}, {}, {}
    config, fingerprint = None, None
    for m in modalities:
        corpora[m], meta = read_corpus(root / f"{m}.train.m3bd")
        heldout[m], _ = read_corpus(root / f"{m}.heldout.m3bd")
        probes[m], _ = read_corpus(root / f"{m}.probe.m3bd")
        templates[m] = meta["spec"]["templates"]
        config, fingerprint = meta["dataset"], meta.get("fingerprint", "")
    labels = next(iter(probes.values())).labels
    return LoadedDataset(corpora, EvalSplit(heldout, probes, labels), templates, config, fingerprint)


def as_loaded(ds: Dataset) -> LoadedDataset:
    return LoadedDataset(ds.corpora, ds.eval, {m: s.templates for m, s in ds.specs.items()},
                         ds.config, "")
