import hashlib
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3bind.synth import (
    CORPUS_MAGIC,
    DEFAULT_MODALITIES,
    FormatError,
    GenerationError,
    build_dataset,
    corpus_from_bytes,
    corpus_to_bytes,
    decode_varint,
    default_dataset,
    encode_varint,
    generate_concepts,
    generate_corpus,
    load_dataset,
    make_modality_spec,
    read_corpus,
    read_metadata,
    save_dataset,
    stream,
    write_corpus,
)


@pytest.fixture(scope="module")
def ds():
    return default_dataset(0)


def _row_hashes(signals):
    return {hashlib.sha256(np.ascontiguousarray(r).tobytes()).digest() for r in signals}


# -- concepts ---------------------------------------------------------------------------

def test_concepts_deterministic():
    a, b = generate_concepts(2, 16, seed=7), generate_concepts(2, 16, seed=7)
    assert np.array_equal(a.class_latents, b.class_latents)


def test_concepts_near_orthogonal():
    cm = generate_concepts(8, 32, seed=3)
    cos = cm.class_latents @ cm.class_latents.T
    off = np.abs(cos[~np.eye(8, dtype=bool)])
    assert off.max() < 0.3


def test_concepts_unsatisfiable():
    with pytest.raises(GenerationError, match="latent_dim"):
        generate_concepts(40, 4, seed=0)


def test_concepts_need_two_classes():
    with pytest.raises(ValueError):
        generate_concepts(1, 8, seed=0)


# -- corpora ------------------------------------------------------------------------------

def _spec(cm, size, m="xray", d=12):
    return make_modality_spec(m, d, size, cm, vocab_size=64, seed=1)


def test_zero_noise_signals_identical_per_class():
    cm = generate_concepts(4, 16, seed=1, noise_sigma=0.0)
    c = generate_corpus(cm, _spec(cm, 40), seed=2)
    for k in range(4):
        rows = c.signals[c.labels == k]
        assert np.array_equal(rows, np.broadcast_to(rows[0], rows.shape))


def test_corpus_of_size_k_has_one_record_per_class():
    cm = generate_concepts(8, 16, seed=1)
    c = generate_corpus(cm, _spec(cm, 8), seed=2)
    assert sorted(c.labels.tolist()) == list(range(8))


def test_class_means_follow_mixing():
    cm = generate_concepts(4, 16, seed=5, noise_sigma=0.1)
    n = 4000
    spec = _spec(cm, n)
    c = generate_corpus(cm, spec, seed=6)
    per_class = n // 4
    for k in range(4):
        mean = c.signals[c.labels == k].mean(axis=0)
        expected = spec.mixing @ cm.class_latents[k]
        # per-coordinate noise std is sigma * ||row of mixing||
        sd = 0.1 * np.linalg.norm(spec.mixing, axis=1)
        assert np.all(np.abs(mean - expected) <= 3 * sd / np.sqrt(per_class) + 1e-12)


def test_empty_template_pool_rejected():
    cm = generate_concepts(3, 16, seed=0)
    spec = _spec(cm, 10)
    spec.templates[1] = []
    with pytest.raises(ValueError, match="empty template pool"):
        generate_corpus(cm, spec, seed=0)


def test_templates_carry_their_class_token(ds):
    for spec in ds.specs.values():
        assert len(spec.templates) == 8
        for k, pool in enumerate(spec.templates):
            assert len(pool) == 4
            assert all(k in t and all(0 <= x < 64 for x in t) for t in pool)
            # no other class token leaks into the template
            assert all(not any(x < 8 and x != k for x in t) for t in pool)


def test_default_dataset_shape(ds):
    assert ds.sizes == {m: n for m, (_, n) in DEFAULT_MODALITIES.items()}
    assert {m: c.obs_dim for m, c in ds.corpora.items()} == {m: d for m, (d, _) in DEFAULT_MODALITIES.items()}
    assert ds.sizes["xray"] == 10 * ds.sizes["ecg"]
    assert ds.concepts.num_classes == 8 and ds.concepts.latent_dim == 16
    assert all(c.vocab_size == 64 for c in ds.corpora.values())
    assert len(ds.eval.probe_labels) == 50
    assert all(len(h) == 160 for h in ds.eval.heldout.values())


def test_class_distribution_uniform(ds):
    for c in ds.corpora.values():
        counts = np.bincount(c.labels, minlength=8)
        assert counts.max() - counts.min() <= 1


def test_probe_and_heldout_disjoint_from_training(ds):
    for m, c in ds.corpora.items():
        train = _row_hashes(c.signals)
        assert not train & _row_hashes(ds.eval.probes[m].signals)
        assert not train & _row_hashes(ds.eval.heldout[m].signals)


def test_no_signal_bytes_shared_across_modalities(ds):
    blobs = {m: set(np.ascontiguousarray(c.signals).view(np.uint64).ravel().tolist())
             for m, c in ds.corpora.items()}
    for a, b in itertools.combinations(blobs, 2):
        assert not blobs[a] & blobs[b], (a, b)


def test_records_hold_no_cross_modal_references(ds):
    c = ds.corpora["xray"]
    assert set(vars(c)) == {"modality_id", "signals", "tokens", "labels", "num_classes", "vocab_size"}


def test_linear_separability_of_raw_signals(ds):
    for m, c in ds.corpora.items():
        X = np.hstack([c.signals, np.ones((len(c), 1))])
        Y = np.eye(8)[c.labels] * 2 - 1
        W, *_ = np.linalg.lstsq(X, Y, rcond=None)
        acc = np.mean(np.argmax(X @ W, axis=1) == c.labels)
        assert acc >= 0.95, (m, acc)


def test_regeneration_is_bitwise_reproducible():
    a, b = build_dataset(11), build_dataset(11)
    for m in a.corpora:
        assert corpus_to_bytes(a.corpora[m]) == corpus_to_bytes(b.corpora[m])
        assert corpus_to_bytes(a.eval.probes[m]) == corpus_to_bytes(b.eval.probes[m])


def test_streams_are_independent_per_label():
    a = stream(0, "corpus", "xray").random(4)
    b = stream(0, "corpus", "ecg").random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, stream(0, "corpus", "xray").random(4))


# -- file format --------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_varint_round_trip(n):
    buf = bytearray()
    encode_varint(n, buf)
    assert decode_varint(bytes(buf), 0) == (n, len(buf))


def test_varint_errors():
    with pytest.raises(ValueError):
        encode_varint(-1, bytearray())
    with pytest.raises(FormatError):
        decode_varint(b"\x80\x80", 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 30))
def test_corpus_bytes_round_trip(seed, n):
    cm = generate_concepts(3, 8, seed=seed % 100)
    spec = make_modality_spec("m", 5, n, cm, 16, seed)
    c = generate_corpus(cm, spec, seed)
    buf = corpus_to_bytes(c)
    back = corpus_from_bytes(buf, "m")
    assert np.array_equal(back.signals.view(np.uint64), c.signals.view(np.uint64))
    assert back.tokens == c.tokens and np.array_equal(back.labels, c.labels)
    assert corpus_to_bytes(back) == buf


def test_header_layout(ds):
    buf = corpus_to_bytes(ds.corpora["ecg"])
    assert buf[:4] == CORPUS_MAGIC
    assert np.frombuffer(buf[4:24], dtype="<u4").tolist() == [1, 8, 24, 64, 400]


def test_format_errors(ds):
    buf = corpus_to_bytes(ds.corpora["ecg"].subset(range(5)))
    with pytest.raises(FormatError) as info:
        corpus_from_bytes(b"M3CK" + buf[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError, match="version"):
        corpus_from_bytes(buf[:4] + (9).to_bytes(4, "little") + buf[8:])
    with pytest.raises(FormatError, match="truncated"):
        corpus_from_bytes(buf[:-3])
    with pytest.raises(FormatError, match="trailing"):
        corpus_from_bytes(buf + b"\x00")
    with pytest.raises(FormatError):
        corpus_from_bytes(buf[:10])


def test_write_and_read_with_sidecar(tmp_path, ds):
    path = tmp_path / "nested" / "ecg.train.m3bd"
    digest = write_corpus(ds.corpora["ecg"], path, {"seed": 0})
    assert hashlib.sha256(path.read_bytes()).hexdigest() == digest
    corpus, meta = read_corpus(path)
    assert meta["sha256"] == digest and meta["modality"] == "ecg"
    assert np.array_equal(corpus.signals, ds.corpora["ecg"].signals)


def test_corrupted_metadata_names_offset(tmp_path, ds):
    path = tmp_path / "ecg.m3bd"
    write_corpus(ds.corpora["ecg"], path, {})
    side = tmp_path / "ecg.m3bd.json"
    text = side.read_text()
    at = text.index(":")
    side.write_text(text[:at] + ";" + text[at + 1:])
    with pytest.raises(FormatError) as info:
        read_metadata(path)
    assert info.value.offset == at
    assert f"offset {at}" in str(info.value)


def test_checksum_mismatch(tmp_path, ds):
    path = tmp_path / "ecg.m3bd"
    write_corpus(ds.corpora["ecg"], path, {})
    raw = bytearray(path.read_bytes())
    raw[40] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        read_corpus(path)


def test_save_and_load_dataset(tmp_path):
    d = build_dataset(2, {"a": (6, 40), "b": (4, 24)}, heldout_per_class=2, num_probes=10)
    digests = save_dataset(d, tmp_path, fingerprint="f" * 64)
    assert len(digests) == 6
    loaded = load_dataset(tmp_path)
    assert loaded.fingerprint == "f" * 64
    assert loaded.sizes == {"a": 40, "b": 24}
    assert loaded.templates["a"] == d.specs["a"].templates
    assert np.array_equal(loaded.eval.probe_labels, d.eval.probe_labels)
    assert load_dataset(tmp_path, ["b"]).sizes == {"b": 24}
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_save_is_idempotent(tmp_path):
    d = build_dataset(2, {"a": (6, 40)}, heldout_per_class=2, num_probes=10)
    first = save_dataset(d, tmp_path)
    blobs = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert save_dataset(build_dataset(2, {"a": (6, 40)}, heldout_per_class=2, num_probes=10),
                        tmp_path) == first
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == blobs
    assert json.loads((tmp_path / "a.train.m3bd.json").read_text())["split"] == "train"
