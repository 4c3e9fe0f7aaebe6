import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from m3bind.checkpoint import load_checkpoint
from m3bind.cli import data_dir, load_config, main, run_dir

SMALL = {
    "dataset": {"modalities": {"xray": [8, 64], "ecg": [6, 32], "ct": [5, 48]}, "num_classes": 4,
                "vocab_size": 16, "heldout_per_class": 4, "num_probes": 12},
    "encoder": {"hidden": [16], "embed_dim": 8, "token_dim": 8},
    "pretrain": {"steps": 30, "batch": 16},
    "bind": {"iters": 10, "batch_pair": 8, "batch_text": 8, "lora_rank": 2, "lora_alpha": 4.0,
             "checkpoint_every": 5},
    "distill": {"iters_stage1": 3, "iters_stage2": 3, "batch_text": 8},
    "eval": {"shots": [1, 2], "probe_seeds": 2, "ks": [1, 5]},
}


def _cfg_for(root):
    class A:
        config = str(root / "cfg.json")
        set = None
        seed = None
        out = str(root / "out")
        iters_bind = None
        modalities = None
    return load_config(A)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(SMALL))
    base = ["--config", str(root / "cfg.json"), "--out", str(root / "out")]
    assert main(["generate", *base]) == 0
    assert main(["train", *base]) == 0
    return root, base


def _records(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]


def test_train_writes_artifacts(work):
    root, _ = work
    out = run_dir(_cfg_for(root))
    for name in ("config.json", "phase0.m3ck", "pretrain.metrics.jsonl", "bind.metrics.jsonl",
                 "bind-step5.m3ck", "bind-step10.m3ck", "bind.m3ck"):
        assert (out / name).exists(), name
    lines = [json.loads(x) for x in (out / "bind.metrics.jsonl").read_text().splitlines()]
    assert lines[0]["header"] and lines[0]["fingerprint"] == _cfg_for(root).fingerprint()
    assert [r["step"] for r in lines[1:]] == list(range(10))


def test_generate_is_idempotent(work, tmp_path):
    root, base = work
    d = data_dir(_cfg_for(root))
    before = {p.name: p.read_bytes() for p in d.iterdir()}
    assert main(["generate", *base]) == 0
    assert {p.name: p.read_bytes() for p in d.iterdir()} == before
    fresh = tmp_path / "a" / "b"
    assert main(["generate", "--config", base[1], "--out", str(fresh)]) == 0
    assert len(list(fresh.glob("data-*/*.m3bd"))) == 9


def test_corrupted_metadata_exits_3(work, tmp_path):
    root, base = work
    out = tmp_path / "copy"
    shutil.copytree(root / "out", out)
    side = next(out.glob("data-*/xray.train.m3bd.json"))
    side.write_text(side.read_text()[:-10])
    assert main(["eval", "--config", base[1], "--out", str(out)]) == 3


def test_zero_bind_iters_is_phase0_plus_zero_adapters(work, tmp_path):
    root, base = work
    out = tmp_path / "zero"
    shutil.copytree(next((root / "out").glob("data-*")), out / next((root / "out").glob("data-*")).name)
    assert main(["train", "--config", base[1], "--out", str(out), "--iters-bind", "0"]) == 0
    run = next(out.glob("run-*"))
    p0, b = load_checkpoint(run / "phase0.m3ck").tensors, load_checkpoint(run / "bind.m3ck").tensors
    for k, v in p0.items():
        if k != "meta/config":
            assert np.array_equal(b[k], v), k
    lora_b = [k for k in b if k.endswith(".B")]
    assert lora_b and all(not b[k].any() for k in lora_b)


def test_modality_subset(work, tmp_path, capsys):
    root, base = work
    out = tmp_path / "sub"
    shutil.copytree(next((root / "out").glob("data-*")), out / next((root / "out").glob("data-*")).name)
    args = ["--config", base[1], "--out", str(out), "--modalities", "xray,ecg"]
    assert main(["train", *args]) == 0
    ck = load_checkpoint(next(out.glob("run-*/bind.m3ck"))).tensors
    assert {k.split("/")[0] for k in ck if k.endswith("/image:W0")} == {"xray", "ecg"}
    capsys.readouterr()
    assert main(["eval", *args, "--task", "cross-image"]) == 0
    assert [r["pair"] for r in _records(capsys)] == ["xray:ecg"]


def test_resume_is_byte_identical(work, tmp_path):
    root, base = work
    out = tmp_path / "resume"
    shutil.copytree(next((root / "out").glob("data-*")), out / next((root / "out").glob("data-*")).name)
    args = ["--config", base[1], "--out", str(out)]
    assert main(["train", *args, "--stop-after", "5"]) == 0
    run = next(out.glob("run-*"))
    assert not (run / "bind.m3ck").exists()
    assert main(["train", *args, "--resume", str(run / "bind-step5.m3ck")]) == 0
    full = run_dir(_cfg_for(root))
    assert (run / "bind.m3ck").read_bytes() == (full / "bind.m3ck").read_bytes()

    def body(p):
        return [x for x in p.read_text().splitlines() if '"header":true' not in x]
    assert body(run / "bind.metrics.jsonl") == body(full / "bind.metrics.jsonl")


def test_distill_and_eval(work, capsys):
    root, base = work
    capsys.readouterr()
    assert main(["distill", *base]) == 0
    summary = _records(capsys)[0]
    assert summary["student_teacher_mse_after"] < summary["student_teacher_mse_before"]
    assert main(["eval", *base]) == 0
    recs = _records(capsys)
    assert {r["task"] for r in recs} == {"zero-shot", "few-shot", "text-image", "cross-image", "student"}
    out = run_dir(_cfg_for(root))
    assert (out / "eval.json").exists() and (out / "eval.csv").exists()


def test_eval_on_phase0_checkpoint(work, capsys):
    root, base = work
    ck = run_dir(_cfg_for(root)) / "phase0.m3ck"
    capsys.readouterr()
    assert main(["eval", *base, "--checkpoint", str(ck), "--task", "cross-image"]) == 0
    recs = _records(capsys)
    assert len(recs) == 3 and all(r["setting"] == "phase0" for r in recs)


def test_pair_eval_emits_one_record(work, capsys):
    _, base = work
    capsys.readouterr()
    assert main(["eval", *base, "--task", "cross-image", "--pair", "ct:xray"]) == 0
    recs = _records(capsys)
    assert len(recs) == 1 and recs[0]["pair"] == "ct:xray"
    assert main(["eval", *base, "--task", "cross-image", "--pair", "ct:mri"]) == 2


def test_inspect(work, capsys):
    root, _ = work
    capsys.readouterr()
    assert main(["inspect", str(run_dir(_cfg_for(root)) / "bind.m3ck")]) == 0
    text = capsys.readouterr().out
    assert "M3CK v1" in text and _cfg_for(root).fingerprint() in text
    corpus = next((root / "out").glob("data-*/ecg.train.m3bd"))
    assert main(["inspect", str(corpus)]) == 3
    assert "M3BD corpus" in capsys.readouterr().err


def test_config_errors_exit_2(work, capsys):
    _, base = work
    assert main(["train", *base, "--set", "bind.tau=-1"]) == 2
    assert main(["train", *base, "--set", "bind.bogus=1"]) == 2
    assert main(["train", *base, "--modalities", "xray,mri"]) == 2
    assert "config error" in capsys.readouterr().err


def test_fingerprint_mismatch_exits_2(work, tmp_path):
    root, base = work
    out = tmp_path / "fp"
    shutil.copytree(root / "out", out)
    for side in out.glob("data-*/*.train.m3bd.json"):
        meta = json.loads(side.read_text())
        meta["fingerprint"] = "0" * 64
        side.write_text(json.dumps(meta))
    assert main(["eval", "--config", base[1], "--out", str(out)]) == 2


def test_missing_data_exits_3(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 3


def test_divergence_exits_4(work, tmp_path, capsys):
    root, base = work
    out = tmp_path / "div"
    shutil.copytree(next((root / "out").glob("data-*")), out / next((root / "out").glob("data-*")).name)
    assert main(["train", "--config", base[1], "--out", str(out), "--set", "pretrain.tau=1e-320"]) == 4
    assert "diverged" in capsys.readouterr().err


def test_console_script(tmp_path):
    exe = shutil.which("m3bind")
    cmd = [exe] if exe else [sys.executable, "-m", "m3bind.cli"]
    done = subprocess.run([*cmd, "inspect", str(tmp_path / "none.m3ck")], capture_output=True, text=True)
    assert done.returncode == 3 and "data error" in done.stderr
    assert subprocess.run([*cmd, "--help"], capture_output=True).returncode == 0
