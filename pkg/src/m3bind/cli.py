"""Command-line entry point: ``m3bind {generate,train,distill,eval,inspect}``.

Runs are driven by one JSON config; ``--set key.path=value`` overrides single
keys. Corpora live in ``<output_dir>/data-<dataset fingerprint>``, and every
training/eval artifact in ``<output_dir>/run-<config fingerprint>``.

Exit codes: 0 success, 2 config error, 3 data/format error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import _kernels
from .autodiff import NonFiniteError
from .checkpoint import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    CheckpointError,
    FingerprintMismatch,
    load_checkpoint,
    save_checkpoint,
    tensor_text,
)
from .config import ConfigError, RunConfig, canonical_json, set_path
from .evaluation import write_reports
from .pipeline import (
    ablation_grid,
    bind_plan,
    distill_texts,
    evaluate,
    fresh_bundles,
    worker_count,
)
from .synth import CORPUS_MAGIC, FormatError, build_dataset, load_dataset, save_dataset
from .training import (
    BindTrainer,
    DistillTrainer,
    TrainingDivergence,
    attach_bind_adapters,
    encoder_tensors,
    load_encoder_tensors,
    make_checkpoint,
    new_student,
    pretrain_all,
    student_teacher_mse,
    write_jsonl,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


# --------------------------------------------------------------------------
# config and paths
# --------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> RunConfig:
    d = RunConfig().to_dict()
    if getattr(args, "config", None):
        try:
            user = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON at offset {exc.pos}: {exc.msg}") from None
        _merge(d, user)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        set_path(d, key, _parse_value(value))
    if getattr(args, "seed", None) is not None:
        d["master_seed"] = args.seed
    if getattr(args, "out", None):
        d["output_dir"] = args.out
    if getattr(args, "iters_bind", None) is not None:
        d["bind"]["iters"] = args.iters_bind
    if getattr(args, "modalities", None):
        d["bind"]["modalities"] = [m.strip() for m in args.modalities.split(",") if m.strip()]
    cfg = RunConfig.from_dict(d)
    cfg.bind.validate(cfg.dataset.modalities)
    return cfg


def _merge(base: dict, user: dict, where: str = "") -> None:
    for k, v in user.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "modalities":
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / f"data-{cfg.dataset_fingerprint()[:12]}"


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / f"run-{cfg.fingerprint()[:12]}"


def _write_config(cfg: RunConfig, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(canonical_json(cfg.to_dict()) + "\n")


def _stored_config(cfg: RunConfig) -> dict:
    """The fingerprinted part of the config; output paths stay out of artifacts."""
    d = cfg.to_dict()
    d.pop("output_dir")
    return d


def _header(phase: str, cfg: RunConfig, **extra) -> dict:
    return {"phase": phase, "header": True, "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "fingerprint": cfg.fingerprint(), "backend": _kernels.BACKEND, **extra}


def _load_data(cfg: RunConfig):
    root = data_dir(cfg)
    if not root.exists():
        raise FileNotFoundError(f"no corpora at {root}; run `m3bind generate` first")
    data = load_dataset(root, cfg.modalities())
    if data.fingerprint != cfg.dataset_fingerprint():
        raise FingerprintMismatch(f"corpora in {root} were generated for a different dataset config")
    return data


def _bundles_from(ckpt_path: Path, data, cfg: RunConfig, adapters: bool | None = None):
    ckpt = load_checkpoint(ckpt_path, cfg.fingerprint())
    if adapters is None:
        adapters = any(":lora." in k for k in ckpt.tensors)
    bundles = fresh_bundles(data, cfg, cfg.modalities())
    for b in bundles.values():
        for enc in b.encoders():
            enc.freeze()
    if adapters:
        attach_bind_adapters(bundles, cfg.bind, cfg.master_seed)
    load_encoder_tensors([e for b in bundles.values() for e in b.encoders()], ckpt.tensors)
    return bundles, ckpt


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> int:
    d = cfg.dataset
    ds = build_dataset(cfg.master_seed, {m: tuple(v) for m, v in d.modalities.items()},
                       d.num_classes, d.latent_dim, d.vocab_size, d.templates_per_class,
                       d.noise_sigma, d.heldout_per_class, d.num_probes)
    root = data_dir(cfg)
    digests = save_dataset(ds, root, cfg.dataset_fingerprint())
    print(json.dumps({"data_dir": str(root), "files": digests}, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data = _load_data(cfg)
    out = run_dir(cfg)
    _write_config(cfg, out)
    fp, cdict = cfg.fingerprint(), _stored_config(cfg)
    names = cfg.modalities()

    if args.resume:
        bundles, _ = _bundles_from(out / "phase0.m3ck", data, cfg, adapters=False)
    else:
        bundles = fresh_bundles(data, cfg, names)
        report = pretrain_all(bundles, cfg.pretrain, cfg.master_seed, worker_count())
        save_checkpoint(make_checkpoint(encoder_tensors(e for b in bundles.values() for e in b.encoders()),
                                        fp, cdict), out / "phase0.m3ck")
        write_jsonl([_header("pretrain", cfg)] + [dict(r, phase="pretrain") for r in report.values()],
                    out / "pretrain.metrics.jsonl")

    attach_bind_adapters(bundles, cfg.bind, cfg.master_seed)
    trainer = BindTrainer(bundles, cfg.bind, cfg.master_seed)
    metrics_path = out / "bind.metrics.jsonl"
    if args.resume:
        ckpt = load_checkpoint(args.resume, fp)
        trainer.load_state_tensors(ckpt.tensors)
        kept = []
        if metrics_path.exists():
            for line in metrics_path.read_text().splitlines():
                rec = json.loads(line)
                if rec.get("header") or rec["step"] < trainer.step_count:
                    kept.append(line + "\n")
        metrics_path.write_text("".join(kept))
    else:
        header = _header("bind", cfg, **{k: v for k, v in trainer.header().items() if k != "phase"})
        write_jsonl([header], metrics_path)

    every = cfg.bind.checkpoint_every
    written = len(trainer.log)

    def on_step(tr):
        nonlocal written
        if every and tr.step_count % every == 0:
            write_jsonl(tr.log[written:], metrics_path, "a")
            written = len(tr.log)
            save_checkpoint(make_checkpoint(tr.state_tensors(), fp, cdict),
                            out / f"bind-step{tr.step_count}.m3ck")

    until = cfg.bind.iters if args.stop_after is None else args.stop_after
    try:
        trainer.run(until, on_step)
    finally:
        write_jsonl(trainer.log[written:], metrics_path, "a")
    if trainer.step_count < cfg.bind.iters:
        print(json.dumps({"run_dir": str(out), "stopped_at": trainer.step_count}))
        return EXIT_OK
    save_checkpoint(make_checkpoint(trainer.state_tensors(), fp, cdict), out / "bind.m3ck")
    print(json.dumps({"run_dir": str(out), "steps": trainer.step_count}))
    return EXIT_OK


def cmd_distill(cfg: RunConfig, args) -> int:
    data = _load_data(cfg)
    out = run_dir(cfg)
    if not (out / "bind.m3ck").exists():
        raise FileNotFoundError(f"{out / 'bind.m3ck'} missing; run `m3bind train` first")
    bundles, _ = _bundles_from(out / "bind.m3ck", data, cfg, adapters=True)
    fp, cdict = cfg.fingerprint(), _stored_config(cfg)
    vocab = next(iter(data.corpora.values())).vocab_size
    student = new_student(vocab, cfg.master_seed, cfg.encoder)
    texts = distill_texts(data, bundles)
    before = student_teacher_mse(bundles, student, texts)
    trainer = DistillTrainer(bundles, student, bind_plan(bundles, cfg), cfg.distill, cfg.master_seed)
    trainer.run()
    after = student_teacher_mse(bundles, student, texts)
    save_checkpoint(make_checkpoint(trainer.state_tensors(), fp, cdict), out / "distill.m3ck")
    header = _header("distill", cfg, **{k: v for k, v in trainer.header().items() if k != "phase"})
    summary = {"phase": "distill", "summary": True, "student_teacher_mse_before": before,
               "student_teacher_mse_after": after}
    write_jsonl([header] + trainer.log + [summary], out / "distill.metrics.jsonl")
    print(json.dumps({"run_dir": str(out), **summary}, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    data = _load_data(cfg)
    out = run_dir(cfg)
    if args.ablation_grid:
        records = ablation_grid(cfg, data)
    else:
        path = Path(args.checkpoint) if args.checkpoint else out / "bind.m3ck"
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} missing; run `m3bind train` first")
        bundles, _ = _bundles_from(path, data, cfg)
        student = None
        if (out / "distill.m3ck").exists() and not args.checkpoint:
            vocab = next(iter(data.corpora.values())).vocab_size
            student = new_student(vocab, cfg.master_seed, cfg.encoder)
            load_encoder_tensors([student], load_checkpoint(out / "distill.m3ck", cfg.fingerprint()).tensors)
        tasks = ("zero-shot", "few-shot", "retrieval", "cross-image", "student") \
            if args.task == "all" else (args.task,)
        pair = None
        if args.pair:
            pair = args.pair.split(":")
            if len(pair) != 2 or any(m not in bundles for m in pair):
                raise ConfigError(f"--pair must name two trained modalities, got {args.pair!r}")
        records = evaluate(bundles, data, cfg, student, tasks, pair, setting=path.stem)
    out.mkdir(parents=True, exist_ok=True)
    stem = "ablation" if args.ablation_grid else "eval"
    write_reports(records, out / f"{stem}.json", out / f"{stem}.csv")
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_inspect(path: str) -> int:
    raw = Path(path).read_bytes()
    if raw[:4] == CORPUS_MAGIC:
        raise FormatError(f"{path} is an M3BD corpus file, not an M3CK checkpoint", 0)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    ckpt = Checkpoint.from_bytes(raw)
    print(f"format      M3CK v{ckpt.version}")
    print(f"fingerprint {ckpt.fingerprint}")
    print(f"tensors     {len(ckpt.tensors)}")
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        if name == "meta/config":
            continue
        print(f"  {name:<48} {arr.dtype.name:<8} {list(arr.shape)}")
    if "meta/config" in ckpt.tensors:
        print("config      " + tensor_text(ckpt.tensors["meta/config"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m3bind", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key, e.g. bind.lam=0")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help="output root directory")
        sp.add_argument("--modalities", help="comma-separated modality subset")
        return sp

    common(sub.add_parser("generate", help="write synthetic corpora"))
    tr = common(sub.add_parser("train", help="phase 0 pretraining then phase A binding"))
    tr.add_argument("--iters-bind", type=int)
    tr.add_argument("--resume", help="bind checkpoint to resume from")
    tr.add_argument("--stop-after", type=int, help="stop phase A after this many steps")
    common(sub.add_parser("distill", help="phase B distillation into a student text encoder"))
    ev = common(sub.add_parser("eval", help="evaluation suite"))
    ev.add_argument("--task", default="all",
                    choices=["all", "zero-shot", "few-shot", "retrieval", "cross-image", "student"])
    ev.add_argument("--pair", help="modality pair for cross-image retrieval, e.g. xray:ecg")
    ev.add_argument("--checkpoint", help="evaluate this checkpoint instead of the run's bind.m3ck")
    ev.add_argument("--ablation-grid", action="store_true",
                    help="train and evaluate the subset / AMB / lambda / SESKD variants")
    ins = sub.add_parser("inspect", help="print a checkpoint's header and tensor table")
    ins.add_argument("path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            return cmd_inspect(args.path)
        cfg = load_config(args)
        return {"generate": cmd_generate, "train": cmd_train, "distill": cmd_distill,
                "eval": cmd_eval}[args.command](cfg, args)
    except (ConfigError, FingerprintMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, NonFiniteError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
