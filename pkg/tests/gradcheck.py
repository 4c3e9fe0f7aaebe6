"""Finite-difference checks of every composite loss through small encoder stacks."""
import numpy as np

from m3bind.autodiff import Tape, backward
from m3bind.encoders import ImageEncoder, TextEncoder, attach_lora, encode_image, encode_text
from m3bind.objectives import (
    Temperature,
    clip_contrastive_loss,
    kd_contrastive_loss,
    kd_mse_loss,
    pairwise_text_mse,
    seskd_loss,
    total_bind_loss,
)

REL_TOL = 1e-4
DENOM_FLOOR = 1e-8
# with Richardson the truncation error is O(h^4), so h can sit well above the rounding-noise floor
STEP = 1e-4
MODS = ("a", "b", "c")
VOCAB, IN_DIM, TOKEN_DIM, HIDDEN, EMBED = 5, 4, 2, 4, 3


def _stack(seed: int):
    """Three tiny modality pairs plus a student, with random adapters and every tensor tracked."""
    rng = np.random.default_rng(seed)
    encs = {}
    for i, m in enumerate(MODS):
        img = ImageEncoder(m, IN_DIM, seed * 31 + 2 * i, hidden=(HIDDEN,), embed_dim=EMBED)
        txt = TextEncoder(m, VOCAB, seed * 31 + 2 * i + 1, token_dim=TOKEN_DIM, hidden=(HIDDEN,), embed_dim=EMBED)
        for enc in (img, txt):
            attach_lora(enc, rank=2, alpha=4.0, seed=seed + i)
            for ad in enc.adapters.values():
                ad.B[...] = rng.normal(0.0, 0.3, size=ad.B.shape)
            enc.unfreeze()
        encs[m] = (img, txt)
    student = TextEncoder("student", VOCAB, seed * 31 + 99, token_dim=TOKEN_DIM, hidden=(HIDDEN,), embed_dim=EMBED)
    n = int(rng.integers(2, 5))
    batch = {
        "signals": {m: rng.normal(size=(n, IN_DIM)) for m in MODS},
        "tokens": [list(rng.integers(0, VOCAB, size=rng.integers(1, 4))) for _ in range(n)],
    }
    tau = Temperature(float(rng.uniform(0.3, 1.0)), learnable=True)
    return encs, student, batch, tau


def _embeddings(encs, student, batch, tape):
    toks = batch["tokens"]
    emb = {}
    for m in MODS:
        img, txt = encs[m]
        emb[img.prefix] = encode_image(img, batch["signals"][m], tape)
        emb[txt.prefix] = encode_text(txt, toks, tape)
    emb[student.prefix] = encode_text(student, toks, tape)
    return emb


def _combine(encs, student, emb, tau, tape):
    img = {m: emb[encs[m][0].prefix] for m in MODS}
    pair_txt = {m: emb[encs[m][1].prefix] for m in MODS}
    stu = emb[student.prefix]
    clip = {m: clip_contrastive_loss(img[m], pair_txt[m], tau, symmetric=(m != "a"), tape=tape)
            for m in MODS}
    mse = pairwise_text_mse(pair_txt)
    weights = {"a": 0.5, "b": 0.25, "c": 1.0}
    kd = kd_mse_loss(pair_txt, stu)
    contrastive = kd_contrastive_loss(stu, img["b"], tau, tape)
    return {
        "clip": clip["a"],
        "clip_symmetric": clip["b"],
        "text_mse": mse[("a", "c")],
        "bind_total": total_bind_loss(clip, mse, weights, 10.0).loss,
        "kd_mse": kd,
        "kd_contrastive": contrastive,
        "seskd": seskd_loss(kd, contrastive),
    }


def _losses(encs, student, batch, tau, tape):
    return _combine(encs, student, _embeddings(encs, student, batch, tape), tau, tape)


LOSS_NAMES = ("clip", "clip_symmetric", "text_mse", "bind_total", "kd_mse", "kd_contrastive", "seskd")


def _params(encs, student, tau):
    """Map each tracked key to ``(array, owning encoder or None)``."""
    out = {}
    for enc in [e for pair in encs.values() for e in pair] + [student]:
        for name, arr in enc.named_parameters().items():
            out[f"{enc.prefix}:{name}"] = (arr, enc)
    out["temperature:log_tau"] = (tau.log_tau, None)
    return out


def max_relative_errors(seed: int) -> dict[str, float]:
    """Per loss, the worst elementwise |analytic - numeric| / max(|numeric|, 1e-8) over all parameters.

    The numeric gradient is a Richardson-extrapolated central difference, (4 D(h) - D(2h)) / 3.
    A plain central difference cannot reach 1e-4 relative error here: small steps drown tiny
    gradients in rounding noise and large steps leave too much truncation error.
    Perturbing one parameter only changes its owner's embedding, so the others are cached.
    """
    encs, student, batch, tau = _stack(seed)
    tape = Tape()
    losses = _losses(encs, student, batch, tau, tape)
    analytic = {}
    for name in LOSS_NAMES:
        grads = backward(tape, losses[name])
        analytic[name] = tape.grads_by_key(grads)
    base = _embeddings(encs, student, batch, None)
    worst = dict.fromkeys(LOSS_NAMES, 0.0)

    def all_losses(owner):
        emb = base
        if owner is not None:
            emb = dict(base)
            if owner is student or isinstance(owner, TextEncoder):
                emb[owner.prefix] = encode_text(owner, batch["tokens"], None)
            else:
                m = next(m for m in MODS if encs[m][0] is owner)
                emb[owner.prefix] = encode_image(owner, batch["signals"][m], None)
        vals = _combine(encs, student, emb, tau, None)
        return np.array([vals[n].item() for n in LOSS_NAMES])

    h = STEP
    for key, (arr, owner) in _params(encs, student, tau).items():
        flat = arr.reshape(-1)
        numeric = np.zeros((len(LOSS_NAMES), flat.size))
        for i in range(flat.size):
            orig = flat[i]
            f = {}
            for k in (1, -1, 2, -2):
                flat[i] = orig + k * h
                f[k] = all_losses(owner)
            flat[i] = orig
            d1 = (f[1] - f[-1]) / (2.0 * h)
            d2 = (f[2] - f[-2]) / (4.0 * h)
            numeric[:, i] = (4.0 * d1 - d2) / 3.0
        for j, name in enumerate(LOSS_NAMES):
            a = analytic[name].get(key, np.zeros(arr.shape)).reshape(-1)
            err = np.abs(a - numeric[j]) / np.maximum(np.abs(numeric[j]), DENOM_FLOOR)
            worst[name] = max(worst[name], float(err.max()))
    return worst
