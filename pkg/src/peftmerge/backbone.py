"""Frozen tiny transformer encoder with PEFT hook points.

Architecture: token + position embeddings, then n_layers blocks of
(multi-head self-attention, residual, layer norm) followed by
(feed-forward with tanh-GELU, residual, layer norm), then mean pooling
over the real (unpadded) positions.  LoRA attaches to the query and
value projections; adapters sit after the feed-forward transform, before
its layer norm.  The classification head is not part of the backbone; it
lives in the task module.

Forward/backward are written by hand on top of the tensor primitives.
The backward pass always propagates activation gradients end to end and
returns attachment-parameter gradients; backbone-parameter gradients are
collected on request (pre-training only).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import bench
from .optim import Adam
from .peft import PeftConfig, PeftParamSet
from .tensor import (
    DimensionError,
    gelu,
    gelu_backward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    relu,
    softmax_cross_entropy,
)

LN_EPS = 1e-5


class VocabularyError(ValueError):
    """A token id falls outside the configured vocabulary."""


class SequenceLengthError(ValueError):
    """A sequence is empty or longer than max_seq_len."""


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = bench.VOCAB_SIZE
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    n_layers: int = 2
    max_seq_len: int = bench.MAX_LEN
    n_total_classes: int = bench.N_UNION_CLASSES

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "n_layers",
                     "max_seq_len", "n_total_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


def backbone_param_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map for all backbone weights."""
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        shapes[f"L{i}.wq"] = (d, d)
        shapes[f"L{i}.bq"] = (d,)
        shapes[f"L{i}.wk"] = (d, d)
        shapes[f"L{i}.bk"] = (d,)
        shapes[f"L{i}.wv"] = (d, d)
        shapes[f"L{i}.bv"] = (d,)
        shapes[f"L{i}.wo"] = (d, d)
        shapes[f"L{i}.bo"] = (d,)
        shapes[f"L{i}.ln1_g"] = (d,)
        shapes[f"L{i}.ln1_b"] = (d,)
        shapes[f"L{i}.ff_w1"] = (d, f)
        shapes[f"L{i}.ff_b1"] = (f,)
        shapes[f"L{i}.ff_w2"] = (f, d)
        shapes[f"L{i}.ff_b2"] = (d,)
        shapes[f"L{i}.ln2_g"] = (d,)
        shapes[f"L{i}.ln2_b"] = (d,)
    return shapes


def init_backbone_weights(
    config: BackboneConfig, seed: int, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Seeded init: weights ~ N(0, 0.02), biases/shifts zero, gains one."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in backbone_param_shapes(config).items():
        base = name.split(".")[-1]
        if base in ("ln1_g", "ln2_g"):
            arr = np.ones(shape)
        elif base in ("bq", "bk", "bv", "bo", "ff_b1", "ff_b2", "ln1_b", "ln2_b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        weights[name] = arr.astype(dtype)
    return weights


def compute_fingerprint(config: BackboneConfig, weights: dict[str, np.ndarray]) -> str:
    """Content hash over all weight data in canonical order."""
    h = hashlib.sha256()
    for name in backbone_param_shapes(config):
        arr = weights[name]
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class BackboneParams:
    config: BackboneConfig
    weights: dict[str, np.ndarray]
    fingerprint: str


def freeze(config: BackboneConfig, weights: dict[str, np.ndarray]) -> BackboneParams:
    """Fingerprint the weights and mark the arrays read-only."""
    for arr in weights.values():
        arr.flags.writeable = False
    return BackboneParams(config, weights, compute_fingerprint(config, weights))


def verify_fingerprint(params: BackboneParams) -> bool:
    return compute_fingerprint(params.config, params.weights) == params.fingerprint


def _pack_batch(tokens, config: BackboneConfig):
    """Pad a list of token sequences into (ids, mask, lengths)."""
    if len(tokens) == 0:
        raise ValueError("empty batch")
    lengths = []
    for seq in tokens:
        n = len(seq)
        if n == 0:
            raise SequenceLengthError("empty sequence")
        if n > config.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {n} exceeds max_seq_len {config.max_seq_len}"
            )
        lengths.append(n)
    max_len = max(lengths)
    ids = np.zeros((len(tokens), max_len), dtype=np.int64)
    mask = np.zeros((len(tokens), max_len), dtype=bool)
    for i, seq in enumerate(tokens):
        arr = np.asarray(seq, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= config.vocab_size):
            raise VocabularyError(
                f"token id outside vocabulary of size {config.vocab_size}"
            )
        ids[i, : arr.size] = arr
        mask[i, : arr.size] = True
    return ids, mask, np.asarray(lengths, dtype=np.int64)


def backbone_forward(tokens, params: BackboneParams, attachment: PeftParamSet | None = None):
    """Run the encoder; returns (pooled [B, d_model], cache for backward)."""
    return _forward(tokens, params.config, params.weights, attachment)


def _forward(tokens, config: BackboneConfig, w: dict[str, np.ndarray],
             attachment: PeftParamSet | None):
    if attachment is not None and attachment.config.d_model != config.d_model:
        raise DimensionError(
            f"attachment d_model {attachment.config.d_model} "
            f"does not match backbone {config.d_model}"
        )
    ids, mask, lengths = _pack_batch(tokens, config)
    B, L = ids.shape
    D, H = config.d_model, config.n_heads
    dh = D // H
    inv_sqrt = 1.0 / np.sqrt(np.asarray(dh, dtype=w["tok_emb"].dtype))
    fmask = mask.astype(w["tok_emb"].dtype)

    x = (w["tok_emb"][ids] + w["pos_emb"][:L][None, :, :]) * fmask[:, :, None]
    key_bias = np.where(mask, 0.0, -np.inf).astype(x.dtype)

    kind = attachment.config.kind if attachment is not None else None
    targeted = set(attachment.config.target_layers) if attachment is not None else set()
    scale = attachment.config.scaling if attachment is not None else 0.0

    cache = {"ids": ids, "mask": mask, "fmask": fmask, "lengths": lengths,
             "x0": x, "layers": [], "config": config, "weights": w,
             "attachment": attachment}

    for i in range(config.n_layers):
        lc: dict = {"i": i}
        xf = x.reshape(B * L, D)
        lc["xf"] = xf
        q = linear_forward(xf, w[f"L{i}.wq"], w[f"L{i}.bq"])
        k = linear_forward(xf, w[f"L{i}.wk"], w[f"L{i}.bk"])
        v = linear_forward(xf, w[f"L{i}.wv"], w[f"L{i}.bv"])
        if kind == "lora" and i in targeted:
            p = attachment.params
            xa_q = xf @ p[f"L{i}.a_q"]
            xa_v = xf @ p[f"L{i}.a_v"]
            q = q + scale * (xa_q @ p[f"L{i}.b_q"])
            v = v + scale * (xa_v @ p[f"L{i}.b_v"])
            lc["xa_q"], lc["xa_v"] = xa_q, xa_v

        qh = q.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        scores = (qh @ kh.swapaxes(-1, -2)) * inv_sqrt + key_bias[:, None, None, :]
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B * L, D)
        lc["qh"], lc["kh"], lc["vh"], lc["probs"], lc["ctx"] = qh, kh, vh, probs, ctx

        ao = linear_forward(ctx, w[f"L{i}.wo"], w[f"L{i}.bo"])
        sum1 = xf + ao
        h, lc["ln1"] = layer_norm_forward(sum1, w[f"L{i}.ln1_g"], w[f"L{i}.ln1_b"], LN_EPS)
        lc["h"] = h
        f1 = linear_forward(h, w[f"L{i}.ff_w1"], w[f"L{i}.ff_b1"])
        a1 = gelu(f1)
        f2 = linear_forward(a1, w[f"L{i}.ff_w2"], w[f"L{i}.ff_b2"])
        lc["f1"], lc["a1"], lc["f2"] = f1, a1, f2
        if kind == "adapter" and i in targeted:
            p = attachment.params
            dpre = f2 @ p[f"L{i}.w_down"] + p[f"L{i}.b_down"]
            dact = relu(dpre)
            aout = f2 + dact @ p[f"L{i}.w_up"] + p[f"L{i}.b_up"]
            lc["dpre"], lc["dact"] = dpre, dact
        else:
            aout = f2
        sum2 = h + aout
        y, lc["ln2"] = layer_norm_forward(sum2, w[f"L{i}.ln2_g"], w[f"L{i}.ln2_b"], LN_EPS)
        x = y.reshape(B, L, D)
        cache["layers"].append(lc)

    pooled = (x * fmask[:, :, None]).sum(axis=1) / lengths[:, None].astype(x.dtype)
    return pooled, cache


def backbone_backward(cache, grad_pooled, need_backbone_grads: bool = False):
    """Backprop from the pooled output.

    Returns (attachment_grads, backbone_grads); backbone_grads is None
    unless requested.  Attachment grads cover the attached module's
    layer parameters only (the head is handled by the caller).
    """
    config: BackboneConfig = cache["config"]
    w = cache["weights"]
    attachment: PeftParamSet | None = cache["attachment"]
    mask, fmask, lengths = cache["mask"], cache["fmask"], cache["lengths"]
    B, L = mask.shape
    D, H = config.d_model, config.n_heads
    dh = D // H
    inv_sqrt = 1.0 / np.sqrt(np.asarray(dh, dtype=grad_pooled.dtype))

    kind = attachment.config.kind if attachment is not None else None
    targeted = set(attachment.config.target_layers) if attachment is not None else set()
    scale = attachment.config.scaling if attachment is not None else 0.0

    att_grads: dict[str, np.ndarray] = {}
    bb_grads: dict[str, np.ndarray] | None = {} if need_backbone_grads else None

    flen = lengths[:, None, None].astype(grad_pooled.dtype)
    gx = fmask[:, :, None] * (grad_pooled[:, None, :] / flen)

    for lc in reversed(cache["layers"]):
        i = lc["i"]
        gy = gx.reshape(B * L, D)
        gsum2, gg2, gs2 = layer_norm_backward(lc["ln2"], gy)
        gh = gsum2.copy()
        if kind == "adapter" and i in targeted:
            p = attachment.params
            dact, dpre, f2 = lc["dact"], lc["dpre"], lc["f2"]
            gaout = gsum2
            att_grads[f"L{i}.w_up"] = dact.T @ gaout
            att_grads[f"L{i}.b_up"] = gaout.sum(axis=0)
            gdact = gaout @ p[f"L{i}.w_up"].T
            gdpre = gdact * (dpre > 0).astype(gdact.dtype)
            att_grads[f"L{i}.w_down"] = f2.T @ gdpre
            att_grads[f"L{i}.b_down"] = gdpre.sum(axis=0)
            gf2 = gsum2 + gdpre @ p[f"L{i}.w_down"].T
        else:
            gf2 = gsum2
        ga1, gw2, gb2 = linear_backward(lc["a1"], w[f"L{i}.ff_w2"], gf2)
        gf1 = gelu_backward(lc["f1"], ga1)
        ghf, gw1, gb1 = linear_backward(lc["h"], w[f"L{i}.ff_w1"], gf1)
        gh += ghf
        gsum1, gg1, gs1 = layer_norm_backward(lc["ln1"], gh)
        gao = gsum1
        gctx, gwo, gbo = linear_backward(lc["ctx"], w[f"L{i}.wo"], gao)

        gctxh = gctx.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        probs, vh, qh, kh = lc["probs"], lc["vh"], lc["qh"], lc["kh"]
        gp = gctxh @ vh.swapaxes(-1, -2)
        gvh = probs.swapaxes(-1, -2) @ gctxh
        gscores = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
        gqh = (gscores @ kh) * inv_sqrt
        gkh = (gscores.swapaxes(-1, -2) @ qh) * inv_sqrt

        gq = gqh.transpose(0, 2, 1, 3).reshape(B * L, D)
        gk = gkh.transpose(0, 2, 1, 3).reshape(B * L, D)
        gv = gvh.transpose(0, 2, 1, 3).reshape(B * L, D)

        xf = lc["xf"]
        gxq, gwq, gbq = linear_backward(xf, w[f"L{i}.wq"], gq)
        gxk, gwk, gbk = linear_backward(xf, w[f"L{i}.wk"], gk)
        gxv, gwv, gbv = linear_backward(xf, w[f"L{i}.wv"], gv)
        gxf = gsum1 + gxq + gxk + gxv
        if kind == "lora" and i in targeted:
            p = attachment.params
            tq = gq @ p[f"L{i}.b_q"].T
            tv = gv @ p[f"L{i}.b_v"].T
            att_grads[f"L{i}.a_q"] = scale * (xf.T @ tq)
            att_grads[f"L{i}.b_q"] = scale * (lc["xa_q"].T @ gq)
            att_grads[f"L{i}.a_v"] = scale * (xf.T @ tv)
            att_grads[f"L{i}.b_v"] = scale * (lc["xa_v"].T @ gv)
            gxf = gxf + scale * (tq @ p[f"L{i}.a_q"].T + tv @ p[f"L{i}.a_v"].T)

        if bb_grads is not None:
            bb_grads[f"L{i}.wq"], bb_grads[f"L{i}.bq"] = gwq, gbq
            bb_grads[f"L{i}.wk"], bb_grads[f"L{i}.bk"] = gwk, gbk
            bb_grads[f"L{i}.wv"], bb_grads[f"L{i}.bv"] = gwv, gbv
            bb_grads[f"L{i}.wo"], bb_grads[f"L{i}.bo"] = gwo, gbo
            bb_grads[f"L{i}.ln1_g"], bb_grads[f"L{i}.ln1_b"] = gg1, gs1
            bb_grads[f"L{i}.ff_w1"], bb_grads[f"L{i}.ff_b1"] = gw1, gb1
            bb_grads[f"L{i}.ff_w2"], bb_grads[f"L{i}.ff_b2"] = gw2, gb2
            bb_grads[f"L{i}.ln2_g"], bb_grads[f"L{i}.ln2_b"] = gg2, gs2

        gx = gxf.reshape(B, L, D)

    if bb_grads is not None:
        ge = (gx * fmask[:, :, None]).reshape(B * L, D)
        gtok = np.zeros_like(w["tok_emb"])
        np.add.at(gtok, cache["ids"].reshape(-1), ge)
        gpos = np.zeros_like(w["pos_emb"])
        gpos[:L] = (gx * fmask[:, :, None]).sum(axis=0)
        bb_grads["tok_emb"] = gtok
        bb_grads["pos_emb"] = gpos
        # reorder into canonical shape order
        bb_grads = {name: bb_grads[name] for name in backbone_param_shapes(config)}

    return att_grads, bb_grads


@dataclass
class ClassifierModel:
    """A frozen backbone bound to one task module (attachment + head)."""

    backbone: BackboneParams
    phi: PeftParamSet

    def logits(self, tokens) -> np.ndarray:
        pooled, _ = backbone_forward(tokens, self.backbone, self.phi)
        return linear_forward(pooled, self.phi.params["head_w"], self.phi.params["head_b"])


def model_accuracy(model: ClassifierModel, examples, batch_size: int = 64) -> float:
    """Accuracy under argmax over the full class union (ties -> lowest index)."""
    if len(examples) == 0:
        raise ValueError("empty evaluation set")
    correct = 0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        logits = model.logits([seq for seq, _ in chunk])
        preds = np.argmax(logits, axis=1)  # first max wins: lowest class index
        correct += int(sum(int(p) == lab for p, (_, lab) in zip(preds, chunk)))
    return correct / len(examples)


def pretrain_backbone(config: BackboneConfig, corpus_seed: int, steps: int) -> BackboneParams:
    """Pre-train the full backbone on the generic background mixture.

    Trains backbone weights plus a throwaway linear head with Adam, then
    discards the head, freezes the weights and fingerprints them.  Fully
    deterministic in (config, corpus_seed, steps).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    weights = init_backbone_weights(config, seed=corpus_seed)
    mixture = generate_mixture_for(config, corpus_seed)
    n_classes = mixture.spec.n_classes
    rng = np.random.default_rng([corpus_seed, 1])
    head = {
        "head_w": rng.normal(0.0, 0.02, size=(config.d_model, n_classes)).astype(np.float32),
        "head_b": np.zeros(n_classes, dtype=np.float32),
    }
    trainable = dict(weights)
    trainable.update(head)
    opt = Adam(trainable, lr=3e-3)
    order_rng = np.random.default_rng([corpus_seed, 2])
    mask = np.ones(n_classes, dtype=bool)
    batch = 32
    n = len(mixture.examples)
    perm = order_rng.permutation(n)
    cursor = 0
    for _ in range(steps):
        if cursor + batch > n:
            perm = order_rng.permutation(n)
            cursor = 0
        idx = perm[cursor : cursor + batch]
        cursor += batch
        seqs = [mixture.examples[j][0] for j in idx]
        labels = [mixture.examples[j][1] for j in idx]
        pooled, cache = _forward(seqs, config, weights, None)
        logits = linear_forward(pooled, head["head_w"], head["head_b"])
        _, grad_logits = softmax_cross_entropy(logits, labels, mask)
        gpooled, ghw, ghb = linear_backward(pooled, head["head_w"], grad_logits)
        _, bb_grads = backbone_backward(cache, gpooled, need_backbone_grads=True)
        grads = dict(bb_grads)
        grads["head_w"] = ghw
        grads["head_b"] = ghb
        opt.step(grads)
    return freeze(config, weights)


def generate_mixture_for(config: BackboneConfig, corpus_seed: int):
    """Mixture sized for the configured vocabulary (clamped for tiny configs)."""
    if config.vocab_size >= bench.VOCAB_SIZE:
        return bench.generate_pretrain_mixture(corpus_seed)
    # Tiny test configs: fall back to a uniform-vocabulary mixture.
    rng = np.random.default_rng([corpus_seed, 3])
    n_classes = 4
    examples = []
    for ex_idx in range(256):
        label = ex_idx % n_classes
        length = int(rng.integers(3, config.max_seq_len + 1))
        # bias token choice by label so the mixture is learnable
        lo = (label * config.vocab_size) // n_classes
        hi = ((label + 1) * config.vocab_size) // n_classes
        seq = np.where(
            rng.random(length) < 0.5,
            rng.integers(lo, hi, size=length),
            rng.integers(0, config.vocab_size, size=length),
        ).astype(np.int64)
        examples.append((seq, label))
    spec = bench.TaskSpec(
        task_id="pretrain", n_classes=n_classes, class_offset=0,
        vocab_slice=(0, config.vocab_size), n_train=len(examples), n_val=0, n_test=0,
    )
    return bench.TaskDataset(spec, "train", examples)
