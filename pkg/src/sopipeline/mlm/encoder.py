"""Pre-norm transformer encoder with explicit backprop.

Parameters live in a flat name -> ndarray dict in a declared order (the
checkpoint tensor order). The forward pass caches what the hand-written
backward pass needs; no autograd framework is involved, which keeps the
finite-difference gradient check an independent second route.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import erf

from ..bpe import N_SPECIALS
from ..errors import ChecksumMismatchError, UsageError

ATTENTION = "attention"
FFN = "ffn"
_LN_EPS = 1e-5
_MASK_PENALTY = 1e9


class HeadKind(Enum):
    SEQUENCE = "sequence"
    TOKEN = "token"


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    hidden: int
    n_heads: int
    vocab_size: int
    ffn_mult: int = 4
    max_positions: int = 2048
    seed: int = 0
    tied_head: bool = False
    sublayers: tuple[str, ...] = (ATTENTION, FFN)
    dtype: str = "float32"
    vocab_checksum: Optional[bytes] = None

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise UsageError(f"hidden ({self.hidden}) must be divisible by n_heads ({self.n_heads})")
        if self.max_positions < 1:
            raise UsageError("max_positions must be at least 1")
        if self.vocab_size <= N_SPECIALS:
            raise UsageError(f"vocab_size must exceed the {N_SPECIALS} special tokens")
        if self.n_layers < 0 or self.ffn_mult < 1:
            raise UsageError("n_layers must be >= 0 and ffn_mult >= 1")
        unknown = set(self.sublayers) - {ATTENTION, FFN}
        if unknown:
            raise UsageError(f"unknown sublayers {sorted(unknown)}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def _param_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, v, p = config.hidden, config.ffn_mult * config.hidden, config.vocab_size, config.max_positions
    shapes: list[tuple[str, tuple[int, ...]]] = [("tok_emb", (v, d)), ("pos_emb", (p, d))]
    for layer in range(config.n_layers):
        pre = f"L{layer}."
        if ATTENTION in config.sublayers:
            shapes += [
                (pre + "ln1.g", (d,)),
                (pre + "ln1.b", (d,)),
                (pre + "attn.wq", (d, d)),
                (pre + "attn.bq", (d,)),
                (pre + "attn.wk", (d, d)),
                (pre + "attn.bk", (d,)),
                (pre + "attn.wv", (d, d)),
                (pre + "attn.bv", (d,)),
                (pre + "attn.wo", (d, d)),
                (pre + "attn.bo", (d,)),
            ]
        if FFN in config.sublayers:
            shapes += [
                (pre + "ln2.g", (d,)),
                (pre + "ln2.b", (d,)),
                (pre + "ffn.w1", (d, f)),
                (pre + "ffn.b1", (f,)),
                (pre + "ffn.w2", (f, d)),
                (pre + "ffn.b2", (d,)),
            ]
    shapes += [("final_ln.g", (d,)), ("final_ln.b", (d,))]
    if not config.tied_head:
        shapes += [("head.w", (d, v)), ("head.b", (v,))]
    return shapes


def _init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith(".g"):
        return np.ones(shape, dtype=dtype)
    if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) or name == "head.b":
        return np.zeros(shape, dtype=dtype)
    return (rng.normal(0.0, 0.02, size=shape)).astype(dtype)


class EncoderModel:
    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.param_names = [name for name, _ in _param_shapes(config)]
        self.params: dict[str, np.ndarray] = {
            name: _init_param(name, shape, rng, config.np_dtype)
            for name, shape in _param_shapes(config)
        }
        self.head: Optional[tuple[HeadKind, int]] = None

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype: str) -> "EncoderModel":
        """Copy of this model with every tensor cast to ``dtype``."""
        clone = object.__new__(EncoderModel)
        clone.config = replace(self.config, dtype=dtype)
        clone.param_names = list(self.param_names)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        clone.head = self.head
        return clone

    # ------------------------------------------------------------------ #
    # forward                                                            #
    # ------------------------------------------------------------------ #

    def hidden_states(self, ids: np.ndarray, attn_mask: np.ndarray, want_cache: bool = False):
        """Embed, run the block stack, final-norm. Returns (y, cache)."""
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise UsageError("ids must be [batch, time]")
        B, T = ids.shape
        if T > cfg.max_positions:
            raise UsageError(f"sequence length {T} exceeds max_positions {cfg.max_positions}")
        if ids.max(initial=0) >= cfg.vocab_size or ids.min(initial=0) < 0:
            raise UsageError("token id out of vocabulary range")
        mask = np.asarray(attn_mask, dtype=self.config.np_dtype)

        x = self.params["tok_emb"][ids] + self.params["pos_emb"][:T][None, :, :]
        cache: dict = {"ids": ids, "mask": mask, "T": T, "layers": []}
        for layer in range(cfg.n_layers):
            pre = f"L{layer}."
            layer_cache: dict = {}
            if ATTENTION in cfg.sublayers:
                h, ln_cache = _ln_forward(x, self.params[pre + "ln1.g"], self.params[pre + "ln1.b"])
                out, attn_cache = self._attn_forward(h, mask, pre)
                layer_cache["ln1"] = ln_cache
                layer_cache["attn"] = attn_cache
                x = x + out
            if FFN in cfg.sublayers:
                h, ln_cache = _ln_forward(x, self.params[pre + "ln2.g"], self.params[pre + "ln2.b"])
                out, ffn_cache = self._ffn_forward(h, pre)
                layer_cache["ln2"] = ln_cache
                layer_cache["ffn"] = ffn_cache
                x = x + out
            cache["layers"].append(layer_cache)
        y, final_cache = _ln_forward(x, self.params["final_ln.g"], self.params["final_ln.b"])
        cache["final_ln"] = final_cache
        return y, (cache if want_cache else None)

    def _attn_forward(self, h: np.ndarray, mask: np.ndarray, pre: str):
        cfg = self.config
        B, T, d = h.shape
        H = cfg.n_heads
        dh = d // H
        p = self.params

        def split(z):  # [B,T,d] -> [B,H,T,dh]
            return z.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q = split(h @ p[pre + "attn.wq"] + p[pre + "attn.bq"])
        k = split(h @ p[pre + "attn.wk"] + p[pre + "attn.bk"])
        v = split(h @ p[pre + "attn.wv"] + p[pre + "attn.bv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh).astype(h.dtype)
        scores = scores - _MASK_PENALTY * (1.0 - mask)[:, None, None, :]
        probs = _softmax(scores)
        ctx = probs @ v  # [B,H,T,dh]
        merged = ctx.transpose(0, 2, 1, 3).reshape(B, T, d)
        out = merged @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
        return out, {"h": h, "q": q, "k": k, "v": v, "probs": probs, "merged": merged}

    def _ffn_forward(self, h: np.ndarray, pre: str):
        p = self.params
        a = h @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
        cdf = _gauss_cdf(a)
        g = a * cdf
        out = g @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        return out, {"h": h, "a": a, "g": g, "cdf": cdf}

    def logits_mlm(self, y: np.ndarray) -> np.ndarray:
        if self.config.tied_head:
            return y @ self.params["tok_emb"].T
        return y @ self.params["head.w"] + self.params["head.b"]

    # ------------------------------------------------------------------ #
    # backward                                                           #
    # ------------------------------------------------------------------ #

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward_mlm_head(self, y: np.ndarray, dlogits: np.ndarray, grads: dict) -> np.ndarray:
        """Gradient through the vocabulary projection; returns dY."""
        B, T, _ = y.shape
        y2 = y.reshape(B * T, -1)
        dl2 = dlogits.reshape(B * T, -1)
        if self.config.tied_head:
            grads["tok_emb"] += dl2.T @ y2
            return (dl2 @ self.params["tok_emb"]).reshape(y.shape)
        grads["head.w"] += y2.T @ dl2
        grads["head.b"] += dl2.sum(axis=0)
        return (dl2 @ self.params["head.w"].T).reshape(y.shape)

    def backward(self, cache: dict, dy: np.ndarray, grads: dict) -> None:
        """Backprop dLoss/dY through final norm, blocks, and embeddings."""
        cfg = self.config
        dx = _ln_backward(dy, cache["final_ln"], grads, "final_ln")
        for layer in reversed(range(cfg.n_layers)):
            pre = f"L{layer}."
            layer_cache = cache["layers"][layer]
            if FFN in cfg.sublayers:
                dh = self._ffn_backward(dx, layer_cache["ffn"], grads, pre)
                dx = dx + _ln_backward(dh, layer_cache["ln2"], grads, pre + "ln2")
            if ATTENTION in cfg.sublayers:
                dh = self._attn_backward(dx, layer_cache["attn"], grads, pre)
                dx = dx + _ln_backward(dh, layer_cache["ln1"], grads, pre + "ln1")
        ids, T = cache["ids"], cache["T"]
        np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
        grads["pos_emb"][:T] += dx.sum(axis=0)

    def _ffn_backward(self, dout: np.ndarray, c: dict, grads: dict, pre: str) -> np.ndarray:
        p = self.params
        B, T, d = dout.shape
        f = c["g"].shape[-1]
        do2 = dout.reshape(-1, d)
        g2 = c["g"].reshape(-1, f)
        grads[pre + "ffn.w2"] += g2.T @ do2
        grads[pre + "ffn.b2"] += do2.sum(axis=0)
        dg = dout @ p[pre + "ffn.w2"].T
        da = dg * _gelu_grad(c["a"], c["cdf"])
        da2 = da.reshape(-1, f)
        h2 = c["h"].reshape(-1, d)
        grads[pre + "ffn.w1"] += h2.T @ da2
        grads[pre + "ffn.b1"] += da2.sum(axis=0)
        return da @ p[pre + "ffn.w1"].T

    def _attn_backward(self, dout: np.ndarray, c: dict, grads: dict, pre: str) -> np.ndarray:
        p = self.params
        B, T, d = dout.shape
        H = self.config.n_heads
        dh = d // H

        do2 = dout.reshape(-1, d)
        m2 = c["merged"].reshape(-1, d)
        grads[pre + "attn.wo"] += m2.T @ do2
        grads[pre + "attn.bo"] += do2.sum(axis=0)
        dmerged = (dout @ p[pre + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        probs, q, k, v = c["probs"], c["q"], c["k"], c["v"]
        dprobs = dmerged @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dmerged
        # softmax: dS = P * (dP - sum(dP * P))
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dscores = dscores / np.sqrt(dh).astype(dout.dtype)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q

        def merge_heads(z):  # [B,H,T,dh] -> [B*T,d]
            return z.transpose(0, 2, 1, 3).reshape(B * T, d)

        h2 = c["h"].reshape(-1, d)
        dhidden = np.zeros_like(c["h"]).reshape(-1, d)
        for name, dz in (("q", dq), ("k", dk), ("v", dv)):
            dz2 = merge_heads(dz)
            grads[pre + f"attn.w{name}"] += h2.T @ dz2
            grads[pre + f"attn.b{name}"] += dz2.sum(axis=0)
            dhidden += dz2 @ p[pre + f"attn.w{name}"].T
        return dhidden.reshape(B, T, d)


def build_encoder(config: EncoderConfig) -> EncoderModel:
    """Deterministic seeded initialization: scaled-normal weights, zero
    biases, unit norm gains."""
    return EncoderModel(config)


@dataclass
class ClassifierModel:
    """Encoder plus a classification head over its final hidden states."""

    encoder: EncoderModel
    kind: HeadKind
    n_classes: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            rng = np.random.default_rng(self.encoder.config.seed + 1)
            d = self.encoder.config.hidden
            self.params = {
                "cls_head.w": rng.normal(0.0, 0.02, size=(d, self.n_classes)).astype(
                    self.encoder.config.np_dtype
                ),
                "cls_head.b": np.zeros(self.n_classes, dtype=self.encoder.config.np_dtype),
            }

    def logits(self, y: np.ndarray) -> np.ndarray:
        if self.kind is HeadKind.SEQUENCE:
            return y[:, 0, :] @ self.params["cls_head.w"] + self.params["cls_head.b"]
        return y @ self.params["cls_head.w"] + self.params["cls_head.b"]

    def backward_head(self, y: np.ndarray, dlogits: np.ndarray, grads: dict) -> np.ndarray:
        dy = np.zeros_like(y)
        if self.kind is HeadKind.SEQUENCE:
            grads["cls_head.w"] += y[:, 0, :].T @ dlogits
            grads["cls_head.b"] += dlogits.sum(axis=0)
            dy[:, 0, :] = dlogits @ self.params["cls_head.w"].T
        else:
            B, T, C = dlogits.shape
            y2 = y.reshape(B * T, -1)
            dl2 = dlogits.reshape(B * T, C)
            grads["cls_head.w"] += y2.T @ dl2
            grads["cls_head.b"] += dl2.sum(axis=0)
            dy = (dl2 @ self.params["cls_head.w"].T).reshape(y.shape)
        return dy


# -- numeric pieces -----------------------------------------------------------


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _gauss_cdf(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype)


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * _gauss_cdf(x)


def _gelu_grad(x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf.astype(x.dtype)


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, {"xhat": xhat, "inv": inv, "g": g}


def _ln_backward(dy: np.ndarray, cache: dict, grads: dict, name: str) -> np.ndarray:
    xhat, inv, g = cache["xhat"], cache["inv"], cache["g"]
    axes = tuple(range(dy.ndim - 1))
    grads[name + ".g"] += (dy * xhat).sum(axis=axes)
    grads[name + ".b"] += dy.sum(axis=axes)
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)


# -- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = b"SOCP"
_CKPT_VERSION = 1


def save_checkpoint(model: EncoderModel, path: str | Path) -> None:
    """Versioned header + config JSON + float32 LE tensors in declared order."""
    cfg = model.config
    config_block = json.dumps(
        {
            "n_layers": cfg.n_layers,
            "hidden": cfg.hidden,
            "n_heads": cfg.n_heads,
            "vocab_size": cfg.vocab_size,
            "ffn_mult": cfg.ffn_mult,
            "max_positions": cfg.max_positions,
            "seed": cfg.seed,
            "tied_head": cfg.tied_head,
            "sublayers": list(cfg.sublayers),
            "dtype": cfg.dtype,
            "vocab_checksum": cfg.vocab_checksum.hex() if cfg.vocab_checksum else None,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<H", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(config_block)))
        fh.write(config_block)
        for name in model.param_names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> EncoderModel:
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise ChecksumMismatchError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _CKPT_VERSION:
        raise ChecksumMismatchError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 6)
    cfg_raw = json.loads(blob[10 : 10 + cfg_len])
    checksum = cfg_raw.pop("vocab_checksum", None)
    config = EncoderConfig(
        **{**cfg_raw, "sublayers": tuple(cfg_raw["sublayers"])},
        vocab_checksum=bytes.fromhex(checksum) if checksum else None,
    )
    model = EncoderModel(config)
    pos = 10 + cfg_len
    for name in model.param_names:
        shape = model.params[name].shape
        n_bytes = int(np.prod(shape)) * 4
        if pos + n_bytes > len(blob):
            raise ChecksumMismatchError(f"{path}: truncated checkpoint")
        tensor = np.frombuffer(blob[pos : pos + n_bytes], dtype="<f4").reshape(shape)
        model.params[name] = tensor.astype(config.np_dtype)
        pos += n_bytes
    if pos != len(blob):
        raise ChecksumMismatchError(f"{path}: trailing bytes in checkpoint")
    return model
