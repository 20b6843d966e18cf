"""Small GPT-2 style decoder over the chain state space.

Token 0 is BOS and state ``s`` (1-based) is token ``s``. The output head only
covers the states, so the prediction at position 0 (after BOS) models the
initial distribution and the prediction at position ``t`` models state
``t + 1`` given the prefix.

Blocks are pre-LayerNorm with a GELU MLP of width ``4 * d_model``, learned
positional embeddings, no weight tying and no dropout.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .chains import SequenceSample
from .tensor import Tensor

BOS = 0
MAGIC = b"MCUNLRN\x00"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    n_states: int = 10
    max_len: int = 32
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if min(self.layers, self.heads, self.d_model, self.max_len, self.n_states) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def vocab_in(self) -> int:
        return self.n_states + 1

    @property
    def vocab_out(self) -> int:
        return self.n_states


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "wte": (config.vocab_in, d),
        "wpe": (config.max_len, d),
    }
    for i in range(config.layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.w": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.w": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, 4 * d), p + "mlp.b1": (4 * d,),
            p + "mlp.w2": (4 * d, d), p + "mlp.b2": (d,),
        })
    shapes.update({"lnf.w": (d,), "lnf.b": (d,), "head": (d, config.vocab_out)})
    return shapes


def param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


class ModelParams:
    """Named parameter tensors of one model, in a fixed canonical order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise ValueError("parameter names do not match the config layout")
        for name, t in tensors.items():
            if t.shape != expected[name]:
                raise ValueError(f"{name}: shape {t.shape} != {expected[name]}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=True)
                                         for k, t in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, t in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def init(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Normal(0, init_std) weights, zero biases, unit LayerNorm gains."""
    rng = np.random.Generator(np.random.Philox(key=[int(seed), 0x6D6F64656C]))
    dtype = np.dtype(config.dtype)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(("ln1.w", "ln2.w")) or name == "lnf.w":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, config.init_std, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return ModelParams(config, tensors)


# batching ----------------------------------------------------------------------

def encode(samples: Sequence[SequenceSample] | Sequence[Sequence[int]]):
    """Pad a batch into (tokens, targets, mask), each shaped (B, Lmax).

    ``targets`` are 0-based state indices; ``mask`` is 1 on real positions.
    """
    seqs = [s.states if isinstance(s, SequenceSample) else tuple(s) for s in samples]
    lmax = max(len(s) for s in seqs)
    b = len(seqs)
    tokens = np.full((b, lmax), BOS, dtype=np.int64)
    targets = np.zeros((b, lmax), dtype=np.int64)
    mask = np.zeros((b, lmax), dtype=np.float32)
    for i, s in enumerate(seqs):
        n = len(s)
        arr = np.asarray(s, dtype=np.int64)
        tokens[i, 1:n] = arr[:-1]
        targets[i, :n] = arr - 1
        mask[i, :n] = 1.0
    return tokens, targets, mask


# forward -------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def forward(params: ModelParams, tokens: np.ndarray) -> Tensor:
    """Per-position log-probabilities over states, shape (B, L, n_states)."""
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, length), got {tokens.shape}")
    b, L = tokens.shape
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len={cfg.max_len}")
    h, dh = cfg.heads, cfg.d_model // cfg.heads
    p = params.tensors
    x = T.add(T.embedding(p["wte"], tokens), T.embedding(p["wpe"], np.arange(L)))
    att_scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.layers):
        pre = f"h{i}."
        a = T.layer_norm(x, p[pre + "ln1.w"], p[pre + "ln1.b"])

        def heads(w, bias):
            y = T.reshape(_linear(a, p[pre + w], p[pre + bias]), (b, L, h, dh))
            return T.transpose(y, (0, 2, 1, 3))

        q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk", "attn.bk"), heads("attn.wv", "attn.bv")
        att = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), att_scale)
        att = T.softmax(T.causal_masked_fill(att), axis=-1)
        y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, L, cfg.d_model))
        x = T.add(x, _linear(y, p[pre + "attn.wo"], p[pre + "attn.bo"]))
        m = T.layer_norm(x, p[pre + "ln2.w"], p[pre + "ln2.b"])
        m = _linear(T.gelu(_linear(m, p[pre + "mlp.w1"], p[pre + "mlp.b1"])),
                    p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        x = T.add(x, m)
    x = T.layer_norm(x, p["lnf.w"], p["lnf.b"])
    return T.log_softmax(_linear(x, p["head"]), axis=-1)


def token_logprobs(params: ModelParams, samples) -> tuple[Tensor, np.ndarray]:
    """(B, Lmax) log-probability of each observed state, plus the padding mask."""
    tokens, targets, mask = encode(samples)
    logp = forward(params, tokens)
    return T.gather(logp, targets, axis=-1), mask


def sequence_logprob(params: ModelParams, samples) -> Tensor:
    """log pi_theta(y) per sequence, shape (B,).

    Sum over positions of log p(state_{t+1} | BOS, state_1..state_t).
    """
    tok, mask = token_logprobs(params, samples)
    return T.sum(T.mul(tok, mask.astype(tok.dtype)), axis=1)


def predict(params: ModelParams, samples, batch_size: int = 256) -> list[np.ndarray]:
    """Next-state distributions (float64, one (L, n_states) array per sample), no tape."""
    out: list[np.ndarray] = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            tokens, _, _ = encode(chunk)
            logp = forward(params, tokens).data.astype(np.float64)
            for j, s in enumerate(chunk):
                out.append(logp[j, :len(s.states if isinstance(s, SequenceSample) else s)])
    return out


def sequence_logprob_values(params: ModelParams, samples, batch_size: int = 256) -> np.ndarray:
    """Float64 log pi_theta(y) for many samples without recording a tape."""
    vals = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            vals.append(sequence_logprob(params, samples[i:i + batch_size]).data.astype(np.float64))
    return np.concatenate(vals) if vals else np.zeros(0)


# checkpoints ----------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams, extra_arrays: dict | None = None,
                    extra: dict | None = None) -> None:
    """Magic, version, JSON header, little-endian buffers, trailing sha256.

    Buffers are ``<f4`` for float32 models (``<f8`` otherwise) in header order:
    parameters first, then ``extra_arrays`` (e.g. optimizer moments).
    """
    dtype = "<f4" if params.config.dtype == "float32" else "<f8"
    arrays = [("param/" + k, v) for k, v in params.arrays().items()]
    arrays += list((extra_arrays or {}).items())
    header = {
        "config": asdict(params.config),
        "dtype": dtype,
        "tensors": [[name, list(arr.shape)] for name, arr in arrays],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<II", CKPT_VERSION, len(hbytes))
    body += hbytes
    for _, arr in arrays:
        body += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    body += hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def load_checkpoint(path: str | Path):
    """Returns (params, extra_arrays, extra)."""
    raw = Path(path).read_bytes()
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch")
    if body[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", body[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[16:16 + hlen])
    dtype = np.dtype(header["dtype"])
    config = ModelConfig(**header["config"])
    off = 16 + hlen
    tensors, extra_arrays = {}, {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype=dtype, count=n, offset=off).reshape(shape)
        arr = arr.astype(np.dtype(config.dtype))
        off += n * dtype.itemsize
        if name.startswith("param/"):
            tensors[name[6:]] = Tensor(arr, requires_grad=True)
        else:
            extra_arrays[name] = arr
    return ModelParams(config, tensors), extra_arrays, header["extra"]
