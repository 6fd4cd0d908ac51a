"""Trainable layers: embeddings, GRU stacks, feed-forward maps, cross-entropy.

Everything is float64 and built on :mod:`chainrec.autodiff`. Parameters live
in a :class:`ParameterSet` keyed by dotted path names; the binary checkpoint
format is documented on :meth:`ParameterSet.save`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    Tensor, add, clip, concat, log, matmul, mul, sigmoid, stack_rows,
    sub, take_rows, tanh, tsum,
)

__all__ = [
    "ParameterSet",
    "EncoderConfig",
    "VocabularyError",
    "InvalidDistributionError",
    "CheckpointFormatError",
    "uniform_init",
    "build_embedding",
    "build_linear",
    "build_gru",
    "embed",
    "linear",
    "ffn",
    "gru_encode",
    "cross_entropy",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"CHAINCK1"


class VocabularyError(ValueError):
    """A token id falls outside the embedding table."""


class InvalidDistributionError(ValueError):
    """Probabilities passed to a loss are outside [0, 1]."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed or from an unknown format."""


class ParameterSet:
    """Named trainable tensors with fixed shapes.

    Iteration order is insertion order, which also fixes the checkpoint
    layout and the flattening order used by gradient clipping.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter: {k}")
            if self._params[k].data.shape != v.shape:
                raise ValueError(
                    f"shape mismatch for {k}: {self._params[k].data.shape} vs {v.shape}")
            self._params[k].data = np.array(v, dtype=np.float64, copy=True)

    def save(self, path, extra: dict | None = None) -> None:
        """Write a checkpoint.

        Layout: 8-byte magic ``CHAINCK1``; little-endian uint32 manifest
        length; UTF-8 JSON manifest ``{"params": [{"name", "shape",
        "offset"}...], "extra": {...}}`` where offsets index into the
        payload; payload of concatenated row-major little-endian float64
        buffers in manifest order.
        """
        entries = []
        offset = 0
        blobs = []
        for name, t in self._params.items():
            buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(t.data.shape), "offset": offset})
            blobs.append(buf)
            offset += len(buf)
        manifest = json.dumps({"params": entries, "extra": extra or {}},
                              separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(manifest)))
            fh.write(manifest)
            for b in blobs:
                fh.write(b)

    @staticmethod
    def load(path) -> tuple["ParameterSet", dict]:
        """Read a checkpoint written by :meth:`save`; returns (params, extra)."""
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic in {path!r}")
        (mlen,) = struct.unpack("<I", raw[8:12])
        try:
            manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"unreadable manifest in {path!r}: {e}")
        payload = raw[12 + mlen:]
        ps = ParameterSet()
        for ent in manifest["params"]:
            shape = tuple(ent["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = ent["offset"]
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
            ps.add(ent["name"], arr.reshape(shape))
        return ps, manifest.get("extra", {})


@dataclass
class EncoderConfig:
    """Shape of a token encoder: embedding plus stacked (bi)GRU."""
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    num_layers: int = 2
    bidirectional: bool = True

    def __post_init__(self):
        for field in ("vocab_size", "embed_dim", "hidden_dim", "num_layers"):
            v = getattr(self, field)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"EncoderConfig.{field} must be a positive integer, got {v!r}")

    @property
    def out_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_embedding(ps: ParameterSet, name: str, vocab_size: int, dim: int,
                    rng: np.random.Generator) -> None:
    ps.add(name, uniform_init(rng, (vocab_size, dim), dim))


def build_linear(ps: ParameterSet, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator) -> None:
    ps.add(f"{name}.W", uniform_init(rng, (d_in, d_out), d_in))
    ps.add(f"{name}.b", uniform_init(rng, (d_out,), d_in))


_GATE_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wn", "Un", "bn")


def build_gru(ps: ParameterSet, prefix: str, d_in: int, cfg_hidden: int,
              num_layers: int, bidirectional: bool, rng: np.random.Generator) -> None:
    h = cfg_hidden
    directions = ("f", "b") if bidirectional else ("f",)
    layer_in = d_in
    for layer in range(num_layers):
        for d in directions:
            base = f"{prefix}.l{layer}.{d}"
            ps.add(f"{base}.Wz", uniform_init(rng, (layer_in, h), layer_in))
            ps.add(f"{base}.Uz", uniform_init(rng, (h, h), h))
            ps.add(f"{base}.bz", uniform_init(rng, (h,), h))
            ps.add(f"{base}.Wr", uniform_init(rng, (layer_in, h), layer_in))
            ps.add(f"{base}.Ur", uniform_init(rng, (h, h), h))
            ps.add(f"{base}.br", uniform_init(rng, (h,), h))
            ps.add(f"{base}.Wn", uniform_init(rng, (layer_in, h), layer_in))
            ps.add(f"{base}.Un", uniform_init(rng, (h, h), h))
            ps.add(f"{base}.bn", uniform_init(rng, (h,), h))
        layer_in = h * len(directions)


def embed(token_ids: Sequence[int], ps: ParameterSet, name: str) -> Tensor:
    """Look up trainable rows for a token sequence; returns a (T, dim) tensor."""
    table = ps[name]
    vocab = table.data.shape[0]
    ids = list(token_ids)
    for t in ids:
        if not (0 <= int(t) < vocab):
            raise VocabularyError(f"token id {t} outside vocabulary of size {vocab}")
    if not ids:
        return Tensor(np.zeros((0, table.data.shape[1])))
    return take_rows(table, ids)


def linear(x: Tensor, ps: ParameterSet, name: str) -> Tensor:
    """Affine map on the trailing axis: x @ W + b."""
    W, b = ps[f"{name}.W"], ps[f"{name}.b"]
    if x.data.ndim == 1:
        return add(matmul(x.reshape((1, -1)), W), b).reshape(-1)
    return add(matmul(x, W), b)


def ffn(x: Tensor, ps: ParameterSet, name: str) -> Tensor:
    """Single feed-forward layer: tanh(x @ W + b).

    tanh is this artifact's choice of activation, kept in one place so it
    can be swapped wholesale.
    """
    return tanh(linear(x, ps, name))


def _gru_direction(x: Tensor, ps: ParameterSet, base: str, hidden: int,
                   reverse: bool) -> list[Tensor]:
    """Run one GRU direction over a (T, d) tensor; returns per-step (hidden,) vectors.

    Gates: z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    n = tanh(x Wn + (r*h) Un + bn), h' = (1-z)*h + z*n. Initial state is zero.
    """
    T = x.data.shape[0]
    # project the whole sequence through the input weights once
    xz = add(matmul(x, ps[f"{base}.Wz"]), ps[f"{base}.bz"])
    xr = add(matmul(x, ps[f"{base}.Wr"]), ps[f"{base}.br"])
    xn = add(matmul(x, ps[f"{base}.Wn"]), ps[f"{base}.bn"])
    Uz, Ur, Un = ps[f"{base}.Uz"], ps[f"{base}.Ur"], ps[f"{base}.Un"]

    h = Tensor(np.zeros((1, hidden)))
    order = range(T - 1, -1, -1) if reverse else range(T)
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    for t in order:
        z = sigmoid(add(take_rows(xz, [t]), matmul(h, Uz)))
        r = sigmoid(add(take_rows(xr, [t]), matmul(h, Ur)))
        n = tanh(add(take_rows(xn, [t]), matmul(mul(r, h), Un)))
        h = add(mul(sub(1.0, z), h), mul(z, n))
        outs[t] = h.reshape(-1)
    return outs


def gru_encode(x: Tensor, cfg: EncoderConfig, ps: ParameterSet,
               prefix: str = "gru") -> Tensor:
    """Stacked (bi)GRU over a (T, d) sequence; zero initial states.

    Output is (T, hidden_dim) or (T, 2*hidden_dim) with forward and backward
    states concatenated per step; each layer consumes the previous layer's
    full output.
    """
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ValueError(f"gru_encode expects a non-empty (T, d) tensor, got {x.data.shape}")
    cur = x
    for layer in range(cfg.num_layers):
        fwd = _gru_direction(cur, ps, f"{prefix}.l{layer}.f", cfg.hidden_dim, reverse=False)
        if cfg.bidirectional:
            bwd = _gru_direction(cur, ps, f"{prefix}.l{layer}.b", cfg.hidden_dim, reverse=True)
            rows = [concat([f, b]) for f, b in zip(fwd, bwd)]
        else:
            rows = fwd
        cur = stack_rows(rows)
    return cur


def cross_entropy(probs: Tensor, targets: Sequence[bool]) -> Tensor:
    """Mean binary cross-entropy over independently labelled positions.

    Each position carries its own 0/1 label (several may be positive at
    once), so the loss treats every probability as a Bernoulli parameter
    rather than one categorical distribution. Probabilities are clamped to
    [1e-12, 1 - 1e-12] before the logs.
    """
    y = np.asarray(targets, dtype=np.float64)
    if probs.data.ndim != 1 or y.shape != probs.data.shape:
        raise ValueError(
            f"cross_entropy: got probs {probs.data.shape} and targets {y.shape}")
    if y.size == 0:
        raise ValueError("cross_entropy: empty target sequence")
    if (probs.data < -1e-9).any() or (probs.data > 1.0 + 1e-9).any():
        raise InvalidDistributionError(
            f"probabilities outside [0, 1]: min={probs.data.min()}, max={probs.data.max()}")
    p = clip(probs, 1e-12, 1.0 - 1e-12)
    pos = mul(Tensor(y), log(p))
    neg = mul(Tensor(1.0 - y), log(sub(1.0, p)))
    return mul(tsum(add(pos, neg)), -1.0 / y.size)
