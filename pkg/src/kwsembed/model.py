"""Embedding trunk (5 conv blocks) and head model (time-conv block + classifier).

Each model keeps all of its parameters in one flat vector; the per-layer
weight and bias arrays are views into it. That makes the optimizer state,
checksums, and the on-disk payload a single array.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from kwsembed import nn
from kwsembed.nn import ConvParams, DenseParams, ShapeError

CONTEXT_FRAMES = 198
EMBEDDING_DIM = 96


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    pool: tuple[int, int]
    layers: tuple[str, ...] = ("conv_freq3", "conv_time3", "maxpool", "conv_freq3", "conv_time3")


@dataclass(frozen=True)
class TrunkConfig:
    in_freq: int = 32
    in_channels: int = 1
    channels: tuple[int, ...] = (24, 48, 72, 96, 96)
    pools: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (2, 2), (1, 2), (1, 2))

    def __post_init__(self):
        if len(self.channels) != len(self.pools):
            raise ValueError("channels and pools must have one entry per block")
        f = self.in_freq
        for _, pf in self.pools:
            f //= pf
        if f != 1:
            raise ValueError(f"pool schedule leaves frequency dimension {f}, expected 1")

    @property
    def blocks(self) -> list[BlockSpec]:
        ins = (self.in_channels,) + self.channels[:-1]
        return [BlockSpec(i, o, tuple(p)) for i, o, p in zip(ins, self.channels, self.pools)]

    @property
    def time_stride(self) -> int:
        return int(np.prod([pt for pt, _ in self.pools]))

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def output_frames(self, t: int) -> int:
        for pt, _ in self.pools:
            t //= pt
        return t

    def to_dict(self) -> dict:
        return {
            "in_freq": self.in_freq,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "pools": [list(p) for p in self.pools],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrunkConfig":
        return cls(
            in_freq=int(d["in_freq"]),
            in_channels=int(d["in_channels"]),
            channels=tuple(int(c) for c in d["channels"]),
            pools=tuple((int(a), int(b)) for a, b in d["pools"]),
        )


class _ParamLayout:
    """Allocates named slices of one flat parameter vector."""

    def __init__(self):
        self.shapes: list[tuple[str, tuple[int, ...]]] = []
        self.size = 0

    def add(self, name: str, shape: tuple[int, ...]) -> tuple[int, int]:
        n = int(np.prod(shape))
        start = self.size
        self.shapes.append((name, shape))
        self.size += n
        return start, start + n


def _conv_view(params, span_w, span_b, cin, cout, axis) -> ConvParams:
    w = params[span_w[0] : span_w[1]].reshape(3, cin, cout)
    b = params[span_b[0] : span_b[1]]
    return ConvParams(axis, w, b, "same")


def _he_uniform(rng: np.random.Generator, fan_in: int, size: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size)


class EmbeddingModel:
    """Shared trunk: maps (T, in_freq) feature grids to (T // stride, out_channels) embeddings."""

    kind = "embedding"

    def __init__(self, config: TrunkConfig = TrunkConfig(), params: np.ndarray | None = None, dtype=np.float32):
        self.config = config
        layout = _ParamLayout()
        self._plan = []  # ("conv", name, axis, cin, cout, w_span, b_span) | ("pool", pt, pf)
        for bi, blk in enumerate(config.blocks, start=1):
            cin = blk.in_channels
            suffix = iter("abcdefgh")
            for layer in blk.layers:
                if layer == "maxpool":
                    self._plan.append(("pool", blk.pool[0], blk.pool[1]))
                    continue
                axis = "freq" if layer == "conv_freq3" else "time"
                name = f"block{bi}/{layer}_{next(suffix)}"
                ws = layout.add(name + "/weight", (3, cin, blk.out_channels))
                bs = layout.add(name + "/bias", (blk.out_channels,))
                self._plan.append(("conv", name, axis, cin, blk.out_channels, ws, bs))
                cin = blk.out_channels
        self.layout = layout
        if params is None:
            params = np.zeros(layout.size, dtype=dtype)
        if params.shape != (layout.size,):
            raise ShapeError(f"expected {layout.size} parameters, got {params.shape}")
        self.params = params
        self.convs = [
            _conv_view(params, p[5], p[6], p[3], p[4], p[2]) for p in self._plan if p[0] == "conv"
        ]

    @property
    def layer_names(self) -> list[str]:
        return [p[1] if p[0] == "conv" else f"maxpool{p[1]}x{p[2]}" for p in self._plan]

    def header(self) -> dict:
        return {"kind": self.kind, "trunk": self.config.to_dict(), "layers": self.layer_names}

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """Run the trunk on (..., T, F, C_in) float input; returns (..., T', 1, C_out)."""
        if x.shape[-2] != self.config.in_freq or x.shape[-1] != self.config.in_channels:
            raise ShapeError(
                f"trunk expects (..., T, {self.config.in_freq}, {self.config.in_channels}) input, got {x.shape}"
            )
        if x.shape[-3] < self.config.time_stride:
            raise ShapeError(f"trunk needs at least {self.config.time_stride} frames, got {x.shape[-3]}")
        cache = []
        convs = iter(self.convs)
        for step in self._plan:
            if step[0] == "pool":
                y, idx = nn.maxpool_forward(x, step[1], step[2])
                if keep_cache:
                    cache.append(("pool", idx))
            else:
                p = next(convs)
                pre, cols = nn.conv3_forward(x, p, return_cols=True)
                y = nn.relu(pre)
                if keep_cache:
                    cache.append(("conv", p, x, cols, y))
            x = y
        return (x, cache) if keep_cache else x

    def backward(self, cache, grad_out: np.ndarray, need_input_grad: bool = False):
        """Return (flat parameter gradient, input gradient or None)."""
        grad = np.zeros_like(self.params, dtype=grad_out.dtype)
        g = grad_out
        plan = self._plan
        for i in range(len(cache) - 1, -1, -1):
            entry = cache[i]
            if entry[0] == "pool":
                g = nn.maxpool_backward(entry[1], g)
                continue
            _, p, x, cols, y = entry
            g = nn.relu_backward(y, g)
            first = i == 0
            gx, gw, gb = nn.conv3_backward(x, p, g, cols=cols, need_input_grad=need_input_grad or not first)
            ws, bs = plan[i][5], plan[i][6]
            grad[ws[0] : ws[1]] = gw.reshape(-1)
            grad[bs[0] : bs[1]] = gb
            g = gx
        return grad, g


@dataclass
class HeadModel:
    """Per-task head: two time convolutions, then a max-over-time classifier.

    ``mode="pooled_dense"`` gives one logit vector per context (global max over
    time then dense). ``mode="streaming"`` gives one logit vector per embedding
    step, using a causal max over the last ``stream_window`` steps followed by
    the same weights applied as a 1x1 convolution.
    """

    num_classes: int
    mode: str = "pooled_dense"
    channels: int = EMBEDDING_DIM
    labels: tuple[str, ...] | None = None
    stream_window: int = 24
    params: np.ndarray | None = None
    dtype: type = np.float32
    convs: list = field(init=False, repr=False)
    dense: DenseParams = field(init=False, repr=False)

    kind = "head"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"a head needs at least 2 classes, got {self.num_classes}")
        if self.mode not in ("pooled_dense", "streaming"):
            raise ValueError(f"mode must be 'pooled_dense' or 'streaming', got {self.mode!r}")
        if self.labels is not None:
            self.labels = tuple(self.labels)
            if len(self.labels) != self.num_classes:
                raise ValueError(f"{len(self.labels)} labels given for {self.num_classes} classes")
        c, k = self.channels, self.num_classes
        layout = _ParamLayout()
        spans = [
            (layout.add("conv_time3_a/weight", (3, c, c)), layout.add("conv_time3_a/bias", (c,))),
            (layout.add("conv_time3_b/weight", (3, c, c)), layout.add("conv_time3_b/bias", (c,))),
        ]
        dw = layout.add("dense/weight", (c, k))
        db = layout.add("dense/bias", (k,))
        self.layout = layout
        if self.params is None:
            self.params = np.zeros(layout.size, dtype=self.dtype)
        if self.params.shape != (layout.size,):
            raise ShapeError(f"expected {layout.size} head parameters, got {self.params.shape}")
        p = self.params
        self.convs = [_conv_view(p, ws, bs, c, c, "time") for ws, bs in spans]
        self.dense = DenseParams(p[dw[0] : dw[1]].reshape(c, k), p[db[0] : db[1]])
        self._spans = spans + [(dw, db)]

    @property
    def layer_names(self) -> list[str]:
        return ["conv_time3_a", "conv_time3_b", "maxpool_time", "dense"]

    def conv_block_params(self) -> int:
        return sum(cp.weight.size + cp.bias.size for cp in self.convs)

    def header(self) -> dict:
        h = {
            "kind": self.kind,
            "channels": self.channels,
            "num_classes": self.num_classes,
            "mode": self.mode,
            "stream_window": self.stream_window,
            "layers": self.layer_names,
        }
        if self.labels is not None:
            h["labels"] = list(self.labels)
        return h

    def _check(self, emb: np.ndarray):
        if emb.ndim < 3 or emb.shape[-2] != 1 or emb.shape[-1] != self.channels:
            raise ShapeError(f"head expects (..., T, 1, {self.channels}) embeddings, got {emb.shape}")
        if emb.shape[-3] < 1:
            raise ShapeError("head needs at least one embedding vector")

    def _convs(self, emb, keep_cache):
        cache = []
        x = emb
        for p in self.convs:
            pre, cols = nn.conv3_forward(x, p, return_cols=True)
            y = nn.relu(pre)
            cache.append((p, x, cols, y))
            x = y
        return x, cache

    def forward(self, emb: np.ndarray, keep_cache: bool = False):
        """pooled_dense: (..., T, 1, C) -> (..., K). streaming: (..., T, 1, C) -> (..., T, K)."""
        self._check(emb)
        x, cache = self._convs(emb, keep_cache)
        if self.mode == "streaming":
            if keep_cache:
                raise NotImplementedError("streaming mode is inference-only; train with pooled_dense")
            return nn.dense_forward(_causal_max(x[..., 0, :], self.stream_window), self.dense)
        pooled, idx = nn.maxpool_forward(x, x.shape[-3], 1)
        v = pooled[..., 0, 0, :]
        logits = nn.dense_forward(v, self.dense)
        if keep_cache:
            return logits, (cache, idx, v)
        return logits

    def backward(self, cache, grad_logits: np.ndarray):
        """Return (flat parameter gradient, gradient w.r.t. the input embeddings)."""
        conv_cache, idx, v = cache
        grad = np.zeros_like(self.params, dtype=grad_logits.dtype)
        gv, gw, gb = nn.dense_backward(v, self.dense, grad_logits)
        (dw, db) = self._spans[2]
        grad[dw[0] : dw[1]] = gw.reshape(-1)
        grad[db[0] : db[1]] = gb
        g = nn.maxpool_backward(idx, gv[..., None, None, :])
        for i in (1, 0):
            p, x, cols, y = conv_cache[i]
            g = nn.relu_backward(y, g)
            g, gw, gb = nn.conv3_backward(x, p, g, cols=cols)
            ws, bs = self._spans[i]
            grad[ws[0] : ws[1]] = gw.reshape(-1)
            grad[bs[0] : bs[1]] = gb
        return grad, g


def _causal_max(x: np.ndarray, window: int) -> np.ndarray:
    """Max over the last ``window`` steps (inclusive) along axis -2 of (..., T, C)."""
    pad = [(0, 0)] * x.ndim
    pad[-2] = (window - 1, 0)
    xp = np.pad(x, pad, constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, window, axis=-2)
    return win.max(axis=-1)


def build_embedding(seed: int = 0, config: TrunkConfig = TrunkConfig(), dtype=np.float32) -> EmbeddingModel:
    """He-uniform weights from ``seed``, zero biases."""
    m = EmbeddingModel(config, dtype=dtype)
    rng = np.random.default_rng(seed)
    for p in m.convs:
        p.weight[...] = _he_uniform(rng, 3 * p.in_channels, p.weight.size).reshape(p.weight.shape)
    return m


def build_head(
    num_classes: int,
    mode: str = "pooled_dense",
    seed: int = 0,
    channels: int = EMBEDDING_DIM,
    labels=None,
    dtype=np.float32,
) -> HeadModel:
    h = HeadModel(num_classes, mode=mode, channels=channels, labels=labels, dtype=dtype)
    rng = np.random.default_rng(seed)
    for p in h.convs:
        p.weight[...] = _he_uniform(rng, 3 * p.in_channels, p.weight.size).reshape(p.weight.shape)
    h.dense.weight[...] = _he_uniform(rng, channels, h.dense.weight.size).reshape(h.dense.weight.shape)
    return h


def param_count(model) -> int:
    return int(model.params.size)


def checksum(model) -> str:
    """SHA-256 of the little-endian float32 parameter bytes."""
    return hashlib.sha256(model.params.astype("<f4").tobytes()).hexdigest()


def prepare_input(features: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (..., T, F) feature grids -> (..., T, F, 1) reals in [0, 1]."""
    return (np.asarray(features, dtype=dtype) / dtype(255.0))[..., None]


def forward_embedding(features: np.ndarray, model: EmbeddingModel) -> np.ndarray:
    """Embed a (T, 32) byte grid (or a (N, T, 32) batch) into (..., T // 8, 96) vectors."""
    features = np.asarray(features)
    if features.ndim < 2 or features.shape[-1] != model.config.in_freq:
        raise ShapeError(f"expected (..., T, {model.config.in_freq}) features, got {features.shape}")
    x = prepare_input(features, model.params.dtype.type) if features.dtype == np.uint8 else features[..., None]
    return model.forward(x)[..., 0, :]


def forward_head(emb: np.ndarray, head: HeadModel) -> np.ndarray:
    """Logits from a (T', C) embedding sequence: (K,) pooled or (T', K) streaming."""
    emb = np.asarray(emb)
    if emb.ndim < 2 or emb.shape[-2] < 1:
        raise ValueError("forward_head needs at least one embedding vector")
    return head.forward(emb[..., None, :].astype(head.params.dtype, copy=False))


# --- weights file -----------------------------------------------------------

MAGIC = b"KWSW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def weights_bytes(model) -> bytes:
    header = json.dumps(model.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = model.params.astype("<f4").tobytes()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + payload


def save_weights(model, destination) -> None:
    data = weights_bytes(model)
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        with open(destination, "wb") as fh:
            fh.write(data)


def _read_all(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as fh:
        return fh.read()


def read_header(source) -> dict:
    return _parse(_read_all(source))[0]


def _parse(data: bytes) -> tuple[dict, np.ndarray]:
    if len(data) < 12:
        raise WeightsFormatError(f"file too short for KWSW preamble ({len(data)} bytes) at offset 0")
    if data[:4] != MAGIC:
        raise WeightsFormatError(f"bad magic {data[:4]!r} at offset 0, expected {MAGIC!r}")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise WeightsFormatError(f"unsupported version {version} at offset 4, expected {VERSION}")
    if 12 + header_len > len(data):
        raise WeightsFormatError(f"header length {header_len} at offset 8 runs past end of file")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"unreadable header at offset 12: {exc}") from None
    payload = data[12 + header_len :]
    if len(payload) % 4:
        raise WeightsFormatError(f"payload at offset {12 + header_len} is {len(payload)} bytes, not a multiple of 4")
    return header, np.frombuffer(payload, dtype="<f4")


def load_weights(source, expect_kind: str | None = None, num_classes: int | None = None):
    """Load an EmbeddingModel or HeadModel from a KWSW file, path, or bytes.

    Raises WeightsFormatError on a bad magic, version, header, or payload length,
    and ValueError if ``expect_kind`` or ``num_classes`` disagree with the header.
    """
    header, payload = _parse(_read_all(source))
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"weights file holds a {kind!r} model, expected {expect_kind!r}")
    if kind == "embedding":
        model = EmbeddingModel(TrunkConfig.from_dict(header["trunk"]))
    elif kind == "head":
        k = int(header["num_classes"])
        if num_classes is not None and k != num_classes:
            raise ValueError(f"head file has {k} classes but {num_classes} were requested")
        model = HeadModel(
            k,
            mode=header.get("mode", "pooled_dense"),
            channels=int(header["channels"]),
            labels=header.get("labels"),
            stream_window=int(header.get("stream_window", 24)),
        )
    else:
        raise WeightsFormatError(f"unknown model kind {kind!r} in header")
    if model.header()["layers"] != header.get("layers"):
        raise WeightsFormatError("layer order in header does not match the architecture")
    if payload.size != model.params.size:
        raise WeightsFormatError(
            f"payload holds {payload.size} floats, architecture needs {model.params.size} "
            f"(expected {4 * model.params.size} payload bytes, got {4 * payload.size})"
        )
    model.params[...] = payload
    return model
