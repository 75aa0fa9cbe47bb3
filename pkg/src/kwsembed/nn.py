"""Forward/backward kernels for the layer set used by the keyword-spotting CNN.

Activations are numpy arrays laid out (time, freq, channels), optionally with
leading batch dimensions, so ``x[..., t, f, c]``. Kernels keep the dtype of
their inputs: float32 for training, float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

AXES = {"time": -3, "freq": -2}


class ShapeError(ValueError):
    pass


@dataclass
class ConvParams:
    """A 3-tap convolution along one axis.

    ``weight`` has shape (3, in_channels, out_channels); tap k multiplies
    input position i + k - 1 (same padding) or i + k (valid padding).
    """

    axis: str
    weight: np.ndarray
    bias: np.ndarray
    padding: str = "same"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be 'time' or 'freq', got {self.axis!r}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.weight.ndim != 3 or self.weight.shape[0] != 3:
            raise ShapeError(f"conv weight must be (3, cin, cout), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[2],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match cout={self.weight.shape[2]}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[2]


@dataclass
class DenseParams:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def _conv_columns(x: np.ndarray, axis: int, padding: str) -> np.ndarray:
    if padding == "same":
        pad = [(0, 0)] * x.ndim
        pad[axis] = (1, 1)
        x = np.pad(x, pad)
    n = x.shape[axis] - 2
    taps = [_slice(x, axis, k, k + n) for k in range(3)]
    return np.concatenate(taps, axis=-1)


def _slice(x: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)]


def _check_conv_input(x: np.ndarray, p: ConvParams) -> int:
    if x.ndim < 3:
        raise ShapeError(f"conv input must be (..., T, F, C), got shape {x.shape}")
    if x.shape[-1] != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {x.shape[-1]}")
    axis = AXES[p.axis]
    if p.padding == "valid" and x.shape[axis] < 3:
        raise ShapeError(f"valid conv along {p.axis} needs length >= 3, got {x.shape[axis]}")
    return axis


def conv3_forward(x: np.ndarray, p: ConvParams, return_cols: bool = False):
    """3-tap correlation along ``p.axis``. With ``return_cols`` also returns the im2col buffer for backward."""
    axis = _check_conv_input(x, p)
    cols = _conv_columns(x, axis, p.padding)
    w = p.weight.reshape(-1, p.out_channels)
    y = (cols.reshape(-1, w.shape[0]) @ w).reshape(*cols.shape[:-1], p.out_channels)
    y += p.bias
    return (y, cols) if return_cols else y


def conv3_backward(
    x: np.ndarray,
    p: ConvParams,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
):
    """Return (grad_x, grad_weight, grad_bias). ``grad_x`` is None when not requested."""
    axis = _check_conv_input(x, p)
    expected = list(x.shape)
    if p.padding == "valid":
        expected[axis] -= 2
    expected[-1] = p.out_channels
    if tuple(grad_out.shape) != tuple(expected):
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {tuple(expected)}")
    if cols is None:
        cols = _conv_columns(x, axis, p.padding)
    cin, cout = p.in_channels, p.out_channels
    g2 = grad_out.reshape(-1, cout)
    grad_w = (cols.reshape(-1, 3 * cin).T @ g2).reshape(3, cin, cout)
    grad_b = g2.sum(axis=0)
    if not need_input_grad:
        return None, grad_w, grad_b
    gcols = (g2 @ p.weight.reshape(3 * cin, cout).T).reshape(*grad_out.shape[:-1], 3 * cin)
    n = grad_out.shape[axis]
    padded_shape = list(x.shape)
    padded_shape[axis] = n + 2
    gx = np.zeros(padded_shape, dtype=gcols.dtype)
    for k in range(3):
        _slice(gx, axis, k, k + n)[...] += gcols[..., k * cin : (k + 1) * cin]
    if p.padding == "same":
        gx = _slice(gx, axis, 1, n + 1)
    return gx, grad_w, grad_b


@dataclass
class PoolIndex:
    """Argmax bookkeeping from :func:`maxpool_forward`, consumed by :func:`maxpool_backward`."""

    local: np.ndarray  # (..., T', F', C) offset within each pool_t x pool_f window
    input_shape: tuple
    pool_t: int
    pool_f: int


def _windows(x: np.ndarray, pool_t: int, pool_f: int) -> np.ndarray:
    *lead, t, f, c = x.shape
    to, fo = t // pool_t, f // pool_f
    x = x[..., : to * pool_t, : fo * pool_f, :]
    x = x.reshape(*lead, to, pool_t, fo, pool_f, c)
    nl = len(lead)
    # -> (..., T', F', C, pool_t, pool_f)
    perm = list(range(nl)) + [nl, nl + 2, nl + 4, nl + 1, nl + 3]
    return x.transpose(perm).reshape(*lead, to, fo, c, pool_t * pool_f)


def maxpool_forward(x: np.ndarray, pool_t: int, pool_f: int) -> tuple[np.ndarray, PoolIndex]:
    """Non-overlapping max pooling, stride = pool size, trailing remainder dropped.

    Ties resolve to the earliest element of the window (lowest flat index).
    """
    if pool_t < 1 or pool_f < 1:
        raise ValueError(f"pool sizes must be >= 1, got ({pool_t}, {pool_f})")
    if x.ndim < 3:
        raise ShapeError(f"maxpool input must be (..., T, F, C), got shape {x.shape}")
    t, f = x.shape[-3], x.shape[-2]
    if t // pool_t == 0 or f // pool_f == 0:
        raise ShapeError(f"pool ({pool_t}, {pool_f}) on ({t}, {f}) gives an empty output")
    if pool_t == 1 and pool_f == 1:
        local = np.zeros(x.shape, dtype=np.intp)
        return x.copy(), PoolIndex(local, x.shape, 1, 1)
    win = _windows(x, pool_t, pool_f)
    local = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    return y, PoolIndex(local, x.shape, pool_t, pool_f)


def maxpool_backward(index: PoolIndex, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != index.local.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {index.local.shape}")
    pt, pf = index.pool_t, index.pool_f
    if pt == 1 and pf == 1:
        return grad_out.copy()
    *lead, t, f, c = index.input_shape
    to, fo = t // pt, f // pf
    win = np.zeros((*lead, to, fo, c, pt * pf), dtype=grad_out.dtype)
    np.put_along_axis(win, index.local[..., None], grad_out[..., None], axis=-1)
    nl = len(lead)
    win = win.reshape(*lead, to, fo, c, pt, pf)
    # (..., T', F', C, pt, pf) -> (..., T', pt, F', pf, C)
    perm = list(range(nl)) + [nl, nl + 3, nl + 1, nl + 4, nl + 2]
    g = win.transpose(perm).reshape(*lead, to * pt, fo * pf, c)
    if to * pt == t and fo * pf == f:
        return g
    gx = np.zeros(index.input_shape, dtype=grad_out.dtype)
    gx[..., : to * pt, : fo * pf, :] = g
    return gx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass gradient where the forward input was strictly positive."""
    return grad_out * (x > 0)


def dense_forward(v: np.ndarray, p: DenseParams) -> np.ndarray:
    if v.shape[-1] != p.in_dim:
        raise ShapeError(f"dense expects input length {p.in_dim}, got {v.shape[-1]}")
    return v @ p.weight + p.bias


def dense_backward(v: np.ndarray, p: DenseParams, grad_out: np.ndarray):
    """Return (grad_v, grad_weight, grad_bias) for ``out = v @ W + b``."""
    if v.shape[-1] != p.in_dim or grad_out.shape[-1] != p.out_dim:
        raise ShapeError(f"dense backward shapes {v.shape}, {grad_out.shape} do not match {p.weight.shape}")
    v2 = v.reshape(-1, p.in_dim)
    g2 = grad_out.reshape(-1, p.out_dim)
    return grad_out @ p.weight.T, v2.T @ g2, g2.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, label):
    """Cross-entropy of softmax(logits) against integer labels.

    For a single logit vector returns (loss, grad). For a (B, K) batch the loss
    is the batch mean and the gradient is scaled by 1/B accordingly.
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(label))
    k = z.shape[-1]
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"expected {z.shape[0]} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {labels[(labels < 0) | (labels >= k)][0]}")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1
    if single:
        return float(losses[0]), grad[0]
    b = z.shape[0]
    return float(losses.mean()), grad / b


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-3, **kwargs) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), lr=lr, **kwargs)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """Apply one bias-corrected Adam update to the flat ``params`` vector in place."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(
            f"adam length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * (grads * grads)
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    params -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(params.dtype, copy=False)
    return params


def gradient_check(
    loss_and_grads: Callable[..., tuple[float, Sequence[np.ndarray]]],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads(*arrays)`` returns a scalar loss and one gradient per
    array. Every element of every array is perturbed by +-eps in float64;
    relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    _, analytic = loss_and_grads(*arrays)
    worst = 0.0
    for a, g in zip(arrays, analytic):
        flat = a.reshape(-1)
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus, _ = loss_and_grads(*arrays)
            flat[i] = orig - eps
            minus, _ = loss_and_grads(*arrays)
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            err = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
