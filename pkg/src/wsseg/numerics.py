"""Deterministic float64 array ops with hand-written backward passes.

Conventions used across the package:

- feature maps and images are ``C x H x W`` float64 arrays in row-major order
- bilinear resizing follows the align-corners-false convention: output
  index ``j`` samples source coordinate ``(j + 0.5) * in/out - 0.5``,
  clamped to the valid range, so a constant map stays constant
- randomness comes from numpy's counter-based Philox generator; a root
  seed plus a path of string labels derives independent streams through
  SHA-256, so every stage of a run owns its own reproducible substream
- convolution is direct cross-correlation, no FFT or im2col

Everything is pure: the same inputs give bit-identical outputs.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericError(RuntimeError):
    """A computation produced non-finite values or failed a numeric gate."""


# ---------------------------------------------------------------------------
# seeded randomness


def derive_seed(seed: int, *labels) -> int:
    """Derive a 64-bit stream seed from a root seed and a label path."""
    text = ":".join([str(int(seed))] + [str(part) for part in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Philox stream for (seed, labels); equal arguments give equal streams."""
    key = derive_seed(seed, *labels) if labels else int(seed)
    return np.random.Generator(np.random.Philox(key=key))


def rng_snapshot(gen: np.random.Generator) -> tuple:
    """Hashable (key, counter, buffer) snapshot of a Philox stream."""
    state = gen.bit_generator.state
    inner = state["state"]
    return (
        tuple(int(v) for v in inner["key"]),
        tuple(int(v) for v in inner["counter"]),
        int(state["buffer_pos"]),
        tuple(int(v) for v in state["buffer"]),
        int(state["has_uint32"]),
        int(state["uinteger"]),
    )


def rng_restore(snapshot: tuple) -> np.random.Generator:
    """Rebuild a Philox stream from an ``rng_snapshot`` tuple."""
    key, counter, buffer_pos, buffer, has_uint32, uinteger = snapshot
    bitgen = np.random.Philox(key=0)
    bitgen.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(counter, dtype=np.uint64),
            "key": np.array(key, dtype=np.uint64),
        },
        "buffer": np.array(buffer, dtype=np.uint64),
        "buffer_pos": buffer_pos,
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }
    return np.random.Generator(bitgen)


# ---------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Named float64 parameter tensors with parallel gradient tensors."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.velocities: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.velocities[name] = np.zeros_like(arr)
        return arr

    def zero_grads(self) -> None:
        for grad in self.grads.values():
            grad[...] = 0.0

    def accumulate(self, name: str, grad) -> None:
        if self.grads[name].shape != np.shape(grad):
            raise ValueError(
                f"gradient shape {np.shape(grad)} does not match parameter "
                f"{name!r} of shape {self.grads[name].shape}"
            )
        self.grads[name] += grad

    def sgd_step(self, lr: float, momentum: float = 0.0) -> None:
        for name, value in self.params.items():
            vel = self.velocities[name]
            vel *= momentum
            vel += self.grads[name]
            value -= lr * vel

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, value in self.params.items():
            dup.add(name, value.copy())
            dup.grads[name][...] = self.grads[name]
            dup.velocities[name][...] = self.velocities[name]
        return dup

    def names(self) -> list[str]:
        return list(self.params)

    def size(self) -> int:
        return sum(v.size for v in self.params.values())

    def allclose(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.params[n], other.params[n]) for n in self.params
        )


# ---------------------------------------------------------------------------
# softmax family


def softmax_channel(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 (the category dimension), max-shifted for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty input")
    shifted = logits - logits.max(axis=0, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=0, keepdims=True)


def log_softmax_channel(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty input")
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def softmax_channel_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of a scalar through softmax_channel, given its output."""
    inner = (grad_out * probs).sum(axis=0, keepdims=True)
    return probs * (grad_out - inner)


def softmax_flat(values: np.ndarray) -> np.ndarray:
    """Softmax over every element jointly; output has the input's shape."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty input")
    shifted = values - values.max()
    expd = np.exp(shifted)
    return expd / expd.sum()


# ---------------------------------------------------------------------------
# convolution


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if kh > x.shape[1] or kw > x.shape[2]:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[1]}x{x.shape[2]}"
        )
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return x, win[:, ::stride, ::stride]


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (Cin,H,W) with ``kernel`` (Cout,Cin,kh,kw).

    Output extent per axis is ``floor((in + 2*pad - k)/stride) + 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError("conv2d expects a CHW input and an OIHW kernel")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if kernel.shape[1] != x.shape[0]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[0]}, kernel expects {kernel.shape[1]}"
        )
    _, win = _conv_windows(x, kernel.shape[2], kernel.shape[3], stride, pad)
    return np.einsum("ocuv,cijuv->oij", kernel, win)


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input and kernel for an upstream grad."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    kh, kw = kernel.shape[2], kernel.shape[3]
    padded, win = _conv_windows(x, kh, kw, stride, pad)
    out_h, out_w = grad_out.shape[1], grad_out.shape[2]

    grad_kernel = np.einsum("oij,cijuv->ocuv", grad_out, win)

    grad_padded = np.zeros_like(padded)
    for u in range(kh):
        for v in range(kw):
            contrib = np.einsum("oij,oc->cij", grad_out, kernel[:, :, u, v])
            grad_padded[
                :,
                u : u + stride * out_h : stride,
                v : v + stride * out_w : stride,
            ] += contrib
    if pad:
        grad_x = grad_padded[:, pad:-pad, pad:-pad]
    else:
        grad_x = grad_padded
    return grad_x, grad_kernel


# ---------------------------------------------------------------------------
# bilinear resize


def _axis_coords(n_in: int, n_out: int):
    idx = np.arange(n_out, dtype=np.float64)
    src = np.clip((idx + 0.5) * (n_in / n_out) - 0.5, 0.0, float(n_in - 1))
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    lo, hi, frac = _axis_coords(n_in, n_out)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a CHW map to (out_h, out_w), align-corners-false convention."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("bilinear_resize expects a CHW input")
    if out_h < 1 or out_w < 1:
        raise ValueError("target extents must be >= 1")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    r0, r1, rf = _axis_coords(h, out_h)
    rows = x[:, r0, :] * (1.0 - rf)[None, :, None] + x[:, r1, :] * rf[None, :, None]
    c0, c1, cf = _axis_coords(w, out_w)
    return rows[:, :, c0] * (1.0 - cf) + rows[:, :, c1] * cf


def bilinear_resize_backward(in_h: int, in_w: int, grad_out: np.ndarray) -> np.ndarray:
    """Transpose of the resize map: scatter an upstream CHW grad back."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    out_h, out_w = grad_out.shape[1], grad_out.shape[2]
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    mh = _resize_matrix(in_h, out_h)
    mw = _resize_matrix(in_w, out_w)
    rows = np.einsum("oh,cop->chp", mh, grad_out)
    return np.einsum("pw,chp->chw", mw, rows)


# ---------------------------------------------------------------------------
# pooling and activation


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2; trailing odd row/col is dropped."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError("avgpool2 needs extents >= 2")
    h2, w2 = h // 2, w // 2
    blocks = x[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2)
    return blocks.mean(axis=(2, 4))


def avgpool2_backward(in_shape: tuple, grad_out: np.ndarray) -> np.ndarray:
    c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    grad_x = np.zeros(in_shape)
    spread = np.repeat(np.repeat(grad_out, 2, axis=1), 2, axis=2) * 0.25
    grad_x[:, : 2 * h2, : 2 * w2] = spread
    return grad_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0.0)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params: ParamStore, eps: float = 1e-5) -> float:
    """Max relative error between f's analytic gradients and central differences.

    ``f(params)`` must return a scalar loss and accumulate analytic gradients
    into ``params.grads``. Error per entry is |analytic - fd| / max(1, |fd|);
    a store with no parameters returns 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.zero_grads()
    base = float(f(params))
    if not math.isfinite(base):
        raise NumericError(f"non-finite loss {base!r} during gradient check")
    analytic = {name: grad.copy() for name, grad in params.grads.items()}

    worst = 0.0
    for name, value in params.params.items():
        flat = value.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = float(f(params))
            flat[idx] = orig - eps
            lo = float(f(params))
            flat[idx] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NumericError("non-finite loss during gradient check probe")
            fd = (hi - lo) / (2.0 * eps)
            err = abs(grad_flat[idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
