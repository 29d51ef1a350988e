"""Finite-difference verification of every hand-written backward pass.

Each entry builds a scalar objective around one op, lets the op's own
backward fill the analytic gradients, and compares them against central
differences of the same objective. For the mining losses the weight maps
(including the OHEM selection) are frozen at the base point, matching the
detached-weight semantics of the losses themselves.
"""

from __future__ import annotations

import numpy as np

from .mining import (
    MiningMode,
    mining_loss,
    ohem_weights,
    pixel_ce,
    w_c_diff,
    w_c_max,
    w_l_norm,
    w_lc_mix,
    weighted_ce,
)
from .numerics import (
    ParamStore,
    avgpool2,
    avgpool2_backward,
    bilinear_resize,
    bilinear_resize_backward,
    conv2d,
    conv2d_backward,
    grad_check,
    make_rng,
    softmax_channel,
    softmax_channel_backward,
)
from .synthdata import IGNORE, PatchLabel


def _conv_kernel_entry(rng, eps):
    x = rng.standard_normal((2, 4, 4))
    upstream = rng.standard_normal((3, 4, 4))
    store = ParamStore()
    store.add("kernel", rng.standard_normal((3, 2, 3, 3)))

    def objective(ps):
        kernel = ps.params["kernel"]
        y = conv2d(x, kernel, stride=1, pad=1)
        _, d_kernel = conv2d_backward(x, kernel, upstream, stride=1, pad=1)
        ps.grads["kernel"] += d_kernel
        return float((y * upstream).sum())

    return grad_check(objective, store, eps)


def _conv_input_entry(rng, eps):
    kernel = rng.standard_normal((3, 2, 3, 3))
    upstream = rng.standard_normal((3, 2, 2))
    store = ParamStore()
    store.add("input", rng.standard_normal((2, 4, 4)))

    def objective(ps):
        x = ps.params["input"]
        y = conv2d(x, kernel, stride=2, pad=1)
        d_x, _ = conv2d_backward(x, kernel, upstream, stride=2, pad=1)
        ps.grads["input"] += d_x
        return float((y * upstream).sum())

    return grad_check(objective, store, eps)


def _resize_entry(rng, eps):
    upstream = rng.standard_normal((2, 7, 5))
    store = ParamStore()
    store.add("input", rng.standard_normal((2, 4, 4)))

    def objective(ps):
        x = ps.params["input"]
        y = bilinear_resize(x, 7, 5)
        ps.grads["input"] += bilinear_resize_backward(4, 4, upstream)
        return float((y * upstream).sum())

    return grad_check(objective, store, eps)


def _avgpool_entry(rng, eps):
    upstream = rng.standard_normal((2, 2, 2))
    store = ParamStore()
    store.add("input", rng.standard_normal((2, 5, 5)))

    def objective(ps):
        x = ps.params["input"]
        y = avgpool2(x)
        ps.grads["input"] += avgpool2_backward(x.shape, upstream)
        return float((y * upstream).sum())

    return grad_check(objective, store, eps)


def _softmax_entry(rng, eps):
    upstream = rng.standard_normal((3, 3, 3))
    store = ParamStore()
    store.add("logits", rng.standard_normal((3, 3, 3)))

    def objective(ps):
        probs = softmax_channel(ps.params["logits"])
        ps.grads["logits"] += softmax_channel_backward(probs, upstream)
        return float((probs * upstream).sum())

    return grad_check(objective, store, eps)


def _mode_entry(rng, eps, mode: MiningMode, ohem_keep: float = 0.5):
    base = rng.standard_normal((2, 4, 4))
    gt = rng.integers(0, 2, size=(4, 4)).astype(np.uint8)
    gt[0, 0] = IGNORE
    label = PatchLabel(presence=np.array([True, True]), n=2)

    if mode is MiningMode.OHEM:
        frozen = ohem_weights(base, gt, ohem_keep)
    elif mode is MiningMode.C_MAX:
        frozen = w_c_max(base)
    elif mode is MiningMode.C_DIFF:
        frozen = w_c_diff(base)
    elif mode is MiningMode.L_NORM:
        frozen = w_l_norm(pixel_ce(base, gt))
    elif mode is MiningMode.LC_MIX:
        frozen = w_lc_mix(pixel_ce(base, gt), base)
    else:
        frozen = np.ones(gt.shape)

    store = ParamStore()
    store.add("logits", base.copy())

    def objective(ps):
        logits = ps.params["logits"]
        loss, _ = weighted_ce(logits, gt, frozen)
        _, analytic = mining_loss(logits, gt, label, mode, ohem_keep)
        ps.grads["logits"] += analytic
        return loss

    return grad_check(objective, store, eps)


def gradient_report(seed: int = 0, eps: float = 1e-5) -> list[tuple[str, float]]:
    """(name, max relative error) per differentiable op; deterministic."""
    rng = make_rng(seed, "gradient-report")
    entries = [
        ("conv2d/kernel", _conv_kernel_entry(rng, eps)),
        ("conv2d/input", _conv_input_entry(rng, eps)),
        ("bilinear_resize/input", _resize_entry(rng, eps)),
        ("avgpool2/input", _avgpool_entry(rng, eps)),
        ("softmax_channel/input", _softmax_entry(rng, eps)),
    ]
    for mode in MiningMode:
        entries.append((f"weighted_ce/{mode.value}", _mode_entry(rng, eps, mode)))
    return entries
