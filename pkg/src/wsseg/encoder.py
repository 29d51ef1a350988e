"""Three-stage convolutional encoder shared by the micro networks.

Each stage is conv3x3 (pad 1) -> ReLU -> 2x average pool, with channel
widths (8, 16, 32), so stage i runs at 1/2^i of the input resolution.
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    ParamStore,
    avgpool2,
    avgpool2_backward,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
)

WIDTHS = (8, 16, 32)
MIN_INPUT = 8  # three 2x pools need at least 8 px per side


class Encoder:
    def __init__(self, store: ParamStore, in_channels: int, rng: np.random.Generator):
        self.store = store
        self.in_channels = in_channels
        fan_ins = (in_channels,) + WIDTHS[:-1]
        for i, (cin, cout) in enumerate(zip(fan_ins, WIDTHS), start=1):
            scale = np.sqrt(2.0 / (cin * 9))
            store.add(f"enc.conv{i}", rng.standard_normal((cout, cin, 3, 3)) * scale)
            store.add(f"enc.bias{i}", np.zeros(cout))

    def forward(self, x: np.ndarray):
        """Return the three pooled stage outputs plus a backward cache."""
        if x.shape[0] != self.in_channels:
            raise ValueError(
                f"channel mismatch: got {x.shape[0]}, expected {self.in_channels}"
            )
        if min(x.shape[1], x.shape[2]) < MIN_INPUT:
            raise ValueError(f"input extents must be >= {MIN_INPUT}")
        cache = {"inputs": [], "pre": [], "act": []}
        stages = []
        cur = x
        for i in range(1, 4):
            kernel = self.store.params[f"enc.conv{i}"]
            bias = self.store.params[f"enc.bias{i}"]
            pre = conv2d(cur, kernel, stride=1, pad=1) + bias[:, None, None]
            act = relu(pre)
            pooled = avgpool2(act)
            cache["inputs"].append(cur)
            cache["pre"].append(pre)
            cache["act"].append(act)
            stages.append(pooled)
            cur = pooled
        return stages, cache

    def backward(self, cache, d_stages) -> np.ndarray:
        """Accumulate parameter grads given grads on the three stage outputs;
        returns the grad w.r.t. the encoder input."""
        carry = None
        for i in range(3, 0, -1):
            d_pool = d_stages[i - 1]
            if carry is not None:
                d_pool = d_pool + carry
            act = cache["act"][i - 1]
            d_act = avgpool2_backward(act.shape, d_pool)
            d_pre = relu_backward(cache["pre"][i - 1], d_act)
            kernel = self.store.params[f"enc.conv{i}"]
            d_in, d_kernel = conv2d_backward(
                cache["inputs"][i - 1], kernel, d_pre, stride=1, pad=1
            )
            self.store.accumulate(f"enc.conv{i}", d_kernel)
            self.store.accumulate(f"enc.bias{i}", d_pre.sum(axis=(1, 2)))
            carry = d_in
        return carry
