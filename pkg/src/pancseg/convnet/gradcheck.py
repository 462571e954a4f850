"""Finite-difference verification of the backward pass.

Everything runs in float64; dropout masks are frozen by reseeding the same
stream for every function evaluation, so the loss stays differentiable in
the parameters.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .network import NetworkSpec, backward, forward, init_params, loss


def _loss_at(spec, params, x, y, rng_seed):
    rng = np.random.default_rng(np.random.SeedSequence((rng_seed, 0xD0)))
    probs = forward(spec, params, x, mode="train", rng=rng)
    return loss(probs, y)


def gradient_check(spec: NetworkSpec, params, x, y, rng_seed: int = 0,
                   h: float = 1e-3) -> float:
    """Max relative error between analytic gradients and central finite
    differences, over every parameter entry."""
    rng = np.random.default_rng(np.random.SeedSequence((rng_seed, 0xD0)))
    grads = backward(spec, params, x, y, rng=rng)
    worst = 0.0
    for p, g in zip(params, grads):
        if p is None:
            continue
        for key in p:
            arr = p[key]
            gd = g[key]
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                up = _loss_at(spec, params, x, y, rng_seed)
                arr[idx] = orig - h
                down = _loss_at(spec, params, x, y, rng_seed)
                arr[idx] = orig
                fd = (up - down) / (2.0 * h)
                an = float(gd[idx])
                err = abs(an - fd) / max(1.0, abs(an), abs(fd))
                worst = max(worst, err)
                it.iternext()
    return worst


def _smoothness_scan(spec, params, batch, rng_seed):
    """Walk the forward pass collecting every decision margin.

    A central difference across a ReLU kink or a pooling argmax flip
    measures the average of two slopes instead of the gradient, so valid
    check instances must keep every such decision away from zero.  Returns
    (relu_sites, pool_margin): relu_sites are (margin, param_layer_index,
    channel, channel_preacts); pool windows whose max is clamped at zero
    are locally constant and therefore safe.
    """
    rng = np.random.default_rng(np.random.SeedSequence((rng_seed, 0xD0)))
    x = np.asarray(batch)
    relu_sites = []
    pool_margin = np.inf
    prev_param_idx = -1
    for i, (layer, p) in enumerate(zip(spec.layers, params)):
        if isinstance(layer, L.Conv):
            x, _ = L.conv_forward(x, p["w"], p["b"], layer.stride, layer.pad)
            prev_param_idx = i
        elif isinstance(layer, L.ReLU):
            if x.ndim == 4:
                per_channel = np.moveaxis(x, 1, 0).reshape(x.shape[1], -1)
            else:
                per_channel = x.T
            for channel in range(per_channel.shape[0]):
                margin = float(np.abs(per_channel[channel]).min())
                relu_sites.append((margin, prev_param_idx, channel,
                                   per_channel[channel].copy()))
            x = np.maximum(x, 0)
        elif isinstance(layer, L.MaxPool):
            n, c, h, w = x.shape
            win, step = layer.window, layer.step
            oh = (h - win) // step + 1
            ow = (w - win) // step + 1
            for oy in range(oh):
                for ox in range(ow):
                    block = x[:, :, oy * step:oy * step + win,
                              ox * step:ox * step + win].reshape(n, c, -1)
                    top2 = np.sort(block, axis=2)[:, :, -2:]
                    gap = top2[:, :, 1] - top2[:, :, 0]
                    gap = np.where(top2[:, :, 1] > 1e-12, gap, np.inf)
                    pool_margin = min(pool_margin, float(gap.min()))
            x, _ = L.maxpool_forward(x, win, step)
        elif isinstance(layer, L.FullyConnected):
            x, _ = L.fc_forward(x, p["w"], p["b"])
            prev_param_idx = i
        elif isinstance(layer, L.Dropout):
            x, _ = L.dropout_forward(x, layer.rate, "train", rng)
    return relu_sites, pool_margin


def _centering_shift(preacts: np.ndarray, limit: float = 0.8):
    """Bias offset that lands zero in the widest gap of a channel's
    preactivation distribution; returns (shift, achieved_margin)."""
    q = np.sort(preacts)
    candidates = [q[0] - limit, q[-1] + limit]
    candidates.extend(0.5 * (q[1:] + q[:-1]))
    best_shift, best_margin = 0.0, -np.inf
    for m in candidates:
        if abs(m) > limit:
            continue
        margin = float(np.abs(q - m).min())
        if margin > best_margin:
            best_margin, best_shift = margin, -m
    if best_margin == -np.inf:  # all gap midpoints outside the limit
        m = float(np.clip(0.5 * (q[0] + q[-1]), -limit, limit))
        return -m, float(np.abs(q - m).min())
    return best_shift, best_margin


def _condition_instance(spec, params, batch, rng_seed, rng,
                        target: float = 0.03):
    """Push the loss into a locally smooth neighborhood: shift each layer's
    biases so no ReLU preactivation sits near its kink, redraw the batch
    when a pooling window carries a near-tie."""
    for _ in range(60):
        ok = True
        for _ in range(40):
            relu_sites, pool_margin = _smoothness_scan(spec, params, batch,
                                                       rng_seed)
            if pool_margin <= target:
                ok = False
                break
            worst = min(relu_sites, key=lambda site: site[0])
            if worst[0] > target:
                break
            _, pidx, channel, preacts = worst
            shift, achieved = _centering_shift(preacts)
            if achieved <= target:
                ok = False
                break
            params[pidx]["b"][channel] += shift
        else:
            ok = False
        if ok:
            return batch
        batch = rng.standard_normal(batch.shape)
    raise RuntimeError("could not build a smooth gradient-check instance")


def random_tiny_spec(seed: int) -> tuple[NetworkSpec, list, np.ndarray,
                                         np.ndarray]:
    """A small randomized architecture + float64 params and batch, sized so
    exhaustive finite differences stay fast.

    Instances are conditioned to be locally smooth (see
    _condition_instance); the dropout stream matches gradient_check's
    convention rng_seed=seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x71)))
    size = int(rng.integers(4, 7))
    c1 = int(rng.integers(2, 4))
    c2 = int(rng.integers(2, 4))
    layers = [L.Conv(c1, 3, 1, 1), L.ReLU()]
    spatial = size
    if rng.random() < 0.5 and spatial >= 4:
        layers.append(L.MaxPool(2))
        spatial = (spatial - 2) // 2 + 1
    layers += [L.Conv(c2, 3, 1, 1), L.ReLU()]
    if rng.random() < 0.5:
        layers.append(L.Dropout(0.25))
    layers += [L.FullyConnected(int(rng.integers(3, 6))), L.ReLU(),
               L.FullyConnected(2), L.Softmax(2)]
    spec = NetworkSpec(layers=tuple(layers), input_shape=(1, size, size))
    params = init_params(spec, seed=seed, dtype=np.float64)
    labels = rng.integers(0, 2, size=2)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    batch = rng.standard_normal((2, 1, size, size))
    batch = _condition_instance(spec, params, batch, seed, rng)
    return spec, params, batch, labels
