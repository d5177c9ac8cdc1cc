"""Independent correctness references for the learning rules.

Everything here re-derives results the main modules also compute, on purpose
and without sharing their code paths: `backprop` is a textbook reverse-mode
pass written directly against the parameter arrays (its convolution walks
output positions, not kernel offsets like the production kernel does),
`finite_diff` replaces derivatives with central differences, and `prune`
physically deletes masked units from a dense network so gating can be checked
against real structural surgery.  Keeping these routes separate from
`network`/`learning` is what makes an agreement between them evidence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .network import Conv, Dense, PairedNetwork, build_paired
from .ops import ShapeError

REL_FLOOR = 1e-12


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, 1e-12)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


@dataclass
class GradientReport:
    """Per-parameter gradients plus the worst disagreement between two sets."""

    analytic: dict[str, np.ndarray]
    fd: dict[str, np.ndarray] | None = None
    max_rel_error: float = 0.0
    worst_param: str = ""

    @staticmethod
    def compare(a: dict[str, np.ndarray], b: dict[str, np.ndarray],
                atol: float = 0.0) -> tuple[float, str]:
        """Max relative error between two gradient dicts and where it occurs.

        atol subtracts an absolute allowance from the differences before the
        relative division.  Analytic-vs-analytic comparisons use atol 0; a
        finite-difference side needs atol at its roundoff scale
        (eps * |loss| / (2 step), ~1e-11 here), because entries smaller than
        noise/rtol cannot be resolved relatively no matter how exact the
        analytic gradient is.
        """
        worst, where = 0.0, ""
        for key in a:
            diff = np.abs(np.asarray(a[key], dtype=np.float64)
                          - np.asarray(b[key], dtype=np.float64))
            if atol:
                diff = np.maximum(diff - atol, 0.0)
            denom = np.maximum(np.maximum(np.abs(a[key]), np.abs(b[key])), REL_FLOOR)
            err = diff / denom
            m = float(err.max()) if err.size else 0.0
            if m >= worst:
                worst, where = m, key
        return worst, where


# -- independent forward ------------------------------------------------------


def _conv_forward(x, kernels, stride):
    """Cross-correlation by looping output positions (oracle decomposition)."""
    b, c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    out_h = (h - kh) // stride + 1
    out_w = (w - kw) // stride + 1
    out = np.empty((b, c_out, out_h, out_w), dtype=x.dtype)
    for i in range(out_h):
        for j in range(out_w):
            patch = x[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, kernels, axes=([1, 2, 3], [1, 2, 3]))
    return out


def _forward(net: PairedNetwork, x: np.ndarray, mask=None):
    """ReLU forward returning (logits, preactivations, postactivations)."""
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim == len(net.input_shape):
        x = x[None]
    pre: list[np.ndarray | None] = [None]
    post: list[np.ndarray] = [x]
    for i, spec in enumerate(net.layers):
        h_in = post[-1]
        if isinstance(spec, Dense):
            z = h_in.reshape(h_in.shape[0], -1) @ net.weights[i].T
            if net.bu_biases[i] is not None:
                z = z + net.bu_biases[i]
        else:
            z = _conv_forward(h_in, net.weights[i], net.geoms[i].stride)
            if net.bu_biases[i] is not None:
                z = z + net.bu_biases[i][:, None, None]
        h = np.maximum(z, 0.0)
        if mask is not None and mask[i + 1] is not None:
            h = h * mask[i + 1]
        pre.append(z)
        post.append(h)
    logits = post[-1] @ net.w_out.T
    if net.b_out is not None:
        logits = logits + net.b_out
    return logits, pre, post


def loss_value(net: PairedNetwork, x, labels, mask=None) -> float:
    """Mean cross-entropy of the (optionally masked) ReLU forward pass."""
    logits, _, _ = _forward(net, x, mask)
    labels = np.atleast_1d(np.asarray(labels))
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def backprop(net: PairedNetwork, x, labels, mask=None, fd_step=None) -> GradientReport:
    """Reverse-mode gradients of the mean cross-entropy through a ReLU net.

    `mask`, when given, is a per-level list (index 0 unused) of boolean
    gates; masked-off units are treated as deleted (zero activation, zero
    delta), which is the pruned-network gradient.  With `fd_step` set, the
    report also carries central-difference gradients and the worst
    analytic-vs-FD relative error.
    """
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim == len(net.input_shape):
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != x.shape[0]:
        raise ShapeError(f"batch mismatch: {x.shape[0]} inputs, {labels.shape[0]} labels")
    batch = x.shape[0]

    logits, pre, post = _forward(net, x, mask)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    dlogits = p
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch

    grads: dict[str, np.ndarray] = {}
    grads["output_head.weight"] = dlogits.T @ post[-1]
    if net.b_out is not None:
        grads["output_head.bias"] = dlogits.sum(axis=0)

    delta = dlogits @ net.w_out  # (B, hidden_L)
    for i in range(net.n_levels - 1, -1, -1):
        spec = net.layers[i]
        gate = pre[i + 1] > 0
        if mask is not None and mask[i + 1] is not None:
            gate = gate & mask[i + 1]
        if isinstance(spec, Dense):
            delta = delta * gate
            h_in = post[i].reshape(batch, -1)
            grads[f"layer{i}.weight"] = delta.T @ h_in
            if net.bu_biases[i] is not None:
                grads[f"layer{i}.bu_bias"] = delta.sum(axis=0)
            delta = (delta @ net.weights[i]).reshape(post[i].shape)
        else:
            delta = delta.reshape(pre[i + 1].shape) * gate
            s = net.geoms[i].stride
            kh, kw = net.geoms[i].kernel_h, net.geoms[i].kernel_w
            dk = np.zeros_like(net.weights[i])
            dx = np.zeros_like(post[i])
            for oi in range(delta.shape[2]):
                for oj in range(delta.shape[3]):
                    patch = post[i][:, :, oi * s:oi * s + kh, oj * s:oj * s + kw]
                    d = delta[:, :, oi, oj]  # (B, C_out)
                    dk += np.tensordot(d, patch, axes=([0], [0]))
                    dx[:, :, oi * s:oi * s + kh, oj * s:oj * s + kw] += np.tensordot(
                        d, net.weights[i], axes=([1], [0]))
            grads[f"layer{i}.weight"] = dk
            if net.bu_biases[i] is not None:
                grads[f"layer{i}.bu_bias"] = delta.sum(axis=(0, 2, 3))
            delta = dx

    report = GradientReport(analytic=grads)
    if fd_step is not None:
        report.fd = finite_diff(net, x, labels, step=fd_step, mask=mask)
        # allowance ~100x the difference-quotient roundoff for an O(1) loss
        report.max_rel_error, report.worst_param = GradientReport.compare(
            grads, report.fd, atol=1e-9)
    return report


def finite_diff(net: PairedNetwork, x, labels, step=1e-5, mask=None) -> dict[str, np.ndarray]:
    """Central differences of the loss, one parameter entry at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    grads: dict[str, np.ndarray] = {}
    names = [k for k in net.parameters()
             if not k.startswith("task_head") and "td_" not in k]
    for name in names:
        arr = net.parameters()[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_value(net, x, labels, mask)
            flat[idx] = orig - step
            down = loss_value(net, x, labels, mask)
            flat[idx] = orig
            gflat[idx] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def kink_margin(net: PairedNetwork, x, mask=None) -> float:
    """Smallest |preactivation| across hidden levels (0 means a ReLU tie).

    Finite differences are unreliable near the kink; equivalence tests
    resample inputs until this margin is comfortable.
    """
    _, pre, _ = _forward(net, x, mask)
    return min(float(np.abs(z).min()) for z in pre[1:])


# -- structural pruning -------------------------------------------------------


def prune(net: PairedNetwork, masks: list[np.ndarray | None]) -> PairedNetwork:
    """Delete masked-off units from a dense network.

    masks[l] (l = 1..L) is a per-unit boolean keep-vector for hidden level l.
    The returned network's plain ReLU forward equals the original's gated
    (relu_galu) forward under those masks.  Conv layers cannot be cut this
    way (their units share weights); use masked `backprop` for them.
    """
    if any(isinstance(s, Conv) for s in net.layers):
        raise ValueError("prune applies to dense networks only")
    keep = [None]
    for l in range(1, net.n_levels + 1):
        m = np.asarray(masks[l]).reshape(-1).astype(bool)
        if m.shape[0] != net.shapes[l][0]:
            raise ShapeError(f"mask for level {l} has {m.shape[0]} entries, "
                             f"level has {net.shapes[l][0]} units")
        if not m.any():
            warnings.warn(f"level {l} prunes to zero units; the network degenerates "
                          "to a constant output path", stacklevel=2)
        keep.append(m)

    specs = [Dense(int(keep[l + 1].sum()), bias=net.layers[l].bias)
             for l in range(net.n_levels)]
    pruned = build_paired(specs, net.input_shape, net.n_classes, n_tasks=None,
                          seed=0, head_bias=net.b_out is not None, dtype=net.dtype)
    prev = np.ones(int(np.prod(net.input_shape)), dtype=bool)
    for i in range(net.n_levels):
        pruned.weights[i][:] = net.weights[i][np.ix_(keep[i + 1], prev)]
        if net.bu_biases[i] is not None:
            pruned.bu_biases[i][:] = net.bu_biases[i][keep[i + 1]]
            pruned.td_biases[i][:] = net.td_biases[i][keep[i + 1]]
        prev = keep[i + 1]
    pruned.w_out[:] = net.w_out[:, keep[-1]]
    if net.b_out is not None:
        pruned.b_out[:] = net.b_out
    return pruned
