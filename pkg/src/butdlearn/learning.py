"""Counter-Hebb learning: the update rule, the training steps that use it,
optimizers, and the feedback-alignment baselines.

The rule itself is local: the change of a weight from neuron a_j to neuron
b_i is a_j * bar(b)_i, the presynaptic BU activation times the TD activation
of the postsynaptic cell's counter neuron.  One identical increment is
applied to the BU weight and to its TD transpose; under tied storage that is
a single write, under untied storage an explicit dual write.

Sign convention: the TD error pass is fed -dL/dY, so the raw counter-Hebb
deltas point downhill.  `CounterHebbDelta.as_gradients()` negates them into
ordinary gradient convention before they reach an optimizer; that way SGD
and Adam serve both this rule and the reference backprop unchanged.

Batches reduce by mean (cross-entropy is mean-reduced), so a step on a batch
of B samples matches backprop of the mean loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Conv, Dense, PairedNetwork, PassState, extract_mask
from .ops import (
    ShapeError,
    conv2d_transpose,
    conv2d_weight_corr,
    flatten,
    softmax_xent_batch,
    unflatten,
)


def counter_hebb(a: np.ndarray, b_bar: np.ndarray) -> np.ndarray:
    """Dense counter-Hebb weight delta: delta[i, j] = a[j] * b_bar[i].

    With batched inputs (B, n_in) and (B, n_out), returns the mean of the
    per-sample outer products.
    """
    a = np.asarray(a)
    b_bar = np.asarray(b_bar)
    if a.ndim == 1 and b_bar.ndim == 1:
        return np.outer(b_bar, a)
    if a.ndim == 2 and b_bar.ndim == 2:
        if a.shape[0] != b_bar.shape[0]:
            raise ShapeError(f"batch sizes differ: {a.shape} vs {b_bar.shape}")
        return b_bar.T @ a / a.shape[0]
    raise ShapeError(f"expected matching vectors or batches, got {a.shape} and {b_bar.shape}")


def counter_hebb_conv(a: np.ndarray, b_bar: np.ndarray, geom) -> np.ndarray:
    """Conv counter-Hebb delta: correlation of input a with counter map b_bar.

    The pairing is the adjoint of conv2d in its kernel argument; batches
    average like the dense rule.
    """
    a = np.asarray(a)
    b_bar = np.asarray(b_bar)
    batch = a.shape[0] if a.ndim == 4 else 1
    return conv2d_weight_corr(a, b_bar, geom) / batch


@dataclass
class CounterHebbDelta:
    """Per-parameter counter-Hebb updates (descent direction), batch-averaged."""

    deltas: dict[str, np.ndarray]
    batch_size: int

    def as_gradients(self) -> dict[str, np.ndarray]:
        """Negate into gradient convention for standard descent optimizers."""
        return {k: -v for k, v in self.deltas.items()}


def collect_deltas(net: PairedNetwork, bu: PassState, td: PassState) -> CounterHebbDelta:
    """Counter-Hebb deltas for the learnable parameters from a BU/TD pass pair.

    Layer i pairs its input (BU level i) with the counter activation of its
    output (TD level i+1); the output head pairs the top hidden level with
    the TD input itself.  BU bias deltas are the counter activations of the
    layer outputs; under untied storage the td weights receive the same
    delta as the bu weights.

    TD biases get no delta.  Like the task head, nothing error-driven ever
    reaches them (gating carries no gradient), and letting them track the
    learned BU biases injects BU-scale drift into the task pass, whose
    signal shrinks with depth; drifted biases then close whole channels of
    every task's gate pattern.  They stay at initialization.
    """
    if bu.direction != "bu" or td.direction != "td":
        raise ValueError("collect_deltas needs one BU state and one TD state")
    if td.top is None:
        raise ValueError("the TD state does not record its head input")
    batch = bu.activations[0].shape[0]
    deltas: dict[str, np.ndarray] = {}
    for i, spec in enumerate(net.layers):
        a = bu.activations[i]
        b_bar = td.activations[i + 1]
        if isinstance(spec, Dense):
            dw = counter_hebb(flatten(a), b_bar)
            db = b_bar.mean(axis=0)
        else:
            dw = counter_hebb_conv(a, b_bar, net.geoms[i])
            db = b_bar.sum(axis=(2, 3)).mean(axis=0)
        deltas[f"layer{i}.weight"] = dw
        if not net.tied:
            deltas[f"layer{i}.td_weight"] = dw
        if net.bu_biases[i] is not None:
            deltas[f"layer{i}.bu_bias"] = db
    deltas["output_head.weight"] = counter_hebb(flatten(bu.activations[-1]), td.top)
    if net.b_out is not None:
        deltas["output_head.bias"] = td.top.mean(axis=0)
    return CounterHebbDelta(deltas=deltas, batch_size=batch)


@dataclass
class StepResult:
    loss: float
    logits: np.ndarray
    predictions: np.ndarray
    delta: CounterHebbDelta
    gates: PassState | None = None

    @property
    def masks(self):
        return None if self.gates is None else extract_mask(self.gates)


def single_task_deltas(net: PairedNetwork, x, labels) -> StepResult:
    """One ReLU forward + bias-blocked GaLU error pass; no parameter update."""
    labels = np.asarray(labels)
    logits, bu = net.bu_forward(x, mode="relu")
    loss, grad = softmax_xent_batch(logits, labels)
    _, td = net.td_pass(-grad, head="output", mode="galu", bias_mode="blocked",
                        gates=bu)
    delta = collect_deltas(net, bu, td)
    return StepResult(loss=loss, logits=logits, predictions=logits.argmax(axis=1),
                      delta=delta)


def single_task_step(net: PairedNetwork, x, labels, opt) -> StepResult:
    """Counter-Hebb training step: forward, error pass, update everything.

    Both directions' parameters move together (one write when tied, a dual
    write when untied).  Pass opt=None to evaluate the deltas without
    updating.
    """
    result = single_task_deltas(net, x, labels)
    if opt is not None:
        opt.step(net.trainable_parameters(), result.delta.as_gradients())
    return result


def multi_task_deltas(net: PairedNetwork, x, tasks, labels) -> StepResult:
    """Task-conditioned step: TD task pass selects a sub-network, the gated
    BU pass predicts, the TD error pass assigns credit; no update."""
    tasks = np.asarray(tasks)
    labels = np.asarray(labels)
    if net.w_task is None:
        raise ValueError("multi-task steps need a network with a task head")
    onehot = np.zeros((len(tasks), net.n_tasks), dtype=net.dtype)
    onehot[np.arange(len(tasks)), tasks] = 1.0
    _, gates = net.td_pass(onehot, head="task", mode="relu", bias_mode="standard")
    logits, bu = net.bu_forward(x, mode="relu_galu", gates=gates)
    loss, grad = softmax_xent_batch(logits, labels)
    _, td = net.td_pass(-grad, head="output", mode="galu", bias_mode="blocked",
                        gates=bu)
    delta = collect_deltas(net, bu, td)
    return StepResult(loss=loss, logits=logits, predictions=logits.argmax(axis=1),
                      delta=delta, gates=gates)


def multi_task_step(net: PairedNetwork, x, tasks, labels, opt) -> StepResult:
    """Counter-Hebb multi-task step; updates everything except the task head."""
    result = multi_task_deltas(net, x, tasks, labels)
    if opt is not None:
        opt.step(net.trainable_parameters(), result.delta.as_gradients())
    return result


# -- optimizers ----------------------------------------------------------------


class Sgd:
    """Plain gradient descent with an exponential per-epoch lr schedule."""

    def __init__(self, lr: float, gamma: float = 1.0):
        self.base_lr = float(lr)
        self.gamma = float(gamma)
        self.epoch = 0

    @property
    def lr(self) -> float:
        return self.base_lr * self.gamma ** self.epoch

    def set_epoch(self, epoch: int):
        self.epoch = int(epoch)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        lr = self.lr
        for name, g in grads.items():
            params[name] -= lr * g


class Adam:
    """Adam with bias correction and an exponential per-epoch lr schedule.

    Moments live per parameter name and are lazily allocated; they are not
    reset when the schedule steps.
    """

    def __init__(self, lr: float, gamma: float = 1.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.base_lr = float(lr)
        self.gamma = float(gamma)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.epoch = 0
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @property
    def lr(self) -> float:
        return self.base_lr * self.gamma ** self.epoch

    def set_epoch(self, epoch: int):
        self.epoch = int(epoch)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        lr = self.lr
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float, gamma: float = 1.0):
    if kind == "sgd":
        return Sgd(lr, gamma)
    if kind == "adam":
        return Adam(lr, gamma)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adam')")


# -- weight mirroring / alignment ------------------------------------------------


def kolen_pollack_decay(net: PairedNetwork, lam: float, lr: float):
    """Scale BU and TD layer weights by (1 - lr*lam), in place.

    Applied once per step together with the shared counter-Hebb delta, this
    contracts the BU/TD asymmetry geometrically: the identical increments
    cancel in the difference and the decay shrinks what remains.
    """
    if net.tied:
        raise ValueError("decay toward symmetry needs an untied network "
                         "(tied weights are symmetric by construction)")
    factor = 1.0 - lr * lam
    for i in range(net.n_levels):
        net.weights[i] *= factor
        net.td_weights[i] *= factor


def asymmetry_norms(net: PairedNetwork) -> list[float]:
    """Frobenius norm of W - W_td per layer (td stored in BU orientation)."""
    return [float(np.linalg.norm(net.weights[i] - net.td_weight(i)))
            for i in range(net.n_levels)]


def alignment_cosines(net: PairedNetwork) -> list[float]:
    """Cosine similarity between each layer's BU and TD weights."""
    out = []
    for i in range(net.n_levels):
        w, wt = net.weights[i].reshape(-1), net.td_weight(i).reshape(-1)
        denom = np.linalg.norm(w) * np.linalg.norm(wt)
        out.append(float(w @ wt / denom) if denom > 0 else 1.0)
    return out


# -- feedback-alignment baselines -------------------------------------------------


@dataclass
class FaBackwardConfig:
    """Fixed random feedback tensors for the alignment baselines.

    mode "fa": one tensor per backward edge, shaped like the forward weight
    it replaces ("head" plus "layer1".."layer{L-1}").  mode "dfa": one dense
    map per hidden level, projecting the output error straight to that level
    ("level1".."level{L}").
    """

    mode: str
    matrices: dict[str, np.ndarray] = field(default_factory=dict)


def make_fa_config(net: PairedNetwork, mode: str, seed: int = 0) -> FaBackwardConfig:
    if mode not in ("fa", "dfa"):
        raise ValueError(f"mode must be 'fa' or 'dfa', got {mode!r}")
    rng = np.random.default_rng(seed)
    mats: dict[str, np.ndarray] = {}
    if mode == "fa":
        mats["head"] = rng.normal(size=net.w_out.shape).astype(net.dtype) \
            / np.sqrt(net.w_out.shape[1])
        for i in range(1, net.n_levels):
            w = net.weights[i]
            fan = w.shape[1] if w.ndim == 2 else int(np.prod(w.shape[1:]))
            mats[f"layer{i}"] = rng.normal(size=w.shape).astype(net.dtype) / np.sqrt(fan)
    else:
        for l in range(1, net.n_levels + 1):
            size = int(np.prod(net.shapes[l]))
            mats[f"level{l}"] = rng.normal(size=(net.n_classes, size)).astype(net.dtype) \
                / np.sqrt(net.n_classes)
    return FaBackwardConfig(mode=mode, matrices=mats)


def fa_backward(net: PairedNetwork, cfg: FaBackwardConfig, grad_out: np.ndarray,
                bu: PassState) -> list[np.ndarray | None]:
    """Hidden-level error signals using fixed random feedback weights.

    Returns deltas[l] for levels 1..L (index 0 is None).  "fa" chains the
    error through one random tensor per edge; "dfa" projects the output
    error directly to every hidden level.  Either way the ReLU derivative
    is taken from the BU pass (1 where the post-activation is positive).
    """
    grad_out = np.asarray(grad_out)
    L = net.n_levels
    deltas: list[np.ndarray | None] = [None] * (L + 1)
    if cfg.mode == "dfa":
        for l in range(1, L + 1):
            d = grad_out @ cfg.matrices[f"level{l}"]
            d = unflatten(d, net.shapes[l])
            deltas[l] = d * (bu.activations[l] > 0)
        return deltas
    d = grad_out @ cfg.matrices["head"]
    deltas[L] = d * (bu.activations[L] > 0)
    for i in range(L - 1, 0, -1):
        b = cfg.matrices[f"layer{i}"]
        spec = net.layers[i]
        if isinstance(spec, Dense):
            d = deltas[i + 1] @ b
            d = unflatten(d, net.shapes[i])
        else:
            d = conv2d_transpose(deltas[i + 1], b, net.geoms[i], net.shapes[i])
        deltas[i] = d * (bu.activations[i] > 0)
    return deltas


def fa_step(net: PairedNetwork, x, labels, opt, cfg: FaBackwardConfig) -> StepResult:
    """Baseline training step: ReLU forward, FA/DFA backward, usual update.

    The feedback tensors in cfg stay fixed; only forward parameters move.
    """
    labels = np.asarray(labels)
    logits, bu = net.bu_forward(x, mode="relu")
    loss, grad = softmax_xent_batch(logits, labels)
    batch = x.shape[0]
    deltas = fa_backward(net, cfg, grad, bu)
    grads: dict[str, np.ndarray] = {
        "output_head.weight": grad.T @ flatten(bu.activations[-1]) / batch}
    if net.b_out is not None:
        grads["output_head.bias"] = grad.mean(axis=0)
    for i, spec in enumerate(net.layers):
        d = deltas[i + 1]
        if isinstance(spec, Dense):
            grads[f"layer{i}.weight"] = counter_hebb(flatten(bu.activations[i]), d)
            if net.bu_biases[i] is not None:
                grads[f"layer{i}.bu_bias"] = d.mean(axis=0)
        else:
            grads[f"layer{i}.weight"] = counter_hebb_conv(bu.activations[i], d,
                                                          net.geoms[i])
            if net.bu_biases[i] is not None:
                grads[f"layer{i}.bu_bias"] = d.sum(axis=(2, 3)).mean(axis=0)
        if not net.tied:
            grads[f"layer{i}.td_weight"] = grads[f"layer{i}.weight"]
    if opt is not None:
        opt.step(net.trainable_parameters(), grads)
    return StepResult(loss=loss, logits=logits, predictions=logits.argmax(axis=1),
                      delta=CounterHebbDelta({k: -v for k, v in grads.items()}, batch))
