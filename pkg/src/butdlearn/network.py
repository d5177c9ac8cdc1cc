"""Paired bottom-up / top-down networks with tied weights.

A paired network is one stack of linear layers (dense or conv) read in two
directions.  Bottom-up (BU) maps an input x through hidden levels 1..L to
class logits via the output head.  Top-down (TD) runs the same stack through
the transposed/adjoint weights, entered either through the transpose of the
output head (error propagation) or through a separate frozen task head
(task-driven attention).  Level l of one direction pairs one-to-one with
level l of the other ("counter" neurons), which is what gated activations
and the counter-Hebb rule key on.

Activation semantics:

* BU applies the selected activation when producing levels 1..L; the head
  output (logits) is never activated.
* TD applies the selected activation at every level it produces, L down
  to 0, including the value coming out of the head stage.
* "galu" gates a value by the strict sign of its counter neuron:
  galu(v, g) = v * 1{g > 0}.  "relu_galu" composes relu and galu (the
  order is immaterial: both equal v * 1{v > 0} * 1{g > 0}).

Biases: each hidden neuron carries one bias per direction (bu_biases used
bottom-up, td_biases used top-down); the BU output head has its own bias;
the TD terminal output (level 0) has none.  A TD pass in "blocked" bias
mode ignores every td bias.

All passes are batch-first: inputs carry a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ops import ConvGeometry, ShapeError, conv2d, conv2d_transpose, flatten, unflatten

ACTIVATION_MODES = ("linear", "relu", "galu", "relu_galu")
GATED_MODES = ("galu", "relu_galu")


class BuildError(ValueError):
    """Layer specs do not compose into a valid network."""


@dataclass(frozen=True)
class Dense:
    """Fully connected layer spec; input size is inferred unless given."""

    out_features: int
    in_features: int | None = None
    bias: bool = True


@dataclass(frozen=True)
class Conv:
    """2-D convolution layer spec (no padding); channels inferred unless given."""

    out_channels: int
    kernel: int | tuple[int, int]
    stride: int = 1
    in_channels: int | None = None
    bias: bool = True


@dataclass
class PassState:
    """Per-level activations recorded by one directional pass.

    activations[l] is the level-l value (BU: h_l, TD: h_bar_l) for
    l = 0..L, batch-first.  For BU passes `output` holds the logits and
    `masks[l]` the realized gate mask at levels 1..L (masks[0] is None).
    """

    direction: str
    mode: str
    activations: list[np.ndarray]
    head: str | None = None
    output: np.ndarray | None = None
    masks: list[np.ndarray | None] = field(default_factory=list)
    top: np.ndarray | None = None  # TD passes: the raw head input (level L+1)


class PairedNetwork:
    """Tied-weight BU/TD network pair with output and (optional) task heads.

    Built by :func:`build_paired`.  When tied (the default) the TD direction
    reads the very same weight arrays as BU, so the two directions cannot
    drift apart; an untied build keeps a separate `td_weights` list (stored
    in BU orientation, i.e. tying would mean `td_weights[i] is weights[i]`).

    Passes never mutate parameters; a single training loop is the only
    writer, so concurrent forward/TD passes on different inputs are safe.
    """

    def __init__(self, layer_specs, input_shape, n_classes, n_tasks, seed, tied,
                 td_init, head_bias, dtype):
        if len(layer_specs) == 0:
            raise BuildError("a paired network needs at least one layer")
        self.input_shape = tuple(int(e) for e in input_shape)
        self.n_classes = int(n_classes)
        self.n_tasks = None if n_tasks is None else int(n_tasks)
        self.tied = bool(tied)
        self.dtype = np.dtype(dtype)
        self.head_bias = bool(head_bias)

        rng = np.random.default_rng(seed)
        self.layers: list[Dense | Conv] = []
        self.geoms: list[ConvGeometry | None] = []
        # shapes[l]: logical per-sample shape of level l, l = 0..L
        self.shapes: list[tuple[int, ...]] = [self.input_shape]
        self.weights: list[np.ndarray] = []
        self.bu_biases: list[np.ndarray | None] = []
        self.td_biases: list[np.ndarray | None] = []

        for idx, spec in enumerate(layer_specs):
            in_shape = self.shapes[-1]
            if isinstance(spec, Dense):
                in_features = int(np.prod(in_shape))
                if spec.in_features is not None and spec.in_features != in_features:
                    raise BuildError(
                        f"layer {idx}: declared in_features {spec.in_features} != "
                        f"{in_features} produced by the previous level {in_shape}")
                w = self._init_weight(rng, (spec.out_features, in_features), in_features)
                out_shape = (spec.out_features,)
                geom = None
            elif isinstance(spec, Conv):
                if len(in_shape) != 3:
                    raise BuildError(
                        f"layer {idx}: conv needs a (C, H, W) input, previous level "
                        f"is {in_shape}")
                kh, kw = (spec.kernel, spec.kernel) if isinstance(spec.kernel, int) else spec.kernel
                if spec.in_channels is not None and spec.in_channels != in_shape[0]:
                    raise BuildError(
                        f"layer {idx}: declared in_channels {spec.in_channels} != "
                        f"{in_shape[0]} produced by the previous level")
                geom = ConvGeometry(in_shape[0], spec.out_channels, kh, kw, spec.stride)
                try:
                    out_h, out_w = geom.out_extent(in_shape[1], in_shape[2])
                except Exception as exc:
                    raise BuildError(f"layer {idx}: {exc}") from exc
                fan_in = in_shape[0] * kh * kw
                w = self._init_weight(rng, geom.kernel_shape, fan_in)
                out_shape = (spec.out_channels, out_h, out_w)
            else:
                raise BuildError(f"layer {idx}: unknown spec {spec!r}")
            self.layers.append(spec)
            self.geoms.append(geom)
            self.weights.append(w)
            n_units = out_shape[0]  # per-channel bias for conv, per-unit for dense
            if spec.bias:
                self.bu_biases.append(np.zeros(n_units, dtype=self.dtype))
                self.td_biases.append(np.zeros(n_units, dtype=self.dtype))
            else:
                self.bu_biases.append(None)
                self.td_biases.append(None)
            self.shapes.append(out_shape)

        if len(self.shapes[-1]) != 1:
            raise BuildError("the last layer must produce a flat hidden vector "
                             f"(got shape {self.shapes[-1]}); end the stack with Dense")
        hidden = self.shapes[-1][0]
        self.w_out = self._init_weight(rng, (self.n_classes, hidden), hidden)
        self.b_out = np.zeros(self.n_classes, dtype=self.dtype) if head_bias else None
        if self.n_tasks is not None:
            self.w_task = self._init_weight(rng, (hidden, self.n_tasks), self.n_tasks)
        else:
            self.w_task = None

        if tied:
            self.td_weights = None
        elif td_init == "copy":
            self.td_weights = [w.copy() for w in self.weights]
        elif td_init == "random":
            self.td_weights = []
            for i, w in enumerate(self.weights):
                fan_in = w.shape[1] if w.ndim == 2 else int(np.prod(w.shape[1:]))
                self.td_weights.append(self._init_weight(rng, w.shape, fan_in))
        else:
            raise BuildError(f"td_init must be 'copy' or 'random', got {td_init!r}")

    def _init_weight(self, rng, shape, fan_in):
        # fan_in 0 only for degenerate zero-unit levels (pruned-away layers)
        bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 1.0
        return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    # -- parameter access ---------------------------------------------------

    @property
    def n_levels(self) -> int:
        """Number of hidden levels L."""
        return len(self.layers)

    def td_weight(self, i: int) -> np.ndarray:
        """Effective TD weight of layer i, in BU orientation."""
        return self.weights[i] if self.tied else self.td_weights[i]

    def parameters(self) -> dict[str, np.ndarray]:
        """All parameter arrays by name, in declaration order."""
        params: dict[str, np.ndarray] = {}
        for i in range(self.n_levels):
            params[f"layer{i}.weight"] = self.weights[i]
            if not self.tied:
                params[f"layer{i}.td_weight"] = self.td_weights[i]
            if self.bu_biases[i] is not None:
                params[f"layer{i}.bu_bias"] = self.bu_biases[i]
                params[f"layer{i}.td_bias"] = self.td_biases[i]
        params["output_head.weight"] = self.w_out
        if self.b_out is not None:
            params["output_head.bias"] = self.b_out
        if self.w_task is not None:
            params["task_head.weight"] = self.w_task
        return params

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        """Everything except the task head.  The learning rules additionally
        leave td biases at initialization (they never see an error signal)."""
        return {k: v for k, v in self.parameters().items() if not k.startswith("task_head")}

    # -- layer application --------------------------------------------------

    def _apply(self, i: int, h: np.ndarray) -> np.ndarray:
        """BU map of layer i: level i activation -> level i+1 preactivation."""
        spec = self.layers[i]
        if isinstance(spec, Dense):
            z = flatten(h) @ self.weights[i].T
            if self.bu_biases[i] is not None:
                z = z + self.bu_biases[i]
            return z
        z = conv2d(h, self.weights[i], self.geoms[i])
        if self.bu_biases[i] is not None:
            z = z + self.bu_biases[i][:, None, None]
        return z

    def _apply_transpose(self, i: int, v: np.ndarray, blocked: bool) -> np.ndarray:
        """TD map through layer i: level i+1 value -> level i preactivation."""
        spec = self.layers[i]
        w = self.td_weight(i)
        if isinstance(spec, Dense):
            z = v @ w
            z = unflatten(z, self.shapes[i])
        else:
            z = conv2d_transpose(v, w, self.geoms[i], self.shapes[i])
        if i >= 1 and not blocked and self.td_biases[i - 1] is not None:
            bias = self.td_biases[i - 1]
            z = z + (bias if z.ndim == 2 else bias[:, None, None])
        return z

    # -- passes ---------------------------------------------------------------

    def bu_forward(self, x: np.ndarray, mode: str = "relu",
                   gates: PassState | None = None) -> tuple[np.ndarray, PassState]:
        """Run bottom-up from input x (B, *input_shape) to logits.

        Gated modes take `gates`, a TD pass state whose level-l activations
        gate the counter BU neurons at the same level.
        """
        x = np.asarray(x, dtype=self.dtype)
        self._check_mode(mode, gates, expect_direction="td")
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match the network's "
                             f"{self.input_shape} (passes are batch-first)")
        acts: list[np.ndarray] = [x]
        masks: list[np.ndarray | None] = [None]
        for i in range(self.n_levels):
            z = self._apply(i, acts[-1])
            gate = gates.activations[i + 1] if gates is not None else None
            h, mask = _activate(z, mode, gate)
            acts.append(h)
            masks.append(mask)
        y = flatten(acts[-1]) @ self.w_out.T
        if self.b_out is not None:
            y = y + self.b_out
        state = PassState(direction="bu", mode=mode, activations=acts,
                          head="output", output=y, masks=masks)
        return y, state

    def td_pass(self, top: np.ndarray, head: str, mode: str = "relu",
                bias_mode: str = "standard",
                gates: PassState | None = None) -> tuple[np.ndarray, PassState]:
        """Run top-down from `top` through the selected head to level 0.

        head="output" enters through the transpose of the output head
        (top: (B, n_classes), typically an error signal); head="task" enters
        through the frozen task head (top: (B, n_tasks) task vectors).
        bias_mode="blocked" zeroes every td bias contribution.
        """
        top = np.asarray(top, dtype=self.dtype)
        self._check_mode(mode, gates, expect_direction="bu")
        if bias_mode not in ("standard", "blocked"):
            raise ValueError(f"bias_mode must be 'standard' or 'blocked', got {bias_mode!r}")
        blocked = bias_mode == "blocked"
        L = self.n_levels
        if head == "output":
            if top.ndim != 2 or top.shape[1] != self.n_classes:
                raise ShapeError(f"output-head input must be (B, {self.n_classes}), "
                                 f"got {top.shape}")
            z = top @ self.w_out
        elif head == "task":
            if self.w_task is None:
                raise ValueError("this network was built without a task head")
            if top.ndim != 2 or top.shape[1] != self.n_tasks:
                raise ShapeError(f"task-head input must be (B, {self.n_tasks}), "
                                 f"got {top.shape}")
            z = top @ self.w_task.T
        else:
            raise ValueError(f"head must be 'output' or 'task', got {head!r}")
        if not blocked and self.td_biases[L - 1] is not None:
            z = z + self.td_biases[L - 1]

        acts: list[np.ndarray | None] = [None] * (L + 1)
        gate = gates.activations[L] if gates is not None else None
        h, _ = _activate(z, mode, gate)
        acts[L] = h
        for i in range(L - 1, -1, -1):
            z = self._apply_transpose(i, acts[i + 1], blocked)
            gate = gates.activations[i] if gates is not None else None
            h, _ = _activate(z, mode, gate)
            acts[i] = h
        state = PassState(direction="td", mode=mode, activations=acts, head=head,
                          top=top)
        return acts[0], state

    def _check_mode(self, mode, gates, expect_direction):
        if mode not in ACTIVATION_MODES:
            raise ValueError(f"mode must be one of {ACTIVATION_MODES}, got {mode!r}")
        if mode in GATED_MODES:
            if gates is None:
                raise ValueError(f"mode {mode!r} needs a gate pass state from the "
                                 "counter direction")
            if gates.direction != expect_direction:
                raise ValueError(f"gates must come from a {expect_direction!r} pass, "
                                 f"got {gates.direction!r}")


def _activate(z, mode, gate):
    """Apply an activation mode; returns (value, realized strict->0 mask)."""
    if mode == "linear":
        return z, None
    if mode == "relu":
        mask = z > 0
    elif mode == "galu":
        mask = gate > 0
    else:  # relu_galu
        mask = (z > 0) & (gate > 0)
    return z * mask, mask


def extract_mask(state: PassState) -> list[np.ndarray | None]:
    """Strict-positive masks of a TD task pass, one per level (index 0 is None).

    mask[l][...] is True where the level-l TD activation is strictly
    positive; these are the units the task keeps active bottom-up.
    """
    if state.direction != "td" or state.head != "task":
        raise ValueError("extract_mask needs a TD task-pass state, got "
                         f"direction={state.direction!r} head={state.head!r}")
    return [None] + [state.activations[l] > 0 for l in range(1, len(state.activations))]


def build_paired(layer_specs, input_shape, n_classes, n_tasks=None, seed=0,
                 tied=True, td_init="random", head_bias=True,
                 dtype=np.float64) -> PairedNetwork:
    """Construct a paired BU/TD network.

    layer_specs: sequence of :class:`Dense` / :class:`Conv`; sizes must
    compose from `input_shape` (a per-sample shape tuple) and the stack must
    end in a flat hidden vector.  Weights draw from uniform(-1, 1)/sqrt(fan_in)
    under `seed`; biases start at zero; the task head is drawn once and is
    never updated by the learning rules.  tied=True shares one weight store
    between the directions; tied=False duplicates it (`td_init` picks
    "random" fresh draws or an exact "copy").
    """
    specs = list(layer_specs)
    input_shape = (input_shape,) if isinstance(input_shape, int) else tuple(input_shape)
    return PairedNetwork(specs, input_shape, n_classes, n_tasks, seed, tied,
                         td_init, head_bias, dtype)


def benchmark_specs(channels: int = 64, hidden: int = 50) -> list[Dense | Conv]:
    """The two-conv-blocks-plus-dense stack used by the composite-digit runs.

    Each 5x5 conv is followed by a strided 3x3 conv standing in for pooling;
    with a 36x36 input the final feature map is (channels, 5, 5).
    """
    return [
        Conv(channels, 5, stride=1),
        Conv(channels, 3, stride=2),
        Conv(channels, 5, stride=1),
        Conv(channels, 3, stride=2),
        Dense(hidden),
    ]
