"""Binary checkpoint format for paired networks (magic "BUTD").

Layout, all integers little-endian:

    magic "BUTD" | version u32 | flags u8 | dtype u8
    input ndim u8, extents u32[ndim] | n_classes u32 | n_tasks u32 (0 = none)
    layer count u32
    per layer: kind u8 (0 dense, 1 conv), geometry u32s
               (dense: out, in; conv: in_ch, out_ch, kh, kw, stride), bias u8
    float arrays in declaration order: layer weights (td weight right after
    its bu partner when untied), bu biases, td biases, output head weight
    [+ bias], task head weight
    optimizer section: kind u8 (0 none, 1 sgd, 2 adam); sgd/adam carry
    base_lr f64, gamma f64, epoch u32; adam adds beta1/beta2/eps f64, t u64
    and the m then v moment arrays over the trainable parameters.

Flag bits: 0 untied, 1 task head present, 2 output-head bias present.
Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .learning import Adam, Sgd
from .network import Conv, Dense, PairedNetwork, build_paired

MAGIC = b"BUTD"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or from an unsupported version."""


def _array_names(net: PairedNetwork) -> list[str]:
    names = []
    for i in range(net.n_levels):
        names.append(f"layer{i}.weight")
        if not net.tied:
            names.append(f"layer{i}.td_weight")
    for i in range(net.n_levels):
        if net.bu_biases[i] is not None:
            names.append(f"layer{i}.bu_bias")
    for i in range(net.n_levels):
        if net.td_biases[i] is not None:
            names.append(f"layer{i}.td_bias")
    names.append("output_head.weight")
    if net.b_out is not None:
        names.append("output_head.bias")
    if net.w_task is not None:
        names.append("task_head.weight")
    return names


def save_checkpoint(path, net: PairedNetwork, opt=None):
    """Write the network (and optionally its optimizer state) to path."""
    fdtype = "<f8" if net.dtype == np.float64 else "<f4"
    flags = (0 if net.tied else 1) | (2 if net.w_task is not None else 0) \
        | (4 if net.b_out is not None else 0)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IBB", VERSION, flags, 0 if net.dtype == np.float64 else 1)
    out += struct.pack("<B", len(net.input_shape))
    out += struct.pack(f"<{len(net.input_shape)}I", *net.input_shape)
    out += struct.pack("<II", net.n_classes, net.n_tasks or 0)
    out += struct.pack("<I", net.n_levels)
    for i, spec in enumerate(net.layers):
        if isinstance(spec, Dense):
            out += struct.pack("<BIIB", 0, net.weights[i].shape[0],
                               net.weights[i].shape[1], int(spec.bias))
        else:
            g = net.geoms[i]
            out += struct.pack("<BIIIIIB", 1, g.in_channels, g.out_channels,
                               g.kernel_h, g.kernel_w, g.stride, int(spec.bias))
    params = net.parameters()
    for name in _array_names(net):
        out += np.ascontiguousarray(params[name], dtype=fdtype).tobytes()

    if opt is None:
        out += struct.pack("<B", 0)
    elif isinstance(opt, Sgd):
        out += struct.pack("<BddI", 1, opt.base_lr, opt.gamma, opt.epoch)
    elif isinstance(opt, Adam):
        out += struct.pack("<BddI", 2, opt.base_lr, opt.gamma, opt.epoch)
        out += struct.pack("<dddQ", opt.beta1, opt.beta2, opt.eps, opt.t)
        trainable = net.trainable_parameters()
        for moments in (opt.m, opt.v):
            for name, p in trainable.items():
                arr = moments.get(name, np.zeros_like(p))
                out += np.ascontiguousarray(arr, dtype=fdtype).tobytes()
    else:
        raise CheckpointError(f"cannot serialize optimizer {type(opt).__name__}")

    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def take_array(self, shape, fdtype):
        n = int(np.prod(shape))
        size = n * np.dtype(fdtype).itemsize
        if self.pos + size > len(self.data):
            raise CheckpointError(f"truncated array at byte {self.pos}")
        arr = np.frombuffer(self.data, dtype=fdtype, count=n, offset=self.pos)
        self.pos += size
        return arr.reshape(shape).copy()


def load_checkpoint(path):
    """Read a checkpoint; returns (net, opt) with opt None when absent."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r.pos = 4
    version, flags, dtype_code = r.take("<IBB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fdtype = "<f8" if dtype_code == 0 else "<f4"
    dtype = np.float64 if dtype_code == 0 else np.float32
    ndim = r.take("<B")
    input_shape = tuple(np.atleast_1d(r.take(f"<{ndim}I")))
    n_classes, n_tasks = r.take("<II")
    n_layers = r.take("<I")

    specs = []
    for _ in range(n_layers):
        kind = r.take("<B")
        if kind == 0:
            out_f, in_f, bias = r.take("<IIB")
            specs.append(Dense(int(out_f), in_features=int(in_f), bias=bool(bias)))
        elif kind == 1:
            in_c, out_c, kh, kw, stride, bias = r.take("<IIIIIB")
            specs.append(Conv(int(out_c), (int(kh), int(kw)), stride=int(stride),
                              in_channels=int(in_c), bias=bool(bias)))
        else:
            raise CheckpointError(f"unknown layer kind {kind}")

    tied = not (flags & 1)
    net = build_paired(specs, input_shape, int(n_classes),
                       n_tasks=int(n_tasks) or None, seed=0, tied=tied,
                       td_init="copy" if not tied else "random",
                       head_bias=bool(flags & 4), dtype=dtype)
    params = net.parameters()
    for name in _array_names(net):
        params[name][...] = r.take_array(params[name].shape, fdtype)

    opt_kind = r.take("<B")
    opt = None
    if opt_kind in (1, 2):
        base_lr, gamma, epoch = r.take("<ddI")
        if opt_kind == 1:
            opt = Sgd(base_lr, gamma)
        else:
            beta1, beta2, eps, t = r.take("<dddQ")
            opt = Adam(base_lr, gamma, beta1, beta2, eps)
            opt.t = int(t)
            trainable = net.trainable_parameters()
            for moments in (opt.m, opt.v):
                for name, p in trainable.items():
                    moments[name] = r.take_array(p.shape, fdtype)
        opt.set_epoch(int(epoch))
    elif opt_kind != 0:
        raise CheckpointError(f"unknown optimizer kind {opt_kind}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return net, opt
