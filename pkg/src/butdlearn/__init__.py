"""Symmetric bottom-up/top-down networks with counter-Hebb learning.

One top-down pass serves two jobs: propagating error signals for learning
(equivalent to backprop when the directions share weights) and propagating a
task signal that gates the bottom-up computation onto a task-specific
sub-network.  The package provides the numerical kernel, the paired network,
the learning rules with independent oracles, a composite-digit benchmark
pipeline, a CLI, and a scikit-learn estimator.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import MnistSet, MultiMnistSet, load_idx, make_multi_mnist
from .estimator import CounterHebbClassifier
from .learning import (
    Adam,
    CounterHebbDelta,
    Sgd,
    counter_hebb,
    counter_hebb_conv,
    fa_backward,
    kolen_pollack_decay,
    make_fa_config,
    multi_task_step,
    single_task_step,
)
from .network import (
    Conv,
    Dense,
    PairedNetwork,
    PassState,
    benchmark_specs,
    build_paired,
    extract_mask,
)
from .ops import ConvGeometry, conv2d, conv2d_transpose, matmul, softmax_xent

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Conv",
    "ConvGeometry",
    "CounterHebbClassifier",
    "CounterHebbDelta",
    "Dense",
    "MnistSet",
    "MultiMnistSet",
    "PairedNetwork",
    "PassState",
    "RunConfig",
    "Sgd",
    "benchmark_specs",
    "build_paired",
    "conv2d",
    "conv2d_transpose",
    "counter_hebb",
    "counter_hebb_conv",
    "extract_mask",
    "fa_backward",
    "kolen_pollack_decay",
    "load_checkpoint",
    "load_idx",
    "make_fa_config",
    "make_multi_mnist",
    "matmul",
    "multi_task_step",
    "save_checkpoint",
    "single_task_step",
    "softmax_xent",
]
