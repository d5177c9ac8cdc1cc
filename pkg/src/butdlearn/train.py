"""Training harness: dataset resolution, the epoch loop for every mode,
evaluation, and the grad/alignment check suites behind the CLI.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    DataError,
    MultiMnistSet,
    batches,
    load_mm36,
    load_mnist_dir,
    make_multi_mnist,
)
from .learning import (
    fa_step,
    kolen_pollack_decay,
    make_fa_config,
    make_optimizer,
    multi_task_deltas,
    multi_task_step,
    single_task_deltas,
    single_task_step,
)
from .network import benchmark_specs, build_paired
from .ops import softmax_xent_batch
from .reference import GradientReport, backprop

N_CLASSES = 10
N_TASKS = 2


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss."""


class CheckFailure(RuntimeError):
    """A verification suite did not meet its tolerance."""


@dataclass
class MetricsRecord:
    """One epoch of metrics; test fields are None off the eval cadence."""

    epoch: int
    train_acc: list[float] | None
    train_loss: list[float] | None
    test_acc: list[float] | None
    test_loss: list[float] | None
    avg_train_acc: float | None
    avg_test_acc: float | None
    seconds: float
    lr: float

    def to_dict(self):
        return asdict(self)


def resolve_datasets(cfg: RunConfig) -> tuple[MultiMnistSet, MultiMnistSet]:
    """Load composite datasets from cfg.data.

    Prefers prepared train.mm36/test.mm36 caches; otherwise reads the MNIST
    IDX pairs from the directory and synthesizes the composites with
    cfg.seed / cfg.n_train / cfg.n_test.
    """
    d = Path(cfg.data)
    train_cache, test_cache = d / "train.mm36", d / "test.mm36"
    if train_cache.exists() and test_cache.exists():
        train, test = load_mm36(train_cache), load_mm36(test_cache)
        if cfg.n_train > len(train) or cfg.n_test > len(test):
            raise DataError(f"caches under {d} hold {len(train)}/{len(test)} samples, "
                            f"config asks for {cfg.n_train}/{cfg.n_test}")
        train.images = train.images[:cfg.n_train]
        train.left_labels = train.left_labels[:cfg.n_train]
        train.right_labels = train.right_labels[:cfg.n_train]
        test.images = test.images[:cfg.n_test]
        test.left_labels = test.left_labels[:cfg.n_test]
        test.right_labels = test.right_labels[:cfg.n_test]
        return train, test
    sources_train = load_mnist_dir(d, "train")
    sources_test = load_mnist_dir(d, "test")
    return make_multi_mnist(sources_train, sources_test, seed=cfg.seed,
                            n_train=cfg.n_train, n_test=cfg.n_test)


def resolve_test_set(cfg: RunConfig) -> MultiMnistSet:
    """Load just the test composites (cache if present, else synthesized)."""
    cache = Path(cfg.data) / "test.mm36"
    if cache.exists():
        test = load_mm36(cache)
        if cfg.n_test > len(test):
            raise DataError(f"{cache} holds {len(test)} samples, "
                            f"config asks for {cfg.n_test}")
        test.images = test.images[:cfg.n_test]
        test.left_labels = test.left_labels[:cfg.n_test]
        test.right_labels = test.right_labels[:cfg.n_test]
        return test
    sources_train = load_mnist_dir(cfg.data, "train")
    sources_test = load_mnist_dir(cfg.data, "test")
    _, test = make_multi_mnist(sources_train, sources_test, seed=cfg.seed,
                               n_train=0, n_test=cfg.n_test)
    return test


def build_net(cfg: RunConfig, input_shape=(1, 36, 36)):
    """Network for a run config: benchmark conv stack, task head when needed."""
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    multi = cfg.mode == "multi_task"
    untied = cfg.mode == "kolen_pollack"
    return build_paired(benchmark_specs(cfg.channels, cfg.hidden), input_shape,
                        n_classes=N_CLASSES, n_tasks=N_TASKS if multi else None,
                        seed=cfg.seed, tied=not untied,
                        td_init="random" if untied else "copy", dtype=dtype)


def evaluate(net, dataset: MultiMnistSet, batch_size: int = 256,
             tasks=None) -> tuple[list[float], list[float]]:
    """Per-task accuracy and mean loss over a dataset (no mutation).

    Multi-task networks run the task-gated forward for every task on every
    image; plain networks score the requested tasks' labels with the ReLU
    forward.
    """
    if tasks is None:
        tasks = list(range(N_TASKS)) if net.w_task is not None else [0]
    accs, losses = [], []
    for task in tasks:
        correct, loss_sum, seen = 0, 0.0, 0
        for start in range(0, len(dataset), batch_size):
            imgs = dataset.images[start:start + batch_size]
            labels = dataset.labels_for_task(task)[start:start + batch_size]
            if net.w_task is not None:
                onehot = np.zeros((len(imgs), net.n_tasks), dtype=net.dtype)
                onehot[:, task] = 1.0
                _, gates = net.td_pass(onehot, head="task", mode="relu")
                logits, _ = net.bu_forward(imgs, mode="relu_galu", gates=gates)
            else:
                logits, _ = net.bu_forward(imgs, mode="relu")
            loss, _ = softmax_xent_batch(logits, labels)
            correct += int((logits.argmax(axis=1) == labels).sum())
            loss_sum += loss * len(imgs)
            seen += len(imgs)
        accs.append(correct / max(seen, 1))
        losses.append(loss_sum / max(seen, 1))
    return accs, losses


def train_run(cfg: RunConfig, train_set: MultiMnistSet, test_set: MultiMnistSet,
              net=None, on_record=None):
    """One training run; returns (net, opt, records).

    Emits a MetricsRecord per epoch (test metrics on the eval_every cadence
    and at the last epoch) through on_record as soon as it is complete.
    """
    if net is None:
        net = build_net(cfg, input_shape=tuple(train_set.images.shape[1:]))
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.gamma)
    fa_cfg = make_fa_config(net, cfg.mode, seed=cfg.seed) if cfg.mode in ("fa", "dfa") \
        else None
    task_rng = np.random.default_rng([cfg.seed, 1])
    records: list[MetricsRecord] = []

    def emit(record):
        records.append(record)
        if on_record is not None:
            on_record(record)

    multi = cfg.mode == "multi_task"
    n_tasks = N_TASKS if multi else 1
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.set_epoch(epoch)
        correct = np.zeros(n_tasks)
        seen = np.zeros(n_tasks)
        loss_sum = np.zeros(n_tasks)
        for imgs, left, right in batches(train_set, cfg.batch_size, cfg.seed, epoch):
            if multi:
                tasks = task_rng.integers(0, N_TASKS, size=len(imgs))
                labels = np.where(tasks == 0, left, right)
                result = multi_task_step(net, imgs, tasks, labels, opt)
            else:
                labels = left if cfg.task == 0 else right
                if cfg.mode == "single_task":
                    result = single_task_step(net, imgs, labels, opt)
                elif cfg.mode == "kolen_pollack":
                    result = single_task_deltas(net, imgs, labels)
                    kolen_pollack_decay(net, cfg.kp_lambda, opt.lr)
                    opt.step(net.trainable_parameters(), result.delta.as_gradients())
                else:
                    result = fa_step(net, imgs, labels, opt, fa_cfg)
                tasks = np.zeros(len(imgs), dtype=int)
            if not np.isfinite(result.loss):
                raise NumericAbort(f"non-finite loss at epoch {epoch}")
            hit = result.predictions == labels
            for t in range(n_tasks):
                sel = tasks == t
                correct[t] += int(hit[sel].sum())
                seen[t] += int(sel.sum())
                if sel.any():
                    l, _ = softmax_xent_batch(result.logits[sel], labels[sel])
                    loss_sum[t] += l * int(sel.sum())

        train_acc = [float(correct[t] / max(seen[t], 1)) for t in range(n_tasks)]
        train_loss = [float(loss_sum[t] / max(seen[t], 1)) for t in range(n_tasks)]
        want_test = ((epoch + 1) % cfg.eval_every == 0) or (epoch == cfg.epochs - 1)
        test_acc = test_loss = avg_test = None
        if want_test:
            tasks_to_eval = None if multi else [cfg.task]
            test_acc, test_loss = evaluate(net, test_set, cfg.batch_size,
                                           tasks=tasks_to_eval)
            avg_test = float(np.mean(test_acc))
        emit(MetricsRecord(
            epoch=epoch + 1, train_acc=train_acc, train_loss=train_loss,
            test_acc=test_acc, test_loss=test_loss,
            avg_train_acc=float(np.mean(train_acc)), avg_test_acc=avg_test,
            seconds=time.perf_counter() - t0, lr=opt.lr))

    if not records or records[-1].test_acc is None:
        tasks_to_eval = None if multi else [cfg.task]
        test_acc, test_loss = evaluate(net, test_set, cfg.batch_size,
                                       tasks=tasks_to_eval)
        emit(MetricsRecord(
            epoch=cfg.epochs, train_acc=None, train_loss=None, test_acc=test_acc,
            test_loss=test_loss, avg_train_acc=None,
            avg_test_acc=float(np.mean(test_acc)), seconds=0.0, lr=opt.lr))
    return net, opt, records


# -- verification suites -----------------------------------------------------------


def check_net(net, x, labels, tasks=None) -> tuple[float, str]:
    """Worst per-parameter relative error of counter-Hebb deltas vs backprop.

    With `tasks` given the comparison runs the task-gated step against the
    mask-pruned gradient; otherwise the plain step against the plain
    gradient.  Works for untied networks too (where disagreement is
    expected), which is what makes fault injection visible.
    """
    if tasks is not None:
        result = multi_task_deltas(net, x, tasks, labels)
        oracle = backprop(net, x, labels, mask=result.masks).analytic
    else:
        result = single_task_deltas(net, x, labels)
        oracle = backprop(net, x, labels).analytic
    grads = result.delta.as_gradients()
    return GradientReport.compare({k: grads[k] for k in oracle}, oracle)


@dataclass
class SuiteResult:
    name: str
    worst: float
    tol: float
    where: str = ""

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def _random_specs(rng):
    from .network import Conv, Dense
    n_layers = int(rng.integers(1, 5))
    if rng.random() < 0.5:
        specs = [Conv(int(rng.integers(1, 9)), int(rng.integers(1, 4)),
                      stride=int(rng.integers(1, 3)))
                 for _ in range(int(rng.integers(1, 3)))]
        specs += [Dense(int(rng.integers(1, 17)))
                  for _ in range(max(n_layers - len(specs), 1))]
        shape = (int(rng.integers(1, 3)), 9, 9)
    else:
        specs = [Dense(int(rng.integers(1, 17))) for _ in range(n_layers)]
        shape = (int(rng.integers(2, 8)),)
    return specs, shape


def grad_check(seed: int = 0, trials: int = 100, fd_trials: int = 8,
               dtype=np.float64) -> list[SuiteResult]:
    """The equivalence suites: plain and task-gated counter-Hebb deltas vs
    the independent backprop oracle, oracle vs finite differences, and the
    reduced-width benchmark architecture."""
    from .reference import kink_margin

    rng = np.random.default_rng(seed)
    results = []

    worst, where = 0.0, ""
    for _ in range(trials):
        specs, shape = _random_specs(rng)
        net = build_paired(specs, shape, n_classes=int(rng.integers(2, 6)),
                           seed=int(rng.integers(0, 2**31)), dtype=dtype)
        x = rng.normal(size=(1,) + net.input_shape)
        labels = rng.integers(0, net.n_classes, size=1)
        err, loc = check_net(net, x, labels)
        if err > worst:
            worst, where = err, loc
    results.append(SuiteResult("counter_hebb_vs_backprop", worst, 1e-10, where))

    worst, where = 0.0, ""
    for _ in range(max(trials // 2, 1)):
        specs, shape = _random_specs(rng)
        net = build_paired(specs, shape, n_classes=int(rng.integers(2, 6)),
                           n_tasks=N_TASKS, seed=int(rng.integers(0, 2**31)),
                           dtype=dtype)
        x = rng.normal(size=(1,) + net.input_shape)
        labels = rng.integers(0, net.n_classes, size=1)
        tasks = rng.integers(0, N_TASKS, size=1)
        err, loc = check_net(net, x, labels, tasks=tasks)
        if err > worst:
            worst, where = err, loc
    results.append(SuiteResult("gated_counter_hebb_vs_masked_backprop", worst,
                               1e-10, where))

    worst, where = 0.0, ""
    done = 0
    while done < fd_trials:
        specs, shape = _random_specs(rng)
        net = build_paired(specs, shape, n_classes=3,
                           seed=int(rng.integers(0, 2**31)), dtype=dtype)
        if sum(p.size for p in net.parameters().values()) > 2000:
            continue
        x = rng.normal(size=(1,) + net.input_shape)
        if kink_margin(net, x) < 1e-3:
            continue
        report = backprop(net, x, [int(rng.integers(0, 3))], fd_step=1e-5)
        if report.max_rel_error > worst:
            worst, where = report.max_rel_error, report.worst_param
        done += 1
    results.append(SuiteResult("backprop_vs_finite_differences", worst, 1e-6, where))

    net = build_paired(benchmark_specs(channels=4, hidden=12), (1, 36, 36),
                       n_classes=N_CLASSES, n_tasks=N_TASKS, seed=seed, dtype=dtype)
    x = rng.normal(size=(2, 1, 36, 36))
    labels = rng.integers(0, N_CLASSES, size=2)
    err, loc = check_net(net, x, labels, tasks=rng.integers(0, N_TASKS, size=2))
    results.append(SuiteResult("benchmark_architecture_gated", err, 1e-10, loc))
    return results


def align_check(steps: int = 1000, lr: float = 0.01, lam: float = 1.0,
                seed: int = 0) -> tuple[list[dict], list[SuiteResult]]:
    """Alignment dynamics of an untied network under decay toward symmetry.

    Trains a small dense stack for `steps` counter-Hebb steps with the
    shared update plus (1 - lr*lam) weight scaling and records per-step
    asymmetry norms and cosines.  Checks the norms against the geometric
    law (1 - lr*lam)^t, and with lam = 0 against constancy.
    """
    from .learning import Sgd, alignment_cosines, asymmetry_norms
    from .network import Dense

    rng = np.random.default_rng(seed)
    net = build_paired([Dense(8), Dense(6)], (6,), n_classes=3,
                       seed=seed, tied=False, td_init="random")
    opt = Sgd(lr=lr)
    init = asymmetry_norms(net)
    rows = []
    factor = 1.0 - lr * lam
    worst = 0.0
    for step in range(1, steps + 1):
        x = rng.normal(size=(4, 6))
        labels = rng.integers(0, 3, size=4)
        result = single_task_deltas(net, x, labels)
        if lam != 0.0:
            kolen_pollack_decay(net, lam, opt.lr)
        opt.step(net.trainable_parameters(), result.delta.as_gradients())
        norms = asymmetry_norms(net)
        cosines = alignment_cosines(net)
        predicted = [n0 * factor ** step for n0 in init]
        rows.append({"step": step,
                     **{f"asym_l{i}": norms[i] for i in range(len(norms))},
                     **{f"cos_l{i}": cosines[i] for i in range(len(cosines))},
                     "predicted": predicted[0]})
        for n, p in zip(norms, predicted):
            if p > 0:
                worst = max(worst, abs(n - p) / p)
    name = "asymmetry_geometric_decay" if lam != 0 else "asymmetry_constant"
    tol = 1e-8 if lam != 0 else 1e-12 * steps  # fp accumulation budget per step
    checks = [SuiteResult(name, worst, tol)]
    return rows, checks
