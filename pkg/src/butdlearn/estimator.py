"""scikit-learn estimator wrapping the paired-network trainer.

`CounterHebbClassifier` turns the counter-Hebb training loop into a
fit/predict classifier that composes with the wider sklearn ecosystem
(get_params/set_params/clone, pipelines, CV).  Single-task when y is a
plain label vector; multi-task (one shared network, task-gated) when y has
one label column per task.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .learning import (
    fa_step,
    kolen_pollack_decay,
    make_fa_config,
    make_optimizer,
    multi_task_step,
    single_task_deltas,
    single_task_step,
)
from .network import benchmark_specs, build_paired
from .ops import softmax


def _check_images(X, input_shape=None):
    """Validate sample arrays: (N, d) flat or (N, C, H, W) image batches."""
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim not in (2, 4):
        raise ValueError(f"X must be (n_samples, n_features) or "
                         f"(n_samples, C, H, W); got ndim={X.ndim}")
    if input_shape is not None and X.shape[1:] != input_shape:
        raise ValueError(f"X has sample shape {X.shape[1:]}, "
                         f"the fitted network expects {input_shape}")
    return X


class CounterHebbClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained by counter-Hebb updates on a tied BU/TD network.

    Parameters
    ----------
    layers : sequence of Dense/Conv specs or None
        Network body.  None picks a single hidden Dense(hidden) for flat
        inputs or the conv benchmark stack for image inputs.
    hidden : int, top hidden width used by the default architectures.
    channels : int, conv channels used by the default image architecture.
    algorithm : "counter_hebb" | "fa" | "dfa" | "kolen_pollack"
        Training rule.  The alignment baselines are single-task only.
    epochs, batch_size, lr, gamma, optimizer : usual training knobs
        (gamma is a per-epoch exponential lr decay).
    kp_lambda : float, decay toward symmetry for algorithm="kolen_pollack".
    random_state : int seed; None draws one.

    Attributes
    ----------
    net_ : the trained PairedNetwork
    classes_ : sorted class labels
    n_tasks_ : number of label columns fitted (1 for a label vector)
    history_ : per-epoch dicts with loss/accuracy (and eval_set metrics)
    """

    def __init__(self, layers=None, hidden=50, channels=16,
                 algorithm="counter_hebb", epochs=10, batch_size=64, lr=5e-4,
                 gamma=0.95, optimizer="adam", kp_lambda=0.5, random_state=0):
        self.layers = layers
        self.hidden = hidden
        self.channels = channels
        self.algorithm = algorithm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.optimizer = optimizer
        self.kp_lambda = kp_lambda
        self.random_state = random_state

    # -- sklearn plumbing ---------------------------------------------------

    def _seed(self) -> int:
        if self.random_state is None:
            return int(np.random.SeedSequence().entropy % (2**31))
        return int(self.random_state)

    def _default_layers(self, input_shape):
        if len(input_shape) == 1:
            from .network import Dense
            return [Dense(self.hidden)]
        return benchmark_specs(self.channels, self.hidden)

    def _encode_labels(self, y):
        y = np.asarray(y)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2:
            raise ValueError(f"y must be (n_samples,) or (n_samples, n_tasks), "
                             f"got shape {y.shape}")
        classes = np.unique(y)
        encoded = np.searchsorted(classes, y)
        return classes, encoded

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y, eval_set=None):
        """Train the paired network.

        y with one column per task trains the task-gated multi-task rule;
        a plain vector trains single-task.  eval_set=(X_test, y_test)
        records test metrics in history_ after every epoch.
        """
        X = _check_images(X)
        self.classes_, labels = self._encode_labels(y)
        if labels.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} samples but y has {labels.shape[0]}")
        self.n_tasks_ = labels.shape[1]
        multi = self.n_tasks_ > 1
        if self.algorithm not in ("counter_hebb", "fa", "dfa", "kolen_pollack"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if multi and self.algorithm != "counter_hebb":
            raise ValueError("multi-task labels need algorithm='counter_hebb'")

        seed = self._seed()
        untied = self.algorithm == "kolen_pollack"
        specs = list(self.layers) if self.layers is not None \
            else self._default_layers(X.shape[1:])
        self.net_ = build_paired(
            specs, X.shape[1:], n_classes=len(self.classes_),
            n_tasks=self.n_tasks_ if multi else None, seed=seed,
            tied=not untied, td_init="random" if untied else "copy")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        opt = make_optimizer(self.optimizer, self.lr, self.gamma)
        fa_cfg = make_fa_config(self.net_, self.algorithm, seed=seed) \
            if self.algorithm in ("fa", "dfa") else None
        rng = np.random.default_rng([seed, 7])

        self.history_ = []
        n = X.shape[0]
        for epoch in range(self.epochs):
            opt.set_epoch(epoch)
            order = rng.permutation(n)
            correct, loss_sum = 0, 0.0
            for start in range(0, n, self.batch_size):
                take = order[start:start + self.batch_size]
                xb = X[take]
                if multi:
                    tasks = rng.integers(0, self.n_tasks_, size=len(take))
                    yb = labels[take, tasks]
                    result = multi_task_step(self.net_, xb, tasks, yb, opt)
                else:
                    yb = labels[take, 0]
                    if self.algorithm == "counter_hebb":
                        result = single_task_step(self.net_, xb, yb, opt)
                    elif self.algorithm == "kolen_pollack":
                        result = single_task_deltas(self.net_, xb, yb)
                        kolen_pollack_decay(self.net_, self.kp_lambda, opt.lr)
                        opt.step(self.net_.trainable_parameters(),
                                 result.delta.as_gradients())
                    else:
                        result = fa_step(self.net_, xb, yb, opt, fa_cfg)
                if not np.isfinite(result.loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                correct += int((result.predictions == yb).sum())
                loss_sum += result.loss * len(take)
            record = {"epoch": epoch + 1, "lr": opt.lr,
                      "train_acc": correct / n, "train_loss": loss_sum / n}
            if eval_set is not None:
                record["eval_acc"] = self.score(*eval_set)
            self.history_.append(record)
        return self

    def decision_function(self, X, task=None):
        """Logits; (N, n_classes) for one task, (N, n_tasks, n_classes) for all."""
        check_is_fitted(self, "net_")
        X = _check_images(X, self.net_.input_shape)
        multi = self.net_.w_task is not None
        if not multi:
            logits, _ = self.net_.bu_forward(X, mode="relu")
            return logits
        tasks = range(self.n_tasks_) if task is None else [task]
        outs = []
        for t in tasks:
            onehot = np.zeros((X.shape[0], self.n_tasks_), dtype=self.net_.dtype)
            onehot[:, t] = 1.0
            _, gates = self.net_.td_pass(onehot, head="task", mode="relu")
            logits, _ = self.net_.bu_forward(X, mode="relu_galu", gates=gates)
            outs.append(logits)
        return outs[0] if task is not None else np.stack(outs, axis=1)

    def predict_proba(self, X, task=None):
        return softmax(self.decision_function(X, task=task))

    def predict(self, X, task=None):
        """Labels; (N,) single-task or explicit task, else (N, n_tasks)."""
        scores = self.decision_function(X, task=task)
        return self.classes_[scores.argmax(axis=-1)]

    def score(self, X, y):
        """Accuracy, averaged over tasks for multi-task labels."""
        check_is_fitted(self, "net_")
        y = np.asarray(y)
        pred = self.predict(X)
        if pred.ndim == 1:
            return float(np.mean(pred == y.reshape(pred.shape)))
        return float(np.mean([np.mean(pred[:, t] == y[:, t])
                              for t in range(pred.shape[1])]))
