"""The alternating training loop.

Each outer step first re-trains the mutual-information estimator for K
ascent steps against the current (frozen) feature extractor, then updates
the extractor on the task loss plus the weighted bound, and the logit
layer on the task loss alone.  Keeping the estimator fresh at every step
is the core of the method: unlike an adversarial discriminator, it can be
trained to convergence without starving the main model of gradients.

Randomness is split into three independent streams (task batches, MINE
batches/shuffles, MINE pool choice) so that the weight = 0 configuration
consumes exactly the same task-batch stream as a plain ERM loop and
reproduces it bitwise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import mine as mine_mod
from . import nn
from . import tensor as T
from .data import Dataset
from .metrics import EOReport, accuracy, equal_opportunity
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; carries the failing step and a snapshot."""

    def __init__(self, step: int, reason: str, snapshot: dict):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    """Everything the alternating loop consumes.

    ``mi_weight`` is the Lagrangian trade-off weight; 0 reduces the loop
    to plain empirical risk minimization.  ``mine_steps`` is the number of
    estimator ascent steps per outer step (0 skips the estimator
    entirely).  ``mine_pool`` bounds how many training points are embedded
    per outer step for the estimator's batches (0 = all of them).
    ``eval_every`` controls how often train/test accuracy is measured
    (0 = once per epoch); values carry forward between measurements.
    """

    mi_weight: float = 1.0
    mine_steps: int = 80
    outer_steps: int = 100
    lr_main: float = 1e-4
    lr_mine: float = 1e-4
    task_batch: int = 1024
    mine_batch: int = 1024
    clip_norm: float = 1.0
    grad_accum: int = 1
    seed: int = 0
    mine_optimizer: str = "adam"
    main_optimizer: str = "adam"
    ema_correction: bool = False
    mine_pool: int = 0
    eval_every: int = 0

    def validate(self) -> None:
        if self.mi_weight < 0:
            raise ValueError("mi_weight must be >= 0")
        if self.mine_steps < 0:
            raise ValueError("mine_steps must be >= 0")
        if self.outer_steps < 1:
            raise ValueError("outer_steps must be >= 1")
        if self.lr_main <= 0 or self.lr_mine <= 0:
            raise ValueError("learning rates must be positive")
        if self.task_batch < 2 or self.mine_batch < 2:
            raise ValueError("batch sizes must be >= 2")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if self.mine_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown mine optimizer '{self.mine_optimizer}'")
        if self.main_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown main optimizer '{self.main_optimizer}'")
        if self.mine_pool < 0 or self.eval_every < 0:
            raise ValueError("mine_pool and eval_every must be >= 0")


def steps_for_epochs(epochs: int, n_samples: int, batch: int) -> int:
    """Outer-step count for an epoch budget: epochs * ceil(N / batch)."""
    return epochs * math.ceil(n_samples / batch)


@dataclass
class RunRecord:
    step: int
    task_loss: float
    lne: Optional[float]
    mi_estimate: Optional[float]
    train_acc: float
    test_acc: float
    eo: Optional[float]
    wall_time: float


@dataclass
class RunLog:
    """Per-outer-step training record; exactly one row per step."""

    records: list[RunRecord] = field(default_factory=list)

    CSV_HEADER = "step,task_loss,lne,mi_estimate,train_acc,test_acc,eo"

    def append(self, rec: RunRecord) -> None:
        self.records.append(rec)

    @property
    def final(self) -> RunRecord:
        return self.records[-1]

    @staticmethod
    def _fmt(v: Optional[float]) -> str:
        return "" if v is None else repr(float(v))

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.CSV_HEADER + "\n")
            for r in self.records:
                f.write(",".join([
                    str(r.step), self._fmt(r.task_loss), self._fmt(r.lne),
                    self._fmt(r.mi_estimate), self._fmt(r.train_acc),
                    self._fmt(r.test_acc), self._fmt(r.eo),
                ]) + "\n")

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        log = cls()
        with open(path) as f:
            header = f.readline().strip()
            if header != cls.CSV_HEADER:
                raise ValueError(f"unexpected run-log header: {header!r}")
            for line in f:
                s, tl, ln, mi, tra, tea, eo = line.rstrip("\n").split(",")
                log.append(RunRecord(
                    step=int(s), task_loss=float(tl),
                    lne=float(ln) if ln else None,
                    mi_estimate=float(mi) if mi else None,
                    train_acc=float(tra), test_acc=float(tea),
                    eo=float(eo) if eo else None,
                    wall_time=0.0))
        return log


class _BatchStream:
    """Without-replacement batch cursor, reshuffled at each epoch boundary."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def next(self, size: int) -> np.ndarray:
        if size > self.n:
            raise ValueError(f"batch size {size} exceeds dataset size {self.n}")
        if self.cursor + size > self.n:
            self.order = self.rng.permutation(self.n)
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + size]
        self.cursor += size
        return idx


def embed_dataset(fe: nn.FeatureExtractor, x: np.ndarray,
                  chunk: int = 1024) -> np.ndarray:
    """Forward x through the extractor without recording gradients."""
    outs = []
    for start in range(0, len(x), chunk):
        outs.append(fe(Tensor(x[start:start + chunk])).data)
    return np.concatenate(outs)


def evaluate(fe: nn.FeatureExtractor, clf: nn.LogitClassifier,
             dataset: Dataset, chunk: int = 1024):
    """Accuracy of argmax predictions; adds an EO report when the dataset
    carries a protected attribute.  Argmax ties break to the lowest index.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = []
    for start in range(0, len(dataset), chunk):
        z = fe(Tensor(dataset.x[start:start + chunk]))
        logits = clf(z)
        preds.append(np.argmax(logits.data, axis=1))
    preds = np.concatenate(preds)
    acc = accuracy(preds, dataset.labels)
    if dataset.protected is None:
        return acc
    report = equal_opportunity(preds, dataset.labels, dataset.protected,
                               positive_class=1)
    return acc, report


def _snapshot(named) -> dict:
    return {name: p.data.copy() for name, p in named}


def fit(fe: nn.FeatureExtractor, clf: nn.LogitClassifier,
        tnet: Optional[mine_mod.StatisticsNetwork],
        train: Dataset, test: Dataset, cfg: TrainConfig) -> RunLog:
    """Run the alternating loop for ``cfg.outer_steps`` steps.

    Models are updated in place; returns the full run log.  Raises
    :class:`TrainingDiverged` (with the last finite parameter snapshot)
    if any loss goes non-finite, and propagates
    :class:`mine.EstimatorDiverged` from the inner loop.
    """
    cfg.validate()
    use_mine = cfg.mine_steps > 0
    if use_mine and tnet is None:
        raise ValueError("mine_steps > 0 requires a statistics network")

    root = np.random.SeedSequence(cfg.seed)
    rng_task, rng_mine, rng_pool = [np.random.default_rng(s) for s in root.spawn(3)]
    task_stream = _BatchStream(len(train), rng_task)

    theta = fe.params()
    psi = clf.params()
    main_opt = nn.make_optimizer(cfg.main_optimizer, theta + psi, cfg.lr_main)
    mine_opt = (nn.make_optimizer(cfg.mine_optimizer, tnet.params(), cfg.lr_mine)
                if use_mine else None)
    ema_state = [None] if (use_mine and cfg.ema_correction) else None

    named = fe.named_params() + clf.named_params()
    if tnet is not None:
        named += tnet.named_params()
    last_good = _snapshot(named)

    steps_per_epoch = max(1, math.ceil(len(train) / cfg.task_batch))
    eval_every = cfg.eval_every or steps_per_epoch
    apply_penalty = cfg.mi_weight > 0 and use_mine

    log = RunLog()
    train_acc = test_acc = 0.0
    eo_val: Optional[float] = None
    t0 = time.perf_counter()

    for step in range(1, cfg.outer_steps + 1):
        # (i) bring the estimator up to date against the frozen extractor
        estimate: Optional[float] = None
        if use_mine:
            if cfg.mine_pool and cfg.mine_pool < len(train):
                pool_idx = rng_pool.choice(len(train), cfg.mine_pool, replace=False)
            else:
                pool_idx = slice(None)
            z_pool = embed_dataset(fe, train.x[pool_idx])
            est = mine_mod.estimate_mi(
                tnet, z_pool, train.c[pool_idx], cfg.mine_steps, mine_opt,
                rng_mine, batch_size=min(cfg.mine_batch, len(z_pool)),
                ema_state=ema_state)
            estimate = est.value

        # (ii) one update of the main model, possibly over micro-batches
        g_task = [np.zeros_like(p.data) for p in theta + psi]
        g_penalty = [np.zeros_like(p.data) for p in theta]
        task_losses, lne_vals = [], []
        for _ in range(cfg.grad_accum):
            idx = task_stream.next(min(cfg.task_batch, len(train)))
            xb, yb, cb = train.x[idx], train.y[idx], train.c[idx]
            with T.Tape() as tape:
                z, logits = nn.forward_classify(fe, clf, Tensor(xb))
                task_loss = nn.cross_entropy(logits, yb)
                T.zero_grads(theta + psi)
                tape.backward(task_loss)
                for i, p in enumerate(theta + psi):
                    if p.grad is not None:
                        g_task[i] += p.grad
                task_losses.append(task_loss.item())

                if apply_penalty:
                    c_shuf = mine_mod.shuffle_marginal(cb, rng_mine)
                    lne = mine_mod.mine_loss(tnet, z, cb, c_shuf)
                    T.zero_grads(theta + psi + tnet.params())
                    tape.backward(lne)
                    for i, p in enumerate(theta):
                        if p.grad is not None:
                            g_penalty[i] += p.grad
                    T.zero_grads(tnet.params())
                    lne_vals.append(lne.item())
                elif use_mine:
                    lne_vals.append(
                        mine_mod.mine_loss(
                            tnet, z.data, cb,
                            mine_mod.shuffle_marginal(cb, rng_mine)).item())

        task_loss_val = float(np.mean(task_losses))
        lne_val = float(np.mean(lne_vals)) if lne_vals else None
        if not math.isfinite(task_loss_val) or (lne_val is not None
                                                and not math.isfinite(lne_val)):
            raise TrainingDiverged(step, "non-finite loss", last_good)

        # (iii) extractor gets task + clipped penalty gradient, logit layer
        # gets the task gradient only
        if apply_penalty:
            scaled = [cfg.mi_weight * g for g in g_penalty]
            nn.clip_gradients(scaled, cfg.clip_norm)
            for i in range(len(theta)):
                g_task[i] = g_task[i] + scaled[i]
        for p, g in zip(theta + psi, g_task):
            p.grad = g
        main_opt.step()
        T.zero_grads(theta + psi)

        # (iv) bookkeeping
        if step % eval_every == 0 or step == cfg.outer_steps or step == 1:
            res = evaluate(fe, clf, train)
            train_acc = res[0] if isinstance(res, tuple) else res
            res = evaluate(fe, clf, test)
            if isinstance(res, tuple):
                test_acc, report = res
                eo_val = report.eo
            else:
                test_acc = res
            last_good = _snapshot(named)
        log.append(RunRecord(step=step, task_loss=task_loss_val, lne=lne_val,
                             mi_estimate=estimate, train_acc=train_acc,
                             test_acc=test_acc, eo=eo_val,
                             wall_time=time.perf_counter() - t0))
    return log


# ---------------------------------------------------------------------------
# trade-off weight selection
# ---------------------------------------------------------------------------


@dataclass
class LambdaTrial:
    mi_weight: float
    train_acc: float
    mi_estimate: float
    fits: bool


@dataclass
class LambdaReport:
    trials: list[LambdaTrial]
    reference_mi: float
    chosen: Optional[float]


def select_lambda(candidates, run_trial: Callable[[float], tuple[float, float]],
                  fit_threshold: float = 0.95) -> LambdaReport:
    """Pick the largest trade-off weight that still fits the training data.

    ``run_trial(weight)`` must train a model and return (final train
    accuracy, final MI estimate).  A candidate fits when its train
    accuracy reaches ``fit_threshold`` and its MI estimate improved on the
    weight-0 reference.  No validation data is consulted.  ``chosen`` is
    None when nothing fits.
    """
    cands = sorted(set(float(c) for c in candidates))
    if len(cands) < 2:
        raise ValueError("need at least two candidate weights")
    if all(c == 0.0 for c in cands):
        raise ValueError("need at least one nonzero candidate weight")

    _, reference_mi = run_trial(0.0)
    trials = []
    for cand in cands:
        if cand == 0.0:
            trials.append(LambdaTrial(0.0, math.nan, reference_mi, fits=False))
            continue
        train_acc, mi_est = run_trial(cand)
        fits = train_acc >= fit_threshold and mi_est < reference_mi
        trials.append(LambdaTrial(cand, train_acc, mi_est, fits))
    fitting = [t.mi_weight for t in trials if t.fits]
    return LambdaReport(trials=trials, reference_mi=reference_mi,
                        chosen=max(fitting) if fitting else None)
