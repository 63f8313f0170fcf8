"""Adam, the step learning-rate schedule, fragment-summed loss and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .arch import forward_logits
from .config import NetworkConfig
from .nn import ParameterSet, init_parameters
from .tensor import NumericError, Tensor, scale, softmax_cross_entropy, tensor_sum

log = logging.getLogger(__name__)

# (first epoch, rate): halve at 10 and 20, fine-tune at 1e-5 for the last 5 of 30
PAPER_SCHEDULE: tuple[tuple[int, float], ...] = ((0, 1e-4), (10, 5e-5), (20, 2.5e-5), (25, 1e-5))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, **kw) -> "AdamState":
        state = cls(**kw)
        for name, p in params.trainable():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


@dataclass
class TrainPlan:
    total_epochs: int = 30
    batch_size: int = 10
    lr_schedule: tuple[tuple[int, float], ...] = PAPER_SCHEDULE
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only

    def __post_init__(self):
        self.lr_schedule = tuple((int(e), float(r)) for e, r in self.lr_schedule)
        if self.total_epochs < 1 or self.batch_size < 1:
            raise ValueError("total_epochs and batch_size must be positive")
        starts = [e for e, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or starts != sorted(set(starts)):
            raise ValueError("lr_schedule must start at epoch 0 with increasing epochs")


def lr_at(plan: TrainPlan, epoch: int) -> float:
    if not 0 <= epoch < plan.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {plan.total_epochs})")
    rate = plan.lr_schedule[0][1]
    for start, r in plan.lr_schedule:
        if epoch >= start:
            rate = r
    return rate


def adam_step(params: ParameterSet, state: AdamState, rate: float) -> None:
    """Bias-corrected Adam update of every trainable tensor; clears grads."""
    named = params.trainable()
    for name, p in named:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {name} at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)
        p.grad = None


def word_loss(fragment_logits: Tensor | np.ndarray, target: int, from_probs: bool = False):
    """Sum over a word's fragments of the cross entropy against its writer.

    ``fragment_logits`` is N x M. With ``from_probs=True`` the rows are
    already softmax outputs and a plain float is returned.
    """
    if from_probs:
        p = np.asarray(fragment_logits, dtype=np.float64)
        if not 0 <= target < p.shape[1]:
            raise ValueError(f"label {target} outside [0, {p.shape[1]})")
        return float(-np.log(p[:, target]).sum())
    if not 0 <= target < fragment_logits.shape[1]:
        raise ValueError(f"label {target} outside [0, {fragment_logits.shape[1]})")
    rows, _ = softmax_cross_entropy(fragment_logits, np.full(fragment_logits.shape[0], target))
    return tensor_sum(rows)


def batch_loss(logits: Tensor, labels: np.ndarray, n_fragments: int) -> tuple[Tensor, np.ndarray]:
    """Mean over words of each word's fragment-summed loss.

    ``logits`` rows are fragment-major (see ``forward_logits``).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= logits.shape[1]:
        raise ValueError(f"label {labels.max()} outside [0, {logits.shape[1]})")
    rows, probs = softmax_cross_entropy(logits, np.tile(labels, n_fragments))
    return scale(tensor_sum(rows), 1.0 / len(labels)), probs


@dataclass
class TrainResult:
    params: ParameterSet
    state: AdamState
    log_lines: list[str]
    epoch_losses: list[float]
    val_top1: list[float]
    seconds: float


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(config: NetworkConfig, plan: TrainPlan, images: np.ndarray, labels: Sequence[int], *,
          params: ParameterSet | None = None, state: AdamState | None = None,
          start_epoch: int = 0, validate: Callable[[ParameterSet], float] | None = None,
          log_file: TextIO | None = None,
          on_checkpoint: Callable[[ParameterSet, AdamState, int, int], None] | None = None,
          max_steps: int | None = None,
          on_step: Callable[[int, float], bool] | None = None) -> TrainResult:
    """Seeded mini-batch training.

    ``images`` is ``n x H x W x 1`` (already normalised). ``on_step`` may
    return True to stop early. ``on_checkpoint`` is called every
    ``plan.checkpoint_every`` epochs and once at the end.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if labels.min() < 0 or labels.max() >= config.writer_count:
        raise ValueError(f"labels must lie in [0, {config.writer_count})")
    params = params if params is not None else init_parameters(config, plan.seed)
    state = state if state is not None else AdamState.for_params(params)
    lines: list[str] = []
    epoch_losses: list[float] = []
    val_scores: list[float] = []
    step = state.t
    t0 = time.perf_counter()
    stop = False

    def emit(line: str) -> None:
        lines.append(line)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    for epoch in range(start_epoch, plan.total_epochs):
        rate = lr_at(plan, epoch)
        order = epoch_order(len(images), plan.seed, epoch)
        losses = []
        for lo in range(0, len(order), plan.batch_size):
            idx = order[lo:lo + plan.batch_size]
            x = Tensor(images[idx])
            logits, n = forward_logits(params, config, x, "train")
            loss, _ = batch_loss(logits, labels[idx], n)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss became {value} at epoch {epoch} step {step}")
            loss.backward()
            adam_step(params, state, rate)
            step += 1
            losses.append(value)
            emit(f"{epoch} {step} {value:.6f} {rate:.6g}")
            if on_step is not None and on_step(step, value):
                stop = True
            if stop or (max_steps is not None and step >= max_steps):
                stop = True
                break
        epoch_losses.append(float(np.mean(losses)))
        if validate is not None:
            score = validate(params)
            val_scores.append(score)
            emit(f"{epoch} {step} {epoch_losses[-1]:.6f} {rate:.6g} {score:.2f}")
        log.info("epoch %d done: mean loss %.4f (%.0fs)", epoch, epoch_losses[-1],
                 time.perf_counter() - t0)
        last = stop or epoch == plan.total_epochs - 1
        if on_checkpoint is not None and (last or (plan.checkpoint_every
                                                   and (epoch + 1) % plan.checkpoint_every == 0)):
            on_checkpoint(params, state, epoch, step)
        if stop:
            break
    return TrainResult(params, state, lines, epoch_losses, val_scores, time.perf_counter() - t0)
