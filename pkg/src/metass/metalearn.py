"""MAML / ANIL meta-training, one-shot fine-tuning and the multitask baseline.

Everything here is written against a *task loss*: a callable
``loss_fn(params, examples) -> scalar Tensor``. The default is the mean uPIT
loss of the separation model over a list of :class:`~metass.taskgen.Mixture`,
but any loss over a :class:`~metass.tasnet.ModelParams` works, which is how the
scalar quadratic probes in the tests drive the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .objective import upit_loss
from .tasnet import ModelParams, Partition, forward, partition_tensors

TaskLoss = Callable[[ModelParams, Sequence], ag.Tensor]

FIRST_ORDER = "first_order"
FINITE_DIFFERENCE_EXACT = "finite_difference_exact"
HESSIAN_VECTOR = "hessian_vector"
META_GRAD_MODES = (FIRST_ORDER, FINITE_DIFFERENCE_EXACT, HESSIAN_VECTOR)


class NonFiniteLoss(FloatingPointError):
    pass


def separation_loss(params: ModelParams, examples: Sequence) -> ag.Tensor:
    """Mean uPIT loss over mixtures; equal-length mixtures run as one batch."""
    lengths = {len(e.mixture) for e in examples}
    if len(lengths) == 1:
        mix = np.stack([e.mixture for e in examples])
        refs = np.stack([e.references for e in examples])
        return upit_loss(forward(params, mix), refs).value
    total = None
    for e in examples:
        loss = upit_loss(forward(params, e.mixture), e.references).value
        total = loss if total is None else total + loss
    return total * (1.0 / len(examples))


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.01
    beta: float = 1e-4
    batch_size: int = 4
    inner_steps: int = 1
    partition: Partition = Partition.WHOLE_MODEL
    meta_grad_mode: str = FIRST_ORDER
    fd_max_params: int = 2000
    fd_step: float = 1e-5
    allow_multi_shot: bool = False

    def __post_init__(self):
        object.__setattr__(self, "partition", Partition.parse(self.partition))
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.batch_size < 1 or self.inner_steps < 1:
            raise ValueError("batch_size and inner_steps must be at least 1")
        if self.meta_grad_mode not in META_GRAD_MODES:
            raise ValueError(f"unknown meta_grad_mode {self.meta_grad_mode!r}")

    def with_(self, **kw) -> "MetaConfig":
        return replace(self, **kw)


@dataclass
class AdaptedParams:
    base: ModelParams
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    partition: Partition = Partition.WHOLE_MODEL


def loss_and_grad(
    params: ModelParams, examples: Sequence, names, loss_fn: TaskLoss = separation_loss
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and its gradient with respect to the tensors in ``names``."""
    names = list(names)
    leaves = params.as_leaves(names)
    loss = loss_fn(leaves, examples)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    ag.backward(loss)
    grads = {}
    for n in names:
        g = leaves[n].grad
        grads[n] = np.zeros_like(leaves[n].data) if g is None else g
    return value, grads


def sgd_update(params: ModelParams, grads: Mapping[str, np.ndarray], lr: float) -> ModelParams:
    if lr == 0:
        return params
    arrays = params.arrays()
    return params.replace({n: arrays[n] - lr * g for n, g in grads.items()})


def inner_adapt(
    params: ModelParams, support: Sequence, cfg: MetaConfig, loss_fn: TaskLoss = separation_loss
) -> AdaptedParams:
    """``inner_steps`` gradient-descent steps on the support set over ``cfg.partition`` only."""
    if len(support) == 0:
        raise ValueError("support set is empty")
    names = list(partition_tensors(params, cfg.partition))
    current = params
    losses = []
    for step in range(cfg.inner_steps):
        try:
            value, grads = loss_and_grad(current, support, names, loss_fn)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"inner step {step}: {exc}") from None
        losses.append(value)
        current = sgd_update(current, grads, cfg.alpha)
    return AdaptedParams(params, current, losses, cfg.partition)


def meta_loss(
    params: ModelParams, tasks: Sequence, cfg: MetaConfig, loss_fn: TaskLoss = separation_loss
) -> tuple[float, list[AdaptedParams]]:
    """Sum over tasks of the query loss after adapting on that task's support set."""
    total = 0.0
    adapted = []
    for task in tasks:
        a = inner_adapt(params, task.support, cfg, loss_fn)
        total += loss_fn(a.params, task.query).item()
        adapted.append(a)
    return total, adapted


def _first_order_gradient(params, tasks, cfg, loss_fn):
    names = list(params)
    total = 0.0
    summed = {n: np.zeros_like(v) for n, v in params.arrays().items()}
    for task in tasks:
        a = inner_adapt(params, task.support, cfg, loss_fn)
        value, grads = loss_and_grad(a.params, task.query, names, loss_fn)
        total += value
        for n in names:
            summed[n] += grads[n]
    return total, summed


def _finite_difference_gradient(params, tasks, cfg, loss_fn):
    n_params = params.num_parameters()
    if n_params > cfg.fd_max_params:
        raise ValueError(
            f"finite-difference meta-gradient refused: {n_params} parameters > limit {cfg.fd_max_params}"
        )
    theta = params.flat()
    h = cfg.fd_step
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + h
        up, _ = meta_loss(params.unflat(bumped), tasks, cfg, loss_fn)
        bumped[i] = theta[i] - h
        down, _ = meta_loss(params.unflat(bumped), tasks, cfg, loss_fn)
        grad[i] = (up - down) / (2 * h)
    total, _ = meta_loss(params, tasks, cfg, loss_fn)
    return total, params.unflat(grad).arrays()


def _hessian_vector_gradient(params, tasks, cfg, loss_fn):
    # chain rule through each inner step: g <- g - alpha * H_support(theta_j) P g,
    # with the Hessian-vector product taken as a central difference of support gradients
    names = list(params)
    part = set(partition_tensors(params, cfg.partition))
    total = 0.0
    summed = {n: np.zeros_like(v) for n, v in params.arrays().items()}
    for task in tasks:
        trajectory = [params]
        for step in range(cfg.inner_steps):
            a = inner_adapt(trajectory[-1], task.support, cfg.with_(inner_steps=1), loss_fn)
            trajectory.append(a.params)
        value, g = loss_and_grad(trajectory[-1], task.query, names, loss_fn)
        total += value
        for theta in reversed(trajectory[:-1]):
            v = {n: (g[n] if n in part else np.zeros_like(g[n])) for n in names}
            norm = math.sqrt(sum(float(np.sum(x * x)) for x in v.values()))
            if norm == 0 or cfg.alpha == 0:
                continue
            h = cfg.fd_step / norm
            arrays = theta.arrays()
            _, up = loss_and_grad(theta.replace({n: arrays[n] + h * v[n] for n in names}), task.support, names, loss_fn)
            _, down = loss_and_grad(theta.replace({n: arrays[n] - h * v[n] for n in names}), task.support, names, loss_fn)
            g = {n: g[n] - cfg.alpha * (up[n] - down[n]) / (2 * h) for n in names}
        for n in names:
            summed[n] += g[n]
    return total, summed


def meta_gradient(
    params: ModelParams, tasks: Sequence, cfg: MetaConfig, loss_fn: TaskLoss = separation_loss
) -> tuple[float, dict[str, np.ndarray]]:
    """Meta-loss and its gradient with respect to every tensor of ``params``.

    ``first_order`` treats each adapted parameter set as a constant and sums
    the query gradients taken there; ``finite_difference_exact`` differentiates
    the full meta-loss (inner step included) by central differences;
    ``hessian_vector`` back-propagates the query gradient through each inner
    step with finite-difference Hessian-vector products, which is exact up to
    differencing error at a cost of two extra support gradients per step.
    """
    if cfg.meta_grad_mode == FIRST_ORDER:
        return _first_order_gradient(params, tasks, cfg, loss_fn)
    if cfg.meta_grad_mode == HESSIAN_VECTOR:
        return _hessian_vector_gradient(params, tasks, cfg, loss_fn)
    return _finite_difference_gradient(params, tasks, cfg, loss_fn)


def meta_step(
    params: ModelParams, tasks: Sequence, cfg: MetaConfig, loss_fn: TaskLoss = separation_loss
) -> tuple[ModelParams, float]:
    """One outer update ``theta <- theta - beta * g``; returns new params and the pre-step meta-loss."""
    value, grads = meta_gradient(params, tasks, cfg, loss_fn)
    return sgd_update(params, grads, cfg.beta), value


def finetune(
    params: ModelParams, sample: Sequence, cfg: MetaConfig, loss_fn: TaskLoss = separation_loss
) -> ModelParams:
    """Adapt to a target task from its single support mixture."""
    if len(sample) != 1 and not cfg.allow_multi_shot:
        raise ValueError(f"one-shot fine-tuning takes exactly one mixture, got {len(sample)}")
    return inner_adapt(params, sample, cfg, loss_fn).params


class Adam:
    """Adaptive-moment optimizer over ModelParams (multitask baseline only)."""

    def __init__(self, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> ModelParams:
        if self.lr == 0:
            return params
        self.t += 1
        arrays = params.arrays()
        updates = {}
        for n, g in grads.items():
            m = self.m.get(n, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(n, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[n], self.v[n] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            updates[n] = arrays[n] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params.replace(updates)


def multitask_step(
    params: ModelParams,
    minibatch: Sequence,
    lr: float,
    loss_fn: TaskLoss = separation_loss,
    optimizer: Adam | None = None,
) -> tuple[ModelParams, float]:
    """One descent step on the mean uPIT loss of pooled mixtures, all parameters trainable."""
    if len(minibatch) == 0:
        raise ValueError("empty minibatch")
    value, grads = loss_and_grad(params, minibatch, list(params), loss_fn)
    if optimizer is not None:
        return optimizer.step(params, grads), value
    return sgd_update(params, grads, lr), value
