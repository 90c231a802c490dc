"""Optimizer steps that apply OSCA relaxation to the task gradient and add the
anchor (or other regularizer) gradient unprojected."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import AdapterModel, apply_update, flatten_model, with_adapters
from .osca import relaxed_gradient
from .ssi import SafetySubspace


@dataclass
class SGD:
    lr: float

    def step(self, model: AdapterModel, task, extra, subs: list[SafetySubspace] | None, alphas) -> AdapterModel:
        updates = []
        for i, g in enumerate(task):
            u = g if subs is None else relaxed_gradient(subs[i], g, alphas[i])
            if extra is not None:
                u = u + extra[i]
            updates.append(u)
        return apply_update(model, updates, self.lr)


@dataclass
class AdamW:
    """AdamW over the flattened adapters.

    ``projection="update"`` feeds raw gradients (task + extra) to the moment
    estimates and applies the OSCA relaxation to the final update direction,
    so no in-subspace component is reintroduced by the moment transform.
    ``projection="gradient"`` relaxes the task gradient first and lets Adam
    rescale the result.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    projection: str = "update"
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, model: AdapterModel, task, extra, subs, alphas) -> AdapterModel:
        if self.projection not in ("update", "gradient"):
            raise ValueError(f"unknown AdamW projection placement {self.projection!r}")
        if not self.m:
            self.m = [np.zeros_like(g) for g in task]
            self.v = [np.zeros_like(g) for g in task]
        self.t += 1
        params = flatten_model(model)
        new = []
        for i, g in enumerate(task):
            if self.projection == "gradient" and subs is not None:
                g = relaxed_gradient(subs[i], g, alphas[i])
            if extra is not None:
                g = g + extra[i]
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / (1 - self.beta1**self.t)
            vhat = self.v[i] / (1 - self.beta2**self.t)
            direction = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * params[i]
            if self.projection == "update" and subs is not None:
                direction = relaxed_gradient(subs[i], direction, alphas[i])
            new.append(params[i] - self.lr * direction)
        return with_adapters(model, new)


def make_optimizer(name: str, lr: float, adam_projection: str = "update"):
    if name == "sgd":
        return SGD(lr)
    if name == "adamw":
        return AdamW(lr, projection=adam_projection)
    raise ValueError(f"unknown optimizer {name!r}")


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int, epochs: int):
    """Row indices of every minibatch: a fresh permutation per epoch, last partial batch kept."""
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]
