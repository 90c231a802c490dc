"""Cumulative safety monitoring: probe refusal rate, threshold trigger and
bounded corrective replay."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import AdapterModel, forward, grad_task_loss
from .tasks import REFUSAL, Dataset

CLASSIFIER_NOISE = 0.079  # 1 - F1 of the external classifier this oracle stands in for
SAFETY_PATHS = ("bypass", "projected")


@dataclass(frozen=True)
class ProbeVerdict:
    stage: int
    refusal_rate: float
    baseline: float
    tau: float
    triggered: bool
    replay_blocks_used: int = 0
    post_replay_rate: float | None = None
    recovered: bool | None = None

    @property
    def threshold(self) -> float:
        return (1.0 - self.tau) * self.baseline

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = self.threshold
        if self.triggered and self.replay_blocks_used == 0:
            d["status"] = "triggered"
        elif self.triggered and self.recovered is False:
            d["status"] = "unrecovered"
        elif self.triggered:
            d["status"] = "recovered"
        else:
            d["status"] = "pass"
        return d


def evaluate_probe(model: AdapterModel, probe: Dataset, noise: float = 0.0, rng: np.random.Generator | None = None) -> float:
    """Fraction of harmful-flagged probes whose argmax is the refusal class.

    ``noise`` > 0 flips each per-example verdict with that probability
    (a stand-in for an imperfect external classifier); it needs ``rng``.
    """
    harm = np.asarray(probe.harmful, dtype=bool)
    if len(probe) == 0 or not np.any(harm):
        raise ValueError("probe set has no harmful-flagged examples")
    refused = np.argmax(forward(model, probe.x[harm]), axis=1) == REFUSAL
    if noise > 0.0:
        if rng is None:
            raise ValueError("a noisy classifier needs an rng")
        flip = rng.random(refused.shape) < noise
        refused = refused ^ flip
    return float(np.mean(refused))


def trigger_decision(s_t: float, s_0: float, tau: float) -> bool:
    """True iff s_t < (1 - tau) * s_0 (strict)."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    return s_t < (1.0 - tau) * s_0


def replay_block(
    model: AdapterModel,
    optimizer,
    domain: Dataset,
    calib: Dataset,
    beta: float,
    steps: int,
    rng: np.random.Generator,
    batch_size: int,
    subs=None,
    alphas=None,
    safety_path: str = "bypass",
) -> AdapterModel:
    """``steps`` updates on L_t(domain batch) + beta * L_safe(calibration batch).

    Each step draws one domain batch and one calibration batch. The domain
    gradient goes through the same OSCA relaxation as domain training. With
    ``safety_path="bypass"`` the safety term is added after relaxation, like
    the anchor gradient; with ``"projected"`` the summed gradient is relaxed.
    """
    if safety_path not in SAFETY_PATHS:
        raise ValueError(f"unknown replay safety path {safety_path!r}")
    for _ in range(steps):
        rd = rng.integers(0, len(domain), size=batch_size)
        rc = rng.integers(0, len(calib), size=batch_size)
        _, g = grad_task_loss(model, domain.x[rd], domain.y[rd])
        extra = None
        if beta != 0.0:
            _, gs = grad_task_loss(model, calib.x[rc], calib.y[rc])
            if safety_path == "projected":
                g = [a + beta * b for a, b in zip(g, gs)]
            else:
                extra = [beta * b for b in gs]
        model = optimizer.step(model, g, extra, subs, alphas)
    return model
