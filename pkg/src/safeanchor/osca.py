"""Orthogonal safety-constrained adaptation.

The task gradient of each layer is split into its component inside the
safety subspace and the orthogonal remainder; the in-subspace part is scaled
by a relaxation coefficient ``alpha`` in [0, 1]. The anchor gradient is added
after projection and is never projected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError
from .ssi import SafetySubspace, projection_apply

MODES = ("strict", "adaptive", "off")


@dataclass(frozen=True)
class ProjectionPolicy:
    mode: str = "adaptive"
    lam: float = 0.5
    trace_normalize: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown projection mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def alphas(self, subspaces: list[SafetySubspace]) -> list[float]:
        """One relaxation coefficient per layer."""
        if self.mode == "strict":
            return [0.0] * len(subspaces)
        if self.mode == "off":
            return [1.0] * len(subspaces)
        traces = [s.fisher_trace for s in subspaces]
        if self.trace_normalize:
            top = max(traces) if traces else 0.0
            traces = [t / top if top > 0 else 0.0 for t in traces]
        return [relaxation_coefficient(t, self.lam) for t in traces]


def relaxation_coefficient(fisher_trace: float, lam: float) -> float:
    """alpha = max(0, 1 - lam * tr(F)), clamped to [0, 1]."""
    if fisher_trace < 0:
        raise ValueError(f"Fisher trace must be non-negative, got {fisher_trace}")
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return float(min(1.0, max(0.0, 1.0 - lam * fisher_trace)))


def project_orthogonal(sub: SafetySubspace, g) -> np.ndarray:
    """g - V V^T g. An empty subspace returns g unchanged."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (sub.dim,):
        raise ShapeError(f"vector of shape {g.shape} does not match subspace dim {sub.dim}")
    if sub.rank == 0:
        return g.copy()
    return g - projection_apply(sub, g)


def relaxed_gradient(sub: SafetySubspace, g, alpha: float) -> np.ndarray:
    """(g - Pi g) + alpha * Pi g."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (sub.dim,):
        raise ShapeError(f"vector of shape {g.shape} does not match subspace dim {sub.dim}")
    if sub.rank == 0 or alpha == 1.0:
        return g.copy()
    return g - (1.0 - alpha) * projection_apply(sub, g)


def compose_update(sub: SafetySubspace, g_task, a_anchor, alpha: float) -> np.ndarray:
    """Relaxed task gradient plus the (unprojected) anchor gradient."""
    a_anchor = np.asarray(a_anchor, dtype=np.float64)
    if a_anchor.shape != (sub.dim,):
        raise ShapeError(f"anchor gradient of shape {a_anchor.shape} does not match dim {sub.dim}")
    return relaxed_gradient(sub, g_task, alpha) + a_anchor
