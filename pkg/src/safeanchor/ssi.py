"""Safety subspace identification.

The empirical Fisher of each adapter layer is accumulated from per-example
log-likelihood gradients on the calibration set, eigendecomposed, and
truncated to the leading eigenvectors that explain a fraction ``rho`` of the
total variance. After each domain the freshly computed basis is merged with
the previous one by a truncated SVD of the concatenated columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import ShapeError, SymEigResult, sym_eig, thin_svd
from .model import AdapterModel, per_example_log_lik_grads

ZERO_EIG_REL = 1e-12
SUBSPACE_VERSION = 1


@dataclass(frozen=True)
class SafetySubspace:
    layer: int
    basis: np.ndarray  # (|delta_i|, k_s), orthonormal columns
    eigenvalues: np.ndarray  # retained spectrum (squared singular values after a merge)
    fisher_trace: float

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]


def empty_subspace(layer: int, dim: int) -> SafetySubspace:
    return SafetySubspace(layer, np.zeros((dim, 0)), np.zeros(0), 0.0)


def layer_gradients(model: AdapterModel, calib) -> list[np.ndarray]:
    """Per-example log-likelihood gradients on ``calib`` (``(N_s, |delta_i|)`` per layer)."""
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    return per_example_log_lik_grads(model, calib.x, calib.y)


def fisher_from_grads(g: np.ndarray) -> np.ndarray:
    f = g.T @ g / g.shape[0]
    return 0.5 * (f + f.T)


def accumulate_fisher(model: AdapterModel, calib, layer: int) -> np.ndarray:
    """F_i = (1/N_s) sum_n g_n g_n^T with g_n = d log p(y_n|x_n) / d delta_i."""
    return fisher_from_grads(layer_gradients(model, calib)[layer])


def accumulate_fishers(model: AdapterModel, calib) -> list[np.ndarray]:
    return [fisher_from_grads(g) for g in layer_gradients(model, calib)]


def _truncation_rank(values: np.ndarray, rho: float) -> int:
    """Smallest k with sum(values[:k]) / sum(values) >= rho; 0 for a numerically zero spectrum."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
    if v.size == 0 or v[0] <= 0.0:
        return 0
    v = np.where(v < ZERO_EIG_REL * v[0], 0.0, v)
    frac = np.cumsum(v) / v.sum()
    # ties at exactly rho stop the scan; the slack absorbs summation rounding
    return int(np.searchsorted(frac, rho - 1e-12) + 1)


def select_basis(eig: SymEigResult, rho: float, layer: int = 0) -> SafetySubspace:
    k = _truncation_rank(eig.eigenvalues, rho)
    trace = float(np.clip(eig.eigenvalues, 0.0, None).sum())
    return SafetySubspace(layer, eig.eigenvectors[:, :k].copy(), eig.eigenvalues[:k].copy(), trace)


def identify(model: AdapterModel, calib, rho: float, method: str = "jacobi") -> tuple[list[SafetySubspace], list[np.ndarray], list[np.ndarray]]:
    """Run SSI on every layer. Returns subspaces, the Fishers, and the raw gradients."""
    grads = layer_gradients(model, calib)
    fishers = [fisher_from_grads(g) for g in grads]
    subs = [select_basis(sym_eig(f, method=method), rho, layer=i) for i, f in enumerate(fishers)]
    return subs, fishers, grads


def projection_apply(sub: SafetySubspace, g) -> np.ndarray:
    """Pi g = V (V^T g) without forming the projector."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (sub.dim,):
        raise ShapeError(f"vector of shape {g.shape} does not match subspace dim {sub.dim}")
    if sub.rank == 0:
        return np.zeros_like(g)
    return sub.basis @ (sub.basis.T @ g)


def merge_subspaces(old: SafetySubspace, fresh: SafetySubspace, rho: float, method: str = "jacobi") -> SafetySubspace:
    """Concatenate [V_old | V_fresh], take a thin SVD and keep the left singular
    vectors whose squared singular values reach ``rho`` of the total."""
    if old.dim != fresh.dim:
        raise ShapeError(f"cannot merge subspaces of dims {old.dim} and {fresh.dim}")
    if old.layer != fresh.layer:
        raise ShapeError(f"cannot merge layer {old.layer} with layer {fresh.layer}")
    stacked = np.concatenate([old.basis, fresh.basis], axis=1)
    if stacked.shape[1] == 0:
        return empty_subspace(old.layer, old.dim)
    svd = thin_svd(stacked, method)
    var = svd.singular_values**2
    k = _truncation_rank(var, rho)
    return SafetySubspace(old.layer, svd.u[:, :k].copy(), var[:k].copy(), fresh.fisher_trace)


def eigen_spectrum_report(eig: SymEigResult, rho_grid=(0.5, 0.8, 0.85, 0.9, 0.95, 0.99)) -> dict:
    values = np.clip(eig.eigenvalues, 0.0, None)
    total = values.sum()
    curve = (np.cumsum(values) / total).tolist() if total > 0 else [0.0] * len(values)
    return {
        "eigenvalues": values.tolist(),
        "cumulative": curve,
        "k_s": {f"{rho:.2f}": _truncation_rank(values, rho) for rho in rho_grid},
    }


def save_subspaces(subs: list[SafetySubspace], path) -> None:
    arrays = {"format_version": np.array(SUBSPACE_VERSION), "n_layers": np.array(len(subs))}
    for s in subs:
        i = s.layer
        arrays[f"layer{i}_basis"] = s.basis
        arrays[f"layer{i}_eigenvalues"] = s.eigenvalues
        arrays[f"layer{i}_trace"] = np.array(s.fisher_trace)
        arrays[f"layer{i}_k"] = np.array(s.rank)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_subspaces(path) -> list[SafetySubspace]:
    with np.load(Path(path), allow_pickle=False) as z:
        if int(z["format_version"]) != SUBSPACE_VERSION:
            raise ValueError(f"unsupported subspace file version {int(z['format_version'])}")
        out = []
        for i in range(int(z["n_layers"])):
            basis = z[f"layer{i}_basis"].copy()
            if basis.shape[1] != int(z[f"layer{i}_k"]):
                raise ValueError(f"layer {i}: stored rank does not match basis")
            out.append(SafetySubspace(i, basis, z[f"layer{i}_eigenvalues"].copy(), float(z[f"layer{i}_trace"])))
        return out
