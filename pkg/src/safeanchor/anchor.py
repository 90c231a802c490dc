"""KL anchor between the current model and the previous checkpoint on the
calibration inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AdapterModel, _as_batch, _backprop, _forward_cache, softmax

EPS = 1e-12


def _check_dist(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-8):
        raise ValueError(f"{name} is not a probability distribution")


def kl_forward(p_ref, q_cur) -> float:
    """sum p ln(p / q) with 0 ln 0 = 0 and q floored at 1e-12."""
    p = np.asarray(p_ref, dtype=np.float64)
    q = np.asarray(q_cur, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    _check_dist(p, "p_ref")
    _check_dist(q, "q_cur")
    mask = p > 0
    val = np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], EPS))))
    return float(max(val, 0.0))


def kl_reverse(p_ref, q_cur) -> float:
    return kl_forward(q_cur, p_ref)


@dataclass(frozen=True)
class AnchorReference:
    """Output distributions of the previous checkpoint, keyed by calibration ID."""

    ids: np.ndarray
    probs: np.ndarray

    def rows(self, ids) -> np.ndarray:
        index = {int(i): n for n, i in enumerate(self.ids)}
        try:
            return np.array([index[int(i)] for i in ids], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"no anchor reference for calibration id {exc.args[0]}") from None


def snapshot(model: AdapterModel, calib) -> AnchorReference:
    p = softmax(_forward_cache(model, _as_batch(model, calib.x)[0])[1])
    p.setflags(write=False)
    return AnchorReference(np.asarray(calib.ids).copy(), p)


def anchor_loss_and_grad(
    model: AdapterModel,
    ref: AnchorReference,
    calib,
    batch_ids,
    gamma: float,
    direction: str = "forward",
) -> tuple[float, list[np.ndarray]]:
    """gamma * mean KL over the batch and its adapter gradient (already scaled by gamma)."""
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown KL direction {direction!r}")
    batch_ids = np.asarray(batch_ids)
    ref_rows = ref.rows(batch_ids)
    x = calib.x[calib.rows(batch_ids)]
    n = len(batch_ids)
    zero = [np.zeros(l.n_params) for l in model.layers]
    if gamma == 0.0 or n == 0:
        return 0.0, zero

    hs, z = _forward_cache(model, x)
    q = softmax(z)
    p = ref.probs[ref_rows]
    if direction == "forward":
        live = q >= EPS
        logq = np.log(np.maximum(q, EPS))
        mask = p > 0
        kl = np.sum(np.where(mask, p * (np.log(np.where(mask, p, 1.0)) - logq), 0.0), axis=1)
        # d/dz of -sum_j p_j log q_j over unclamped j
        pl = np.where(live, p, 0.0)
        dlogits = q * pl.sum(axis=1, keepdims=True) - pl
    else:
        logq = np.log(np.maximum(q, EPS))
        logp = np.log(np.maximum(p, EPS))
        v = logq - logp
        kl = np.sum(q * v, axis=1)
        dlogits = q * (v - np.sum(q * v, axis=1, keepdims=True))
    loss = gamma * float(np.mean(np.maximum(kl, 0.0)))
    grads = _backprop(model, hs, dlogits * (gamma / n), per_example=False)
    return loss, grads
