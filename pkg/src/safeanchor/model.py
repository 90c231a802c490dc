"""Frozen two-layer tanh network with low-rank adapters and a softmax head.

Orientation: inputs are column vectors and layer ``i`` computes
``h_i = tanh((W_i + B_i A_i) h_{i-1} + bias_i)``. A frozen linear head maps
the last hidden state to class logits. Only the adapter pairs ``(B_i, A_i)``
are trained after alignment.

Batches are handled row-wise (``X`` has shape ``(n, k)``), so the matrix
products below are written as ``X @ M.T``.

Adapter parameters of one layer are flattened as ``vec(B)`` followed by
``vec(A)``, each column-major. That layout is tagged ``LAYOUT`` in
checkpoints and never changes within a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .linalg import ShapeError

LAYOUT = "vecB|vecA;column-major"
CHECKPOINT_VERSION = 1


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterLayer:
    w: np.ndarray  # (d, k) frozen
    bias: np.ndarray  # (d,) frozen
    b: np.ndarray  # (d, r)
    a: np.ndarray  # (r, k)

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def n_params(self) -> int:
        return self.b.size + self.a.size

    def effective_weight(self) -> np.ndarray:
        return self.w + self.b @ self.a


@dataclass(frozen=True)
class AdapterModel:
    layers: tuple[AdapterLayer, ...]
    head: np.ndarray  # (classes, d_last) frozen
    head_bias: np.ndarray  # (classes,) frozen
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_classes(self) -> int:
        return self.head.shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[1]

    def adapter_sizes(self) -> list[int]:
        return [layer.n_params for layer in self.layers]


def _frozen(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    x.setflags(write=False)
    return x


def init_base(rng: np.random.Generator, dims=(32, 32, 32), n_classes: int = 8, rank: int = 4) -> AdapterModel:
    """Random (pre-alignment) base with zeroed adapters."""
    layers = []
    for k, d in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k))
        layers.append(AdapterLayer(w, np.zeros(d), np.zeros((d, rank)), np.zeros((rank, k))))
    head = rng.normal(0.0, 1.0 / np.sqrt(dims[-1]), size=(n_classes, dims[-1]))
    return AdapterModel(tuple(layers), head, np.zeros(n_classes))


def freeze(model: AdapterModel) -> AdapterModel:
    """Mark every base array read-only so later code cannot mutate it."""
    layers = tuple(
        AdapterLayer(_frozen(l.w), _frozen(l.bias), l.b.copy(), l.a.copy()) for l in model.layers
    )
    return AdapterModel(layers, _frozen(model.head), _frozen(model.head_bias), dict(model.meta))


def init_adapters(model: AdapterModel, rng: np.random.Generator, scale: float = 0.05) -> AdapterModel:
    """Fresh adapters: B = 0, A ~ U(-scale, scale), so the initial delta BA is zero."""
    layers = []
    for l in model.layers:
        r, k = l.a.shape
        layers.append(replace(l, b=np.zeros_like(l.b), a=rng.uniform(-scale, scale, size=(r, k))))
    return replace(model, layers=tuple(layers))


def base_checksum(model: AdapterModel) -> str:
    import hashlib

    h = hashlib.sha256()
    for l in model.layers:
        h.update(np.ascontiguousarray(l.w).tobytes())
        h.update(np.ascontiguousarray(l.bias).tobytes())
    h.update(np.ascontiguousarray(model.head).tobytes())
    h.update(np.ascontiguousarray(model.head_bias).tobytes())
    return h.hexdigest()


# -- flatten / unflatten -----------------------------------------------------


def flatten_adapter(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.concatenate([b.ravel(order="F"), a.ravel(order="F")])


def unflatten_adapter(vec: np.ndarray, d: int, r: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (d * r + r * k,):
        raise ShapeError(f"flat adapter of length {vec.shape} does not match d={d}, r={r}, k={k}")
    b = vec[: d * r].reshape((d, r), order="F")
    a = vec[d * r :].reshape((r, k), order="F")
    return b.copy(), a.copy()


def flatten_model(model: AdapterModel) -> list[np.ndarray]:
    return [flatten_adapter(l.b, l.a) for l in model.layers]


def with_adapters(model: AdapterModel, flats: list[np.ndarray]) -> AdapterModel:
    if len(flats) != len(model.layers):
        raise ShapeError(f"expected {len(model.layers)} layer vectors, got {len(flats)}")
    layers = []
    for l, v in zip(model.layers, flats):
        d, r = l.b.shape
        b, a = unflatten_adapter(v, d, r, l.a.shape[1])
        layers.append(replace(l, b=b, a=a))
    return replace(model, layers=tuple(layers))


def apply_update(model: AdapterModel, updates: list[np.ndarray], lr: float) -> AdapterModel:
    """delta_i <- delta_i - lr * update_i for every layer; frozen arrays are shared, not copied."""
    if len(updates) != len(model.layers):
        raise ShapeError(f"expected {len(model.layers)} layer updates, got {len(updates)}")
    layers = []
    for l, u in zip(model.layers, updates):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (l.n_params,):
            raise ShapeError(f"update of shape {u.shape} does not match adapter size {l.n_params}")
        d, r = l.b.shape
        nb = d * r
        b = l.b - lr * u[:nb].reshape((d, r), order="F")
        a = l.a - lr * u[nb:].reshape(l.a.shape, order="F")
        layers.append(replace(l, b=b, a=a))
    return replace(model, layers=tuple(layers))


# -- forward / backward ------------------------------------------------------


def _as_batch(model: AdapterModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input dim {model.input_dim}")
    return x, single


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(model: AdapterModel, x: np.ndarray):
    hs = [x]
    h = x
    for l in model.layers:
        h = np.tanh(h @ l.effective_weight().T + l.bias)
        hs.append(h)
    logits = h @ model.head.T + model.head_bias
    return hs, logits


def forward(model: AdapterModel, x) -> np.ndarray:
    """Class probabilities for one input (vector) or a batch (rows)."""
    x, single = _as_batch(model, x)
    _, logits = _forward_cache(model, x)
    p = softmax(logits)
    return p[0] if single else p


def logits(model: AdapterModel, x) -> np.ndarray:
    x, single = _as_batch(model, x)
    _, z = _forward_cache(model, x)
    return z[0] if single else z


def _check_labels(model: AdapterModel, y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise LabelError(f"labels must be {n} integers, got {y!r}")
    if np.any(y < 0) or np.any(y >= model.n_classes):
        raise LabelError(f"label out of range [0, {model.n_classes})")
    return y


def _hidden_deltas(model: AdapterModel, hs, dlogits: np.ndarray) -> list[np.ndarray]:
    """Gradient of the objective w.r.t. each layer's pre-activation, given d/dlogits."""
    deltas = [None] * len(model.layers)
    dh = dlogits @ model.head
    for i in range(len(model.layers) - 1, -1, -1):
        dz = dh * (1.0 - hs[i + 1] ** 2)
        deltas[i] = dz
        if i:
            dh = dz @ model.layers[i].effective_weight()
    return deltas


def backprop_adapters(model: AdapterModel, x, dlogits: np.ndarray, per_example: bool = False):
    """Adapter gradients of an objective whose logit gradient is ``dlogits``.

    With ``per_example=False`` the rows are summed; callers pass already
    averaged ``dlogits`` for mean losses. With ``per_example=True`` each layer
    gets an ``(n, |delta_i|)`` array.
    """
    x, _ = _as_batch(model, x)
    hs, _ = _forward_cache(model, x)
    return _backprop(model, hs, np.atleast_2d(dlogits), per_example)


def _backprop(model, hs, dlogits, per_example):
    deltas = _hidden_deltas(model, hs, dlogits)
    out = []
    for i, l in enumerate(model.layers):
        dz, h = deltas[i], hs[i]
        ah = h @ l.a.T  # (n, r)
        bdz = dz @ l.b  # (n, r)
        if per_example:
            n = dz.shape[0]
            gb = (ah[:, :, None] * dz[:, None, :]).reshape(n, -1)  # col-major of dz ah^T
            ga = (h[:, :, None] * bdz[:, None, :]).reshape(n, -1)  # col-major of B^T dz h^T
            out.append(np.concatenate([gb, ga], axis=1))
        else:
            gb = dz.T @ ah
            ga = bdz.T @ h
            out.append(flatten_adapter(gb, ga))
    return out


def grad_log_likelihood(model: AdapterModel, x, y) -> list[np.ndarray]:
    """Per-layer gradient of log p(y|x) w.r.t. the flattened adapters (frozen weights excluded)."""
    xb, _ = _as_batch(model, x)
    if xb.shape[0] != 1:
        raise ShapeError("grad_log_likelihood takes a single example; use per_example_log_lik_grads")
    y = _check_labels(model, y, 1)
    hs, z = _forward_cache(model, xb)
    d = -softmax(z)
    d[0, y[0]] += 1.0
    return _backprop(model, hs, d, per_example=False)


def per_example_log_lik_grads(model: AdapterModel, x, y) -> list[np.ndarray]:
    """Gradients of log p(y_n|x_n) for every row, one ``(n, |delta_i|)`` array per layer."""
    xb, _ = _as_batch(model, x)
    y = _check_labels(model, y, xb.shape[0])
    hs, z = _forward_cache(model, xb)
    d = -softmax(z)
    d[np.arange(len(y)), y] += 1.0
    return _backprop(model, hs, d, per_example=True)


def task_loss(model: AdapterModel, x, y) -> float:
    xb, _ = _as_batch(model, x)
    y = _check_labels(model, y, xb.shape[0])
    p = forward(model, xb)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(y)), y], 1e-300))))


def grad_task_loss(model: AdapterModel, x, y, weights=None) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and its per-layer adapter gradient.

    ``weights`` (optional, per example) turn the mean into a weighted sum with
    the given coefficients; they default to 1/n.
    """
    xb, _ = _as_batch(model, x)
    y = _check_labels(model, y, xb.shape[0])
    n = len(y)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    hs, z = _forward_cache(model, xb)
    p = softmax(z)
    loss = float(-np.sum(w * np.log(np.maximum(p[np.arange(n), y], 1e-300))))
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    return loss, _backprop(model, hs, d * w[:, None], per_example=False)


def grad_base_loss(model: AdapterModel, x, y, smoothing: float = 0.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy gradient w.r.t. the base weights (used only for alignment).

    ``smoothing`` mixes the one-hot target with the uniform distribution.
    """
    xb, _ = _as_batch(model, x)
    y = _check_labels(model, y, xb.shape[0])
    n = len(y)
    hs, z = _forward_cache(model, xb)
    p = softmax(z)
    target = np.full_like(p, smoothing / model.n_classes)
    target[np.arange(n), y] += 1.0 - smoothing
    loss = float(-np.mean(np.sum(target * np.log(np.maximum(p, 1e-300)), axis=1)))
    d = (p - target) / n
    grads = {"head": d.T @ hs[-1], "head_bias": d.sum(axis=0)}
    deltas = _hidden_deltas(model, hs, d)
    for i in range(len(model.layers)):
        grads[f"w{i}"] = deltas[i].T @ hs[i]
        grads[f"bias{i}"] = deltas[i].sum(axis=0)
    return loss, grads


def update_base(model: AdapterModel, steps: dict[str, np.ndarray]) -> AdapterModel:
    """Add ``steps`` to the base arrays (alignment phase only; fails on a frozen model)."""
    if not model.layers[0].w.flags.writeable:
        raise RuntimeError("base weights are frozen")
    layers = []
    for i, l in enumerate(model.layers):
        layers.append(replace(l, w=l.w + steps[f"w{i}"], bias=l.bias + steps[f"bias{i}"]))
    return replace(
        model,
        layers=tuple(layers),
        head=model.head + steps["head"],
        head_bias=model.head_bias + steps["head_bias"],
    )


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: AdapterModel, path) -> None:
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "layout": np.array(LAYOUT),
        "n_layers": np.array(len(model.layers)),
        "head": np.asarray(model.head),
        "head_bias": np.asarray(model.head_bias),
    }
    for i, l in enumerate(model.layers):
        arrays[f"w{i}"] = np.asarray(l.w)
        arrays[f"bias{i}"] = np.asarray(l.bias)
        arrays[f"b{i}"] = l.b
        arrays[f"a{i}"] = l.a
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> AdapterModel:
    with np.load(Path(path), allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if str(z["layout"]) != LAYOUT:
            raise ValueError(f"unknown adapter layout {str(z['layout'])!r}")
        layers = []
        for i in range(int(z["n_layers"])):
            layers.append(
                AdapterLayer(_frozen(z[f"w{i}"]), _frozen(z[f"bias{i}"]), z[f"b{i}"].copy(), z[f"a{i}"].copy())
            )
        return AdapterModel(tuple(layers), _frozen(z["head"]), _frozen(z["head_bias"]))
