import math

import numpy as np
import pytest

from conftest import random_model
from safeanchor.anchor import anchor_loss_and_grad, kl_forward, kl_reverse, snapshot
from safeanchor.model import flatten_model, with_adapters
from safeanchor.tasks import Dataset


def calib_set(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset("calib", np.arange(100, 100 + n), rng.normal(size=(n, 32)), rng.integers(0, 8, n), np.zeros(n, bool), np.full(n, "benign"))


def direct_kl(p, q):
    total = 0.0
    for a, b in zip(p, q):
        if a > 0:
            total += a * math.log(a / b)
    return total


def test_kl_examples():
    assert kl_forward([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert kl_forward([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    p, q = [0.9, 0.1], [0.5, 0.5]
    assert kl_forward(p, q) == pytest.approx(direct_kl(p, q), abs=1e-14)
    assert kl_reverse(p, q) == pytest.approx(direct_kl(q, p), abs=1e-14)
    assert round(kl_forward(p, q), 4) == 0.3681
    assert round(kl_reverse(p, q), 4) == 0.5108


def test_kl_zero_in_q_is_finite():
    val = kl_forward([0.5, 0.5], [1.0, 0.0])
    assert math.isfinite(val) and val > 10


def test_kl_rejects_bad_input():
    with pytest.raises(ValueError):
        kl_forward([0.5, 0.5], [1.0])
    with pytest.raises(ValueError):
        kl_forward([0.5, 0.6], [0.5, 0.5])


def test_anchor_zero_at_reference():
    model, calib = random_model(0), calib_set()
    ref = snapshot(model, calib)
    loss, grads = anchor_loss_and_grad(model, ref, calib, calib.ids[:6], gamma=0.1)
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert max(np.linalg.norm(g) for g in grads) <= 1e-10


def test_anchor_gamma_zero():
    model, calib = random_model(0), calib_set()
    ref = snapshot(random_model(1), calib)
    loss, grads = anchor_loss_and_grad(model, ref, calib, calib.ids, gamma=0.0)
    assert loss == 0.0
    assert all(not g.any() for g in grads)


def test_anchor_missing_id():
    model, calib = random_model(0), calib_set()
    ref = snapshot(model, calib.subset(np.arange(4)))
    with pytest.raises(KeyError):
        anchor_loss_and_grad(model, ref, calib, calib.ids[5:7], gamma=0.1)


def test_anchor_snapshot_is_read_only():
    ref = snapshot(random_model(0), calib_set())
    with pytest.raises(ValueError):
        ref.probs[0, 0] = 0.5


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_anchor_loss_matches_summation(direction):
    calib = calib_set(8, seed=3)
    ref_model, cur = random_model(2), random_model(3)
    ref = snapshot(ref_model, calib)
    loss, _ = anchor_loss_and_grad(cur, ref, calib, calib.ids, gamma=0.25, direction=direction)
    from safeanchor.model import forward

    p, q = forward(ref_model, calib.x), forward(cur, calib.x)
    kl = [direct_kl(a, b) if direction == "forward" else direct_kl(b, a) for a, b in zip(p, q)]
    assert loss == pytest.approx(0.25 * np.mean(kl), rel=1e-10)
    assert loss > 0


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_anchor_gradient_finite_difference(direction):
    calib = calib_set(10, seed=4)
    ref = snapshot(random_model(5), calib)
    model = random_model(6)
    batch = calib.ids[::2]
    _, grads = anchor_loss_and_grad(model, ref, calib, batch, gamma=0.3, direction=direction)
    flats = flatten_model(model)
    rng = np.random.default_rng(7)
    h = 1e-5
    for layer in range(2):
        for idx in rng.choice(256, size=15, replace=False):
            up = [v.copy() for v in flats]
            dn = [v.copy() for v in flats]
            up[layer][idx] += h
            dn[layer][idx] -= h
            fu = anchor_loss_and_grad(with_adapters(model, up), ref, calib, batch, 0.3, direction)[0]
            fd = anchor_loss_and_grad(with_adapters(model, dn), ref, calib, batch, 0.3, direction)[0]
            num = (fu - fd) / (2 * h)
            err = abs(num - grads[layer][idx])
            assert err <= 1e-8 or err <= 1e-4 * max(abs(num), abs(grads[layer][idx]))
