import math

import numpy as np
import pytest

from safeanchor.model import init_base, with_adapters


def random_model(seed: int, adapter_scale: float = 0.3):
    """Small base network with nonzero random adapters."""
    rng = np.random.default_rng(seed)
    model = init_base(rng)
    flats = [adapter_scale * rng.normal(size=l.n_params) for l in model.layers]
    return with_adapters(model, flats)


def loop_forward(model, x):
    """Scalar-loop forward pass: h <- tanh((W + BA) h + bias), softmax(head h + bias)."""
    h = [float(v) for v in x]
    for layer in model.layers:
        d, r = layer.b.shape
        k = layer.a.shape[1]
        out = []
        for i in range(d):
            s = layer.bias[i]
            for j in range(k):
                w = layer.w[i, j]
                for t in range(r):
                    w += layer.b[i, t] * layer.a[t, j]
                s += w * h[j]
            out.append(math.tanh(s))
        h = out
    z = [model.head_bias[c] + sum(model.head[c, j] * h[j] for j in range(len(h))) for c in range(model.head.shape[0])]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    tot = sum(e)
    return np.array([v / tot for v in e])


@pytest.fixture
def model():
    return random_model(0)


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
