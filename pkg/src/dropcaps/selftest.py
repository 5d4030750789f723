"""Fast built-in property checks run by ``dropcaps selftest``."""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from . import tensor as T
from .augment import generate_mask, ring_drop_counts
from .dsp import design_butterworth_bandpass
from .gradcheck import check_gradients
from .models import CapsNetSpec, build_capsnet, routing_by_agreement, squash
from .stats import mann_whitney_u


def _gradients() -> str:
    rng = np.random.default_rng(0)
    a = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = T.Tensor(rng.normal(size=(2, 2, 5, 3, 3)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(3, 2, 2, 2, 2)), requires_grad=True)
    bias = T.Tensor(rng.normal(size=3), requires_grad=True)
    spec = T.Conv3dSpec(2, 3, (2, 2, 2), dilation=(2, 1, 1))
    cases = {
        "matmul": (lambda: T.tsum(T.exp(a @ b) * 0.1), [a, b]),
        "softmax": (lambda: T.tsum(T.softmax(a @ b) * T.Tensor(np.arange(8.0).reshape(2, 4))), [a]),
        "conv3d": (lambda: T.tsum(T.conv3d(x, w, bias, spec) ** 2), [x, w, bias]),
        "squash": (lambda: T.tsum(squash(a) * T.Tensor(np.ones((2, 3)) * [1, -2, 3])), [a]),
    }
    worst = 0.0
    for name, (fn, inputs) in cases.items():
        err = max(check_gradients(fn, inputs))
        if err >= 1e-4:
            raise AssertionError(f"{name}: relative error {err:.2e}")
        worst = max(worst, err)
    spec = CapsNetSpec(input_shape=(2, 8, 6, 6), conv_features=(2, 2, 2, 2), conv_kernel=(2, 2, 2),
                       dilations=((1, 1, 1),) * 4, primary_channels=2, capsule_dim=2, n_classes=2, class_dim=2)
    model = build_capsnet(spec, seed=3, dtype=np.float64)
    xin = rng.random((2, 2, 8, 6, 6))
    err = max(check_gradients(lambda: model.loss(model.forward(xin, True, np.random.default_rng(5)),
                                                 np.array([0, 1])), list(model.params.values())))
    if err >= 1e-3:
        raise AssertionError(f"end-to-end CapsNet: relative error {err:.2e}")
    return f"max op error {worst:.1e}, end-to-end {err:.1e}"


def _routing() -> str:
    u_hat = np.random.default_rng(1).normal(size=(2, 3, 2, 4))
    trace: list = []
    v = routing_by_agreement(T.Tensor(u_hat), 3, trace).data
    for c in trace:
        if not np.allclose(c.sum(axis=-1), 1.0, atol=1e-12):
            raise AssertionError("coupling rows do not sum to one")
    norms = np.linalg.norm(v, axis=-1)
    if not np.all((norms > 0) & (norms < 1)):
        raise AssertionError("squashed norms outside (0, 1)")
    return "couplings normalized, norms in (0, 1)"


def _filter() -> str:
    cascade = design_butterworth_bandpass(4, 10.0, 500.0, 2048.0)
    edges = 20 * np.log10(np.abs(cascade.response(np.array([10.0, 500.0]))))
    stop = 20 * np.log10(np.abs(cascade.response(np.array([1.0]))))[0]
    if np.any(np.abs(edges + 3.0) > 0.5) or stop > -20 or not cascade.is_stable():
        raise AssertionError(f"edges {edges} dB, 1 Hz {stop:.1f} dB")
    return f"edges {edges[0]:.2f}/{edges[1]:.2f} dB, 1 Hz {stop:.1f} dB"


def _masks() -> str:
    for rate, counts in ((0.25, (5, 3, 1)), (0.5, (10, 6, 2)), (0.75, (15, 9, 3))):
        if ring_drop_counts(rate) != counts or generate_mask(rate, 0).n_dropped != sum(counts):
            raise AssertionError(f"ring counts wrong at rate {rate}")
    return "ring counts (5,3,1) (10,6,2) (15,9,3)"


def _statistics() -> str:
    checked = 0
    for n, m in itertools.product(range(1, 6), repeat=2):
        vals = np.arange(n + m, dtype=float)[::-1]
        a, b = vals[:n], vals[n:]
        combos = list(itertools.combinations(range(n + m), n))
        ranks = {v: i for i, v in enumerate(sorted(vals))}
        u_obs = sum(ranks[v] for v in a) - n * (n - 1) / 2
        mu = n * m / 2
        us = [sum(c) - n * (n - 1) / 2 for c in combos]
        p = sum(abs(u - mu) >= abs(u_obs - mu) for u in us) / len(us)
        if abs(mann_whitney_u(a, b).p_value - p) > 1e-12:
            raise AssertionError(f"exact p mismatch at n={n}, m={m}")
        checked += 1
    return f"{checked} size pairs match enumeration"


CHECKS: dict[str, Callable[[], str]] = {
    "gradients": _gradients,
    "routing": _routing,
    "filter": _filter,
    "masks": _masks,
    "statistics": _statistics,
}


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, check in CHECKS.items():
        try:
            results.append((name, True, check()))
        except AssertionError as exc:
            results.append((name, False, str(exc)))
    return results
