"""Shared oracles and fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from autospikformer import tensor as tc

FD_STEP = 1e-3
FD_RTOL = 1e-3


def numeric_grad(fn, tensors, h: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` w.r.t. each tensor's data."""
    out = []
    with tc.no_grad():
        for t in tensors:
            g = np.zeros_like(t.data, dtype=np.float64)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = float(fn().data)
                flat[i] = old - h
                fm = float(fn().data)
                flat[i] = old
                g.reshape(-1)[i] = (fp - fm) / (2 * h)
            out.append(g)
    return out


def analytic_grad(fn, tensors) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.astype(np.float64) for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error; zero when both are exactly zero."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def assert_gradcheck(fn, tensors, h: float = FD_STEP, rtol: float = FD_RTOL) -> float:
    """Compare backward against central differences; return the worst error."""
    ana = analytic_grad(fn, tensors)
    num = numeric_grad(fn, tensors, h)
    worst = 0.0
    for t, a, n in zip(tensors, ana, num):
        assert a.shape == n.shape
        err = relative_error(a, n)
        worst = max(worst, err)
        assert err <= rtol, f"gradient of {t.name or t.shape}: rel err {err:.2e}"
    return worst


def probe(out: tc.Tensor, seed: int = 7) -> tc.Tensor:
    """Random linear functional of ``out`` so every output element matters."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return tc.tsum(tc.mul(out, tc.Tensor(r, dtype=np.float64)))


def param64(rng: np.random.Generator, *shape, scale: float = 1.0, name: str = "") -> tc.Tensor:
    return tc.Tensor(rng.normal(0.0, scale, shape), requires_grad=True, dtype=np.float64, name=name)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ acceptance log

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``record(n, ok, detail)`` stores one verdict line per criterion."""
    log = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        log[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE_KEY, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for n in sorted(log):
            terminalreporter.write_line(log[n])
