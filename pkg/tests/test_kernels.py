import importlib

import numpy as np
import pytest

from maskattn import _pykernels as py
from maskattn import kernels

ck = pytest.importorskip("maskattn._ckernels")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_selected_backend():
    assert kernels.BACKEND in ("python", "compiled")


def test_python_backend_can_be_forced(monkeypatch):
    monkeypatch.setenv("MASKATTN_BACKEND", "python")
    try:
        mod = importlib.reload(kernels)
        assert mod.BACKEND == "python" and mod.gelu is py.gelu
    finally:
        monkeypatch.delenv("MASKATTN_BACKEND")
        importlib.reload(kernels)


def test_bad_backend_name(monkeypatch):
    monkeypatch.setenv("MASKATTN_BACKEND", "gpu")
    try:
        with pytest.raises(ImportError):
            importlib.reload(kernels)
    finally:
        monkeypatch.delenv("MASKATTN_BACKEND")
        importlib.reload(kernels)


def test_softmax_agrees(rng):
    x = rng.normal(scale=4.0, size=(3, 5, 7))
    x[0, 0, :3] -= 1e9
    a, b = py.softmax_rows(x), ck.softmax_rows(x)
    assert np.max(np.abs(a - b)) <= 1e-15
    g = rng.normal(size=x.shape)
    assert np.max(np.abs(py.softmax_rows_backward(a, g) - ck.softmax_rows_backward(a, g))) <= 1e-14


def test_gelu_agrees(rng):
    x = np.concatenate([rng.normal(scale=3.0, size=500), [0.0, -40.0, 40.0, -1e300, 1e300]])
    assert np.max(np.abs(py.gelu(x) - ck.gelu(x))) <= 1e-14
    assert np.max(np.abs(py.gelu_grad(x) - ck.gelu_grad(x))) <= 1e-14


@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_col2im_bitwise(rng, stride):
    x = rng.normal(size=(2, 6, 6, 3))
    cols = py.im2col(x, 3, 3, stride, 1)
    assert np.array_equal(cols, ck.im2col(x, 3, 3, stride, 1))
    g = rng.normal(size=cols.shape)
    assert np.array_equal(py.col2im(g, x.shape, 3, 3, stride, 1), ck.col2im(g, x.shape, 3, 3, stride, 1))
