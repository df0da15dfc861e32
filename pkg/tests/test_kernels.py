import itertools
import os
import subprocess
import sys

import numpy as np
import pytest

from hcseg import kernels
from hcseg.kernels import _im2col_py

compiled = pytest.importorskip("hcseg.kernels._im2col")

CONFIGS = list(itertools.product([1, 3], [1, 2], [0, 1]))


def patch_oracle(x, k, stride, pad):
    """Columns built one patch at a time."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((b, c * k * k, ho * wo), x.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                out[n, :, i * wo + j] = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k].reshape(-1)
    return out


def test_backend_selected():
    assert kernels.BACKEND in ("compiled", "python")


@pytest.mark.parametrize("k,stride,pad", CONFIGS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_backends_agree(rng, k, stride, pad, dtype):
    x = rng.standard_normal((2, 3, 7, 6)).astype(dtype)
    want = patch_oracle(x, k, stride, pad)
    assert np.array_equal(_im2col_py.im2col(x, k, stride, pad), want)
    assert np.array_equal(np.asarray(compiled.im2col(x, k, stride, pad)), want)


@pytest.mark.parametrize("k,stride,pad", CONFIGS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_col2im_is_adjoint(rng, k, stride, pad, dtype):
    """<im2col(x), c> == <x, col2im(c)> for both backends."""
    x = rng.standard_normal((2, 3, 7, 6))
    cols = _im2col_py.im2col(x, k, stride, pad)
    c = rng.standard_normal(cols.shape)
    lhs = (cols * c).sum()
    for impl in (_im2col_py, compiled):
        back = np.asarray(impl.col2im(c.astype(dtype), x.shape, k, stride, pad))
        tol = 1e-4 if dtype == np.float32 else 1e-10
        assert abs((x * back).sum() - lhs) <= tol * max(1.0, abs(lhs))
    a = _im2col_py.col2im(c.astype(dtype), x.shape, k, stride, pad)
    b = np.asarray(compiled.col2im(c.astype(dtype), x.shape, k, stride, pad))
    np.testing.assert_allclose(a, b, rtol=1e-6 if dtype == np.float32 else 1e-12, atol=1e-6)


def test_pure_python_switch():
    env = dict(os.environ, HCSEG_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from hcseg import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
