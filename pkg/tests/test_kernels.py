import os
import subprocess
import sys

import numpy as np
import pytest

from scdl import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def direct_conv(x, w, b, stride):
    # textbook loops over the zero-padded input
    N, C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    Ho, Wo = kernels.conv_out_size(H, stride), kernels.conv_out_size(W, stride)
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


SHAPES = [((2, 3, 8, 8), 4, 1), ((1, 2, 7, 5), 3, 2), ((3, 1, 6, 6), 2, 2), ((1, 4, 1, 1), 2, 1)]


@pytest.mark.parametrize("shape,out_ch,stride", SHAPES)
def test_numpy_forward_matches_loops(shape, out_ch, stride):
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    w = rng.normal(size=(out_ch, shape[1], 3, 3))
    b = rng.normal(size=out_ch)
    np.testing.assert_allclose(kernels.conv2d_forward_numpy(x, w, b, stride), direct_conv(x, w, b, stride),
                               atol=1e-12)


@needs_numba
@pytest.mark.parametrize("shape,out_ch,stride", SHAPES)
def test_numba_matches_numpy(shape, out_ch, stride):
    rng = np.random.default_rng(1)
    x = rng.normal(size=shape)
    w = rng.normal(size=(out_ch, shape[1], 3, 3))
    b = rng.normal(size=out_ch)
    fwd_np = kernels.conv2d_forward_numpy(x, w, b, stride)
    fwd_nb = kernels.conv2d_forward_numba(x, w, b, stride)
    np.testing.assert_allclose(fwd_nb, fwd_np, atol=1e-12)
    g = rng.normal(size=fwd_np.shape)
    for a, c in zip(kernels.conv2d_backward_numpy(x, w, g, stride),
                    kernels.conv2d_backward_numba(x, w, g, stride)):
        np.testing.assert_allclose(c, a, atol=1e-12)


@needs_numba
def test_numba_skips_input_gradient():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=(1, 3, 6, 6))
    gx, gw, gb = kernels.conv2d_backward_numba(x, w, g, 1, need_gx=False)
    assert gx is None
    _, gw_ref, gb_ref = kernels.conv2d_backward_numpy(x, w, g, 1)
    np.testing.assert_allclose(gw, gw_ref, atol=1e-12)
    np.testing.assert_allclose(gb, gb_ref, atol=1e-12)


def test_env_flag_selects_numpy():
    code = "from scdl import kernels; print(kernels.backend_name())"
    env = dict(os.environ, SCDL_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["SCDL_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("numba" if kernels.HAVE_NUMBA else "numpy")
