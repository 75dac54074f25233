import os
import subprocess
import sys

import numpy as np
import pytest

from adarank import kernels
from adarank.kernels import _numpy

RNG = np.random.default_rng(77)

HAS_NUMBA = "numba" in kernels.available_backends()

needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba backend unavailable")


def _numba_module():
    from adarank.kernels import _numba
    return _numba


@needs_numba
class TestBackendParity:
    """Both backends compute the same functions; tolerances allow last-ulp
    differences between libm and scipy special-function implementations."""

    def assert_close(self, a, b):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_gelu(self):
        x = np.ascontiguousarray(RNG.standard_normal((16, 8)) * 3)
        self.assert_close(_numpy.gelu(x), _numba_module().gelu(x))

    def test_gelu_vjp(self):
        x = np.ascontiguousarray(RNG.standard_normal((16, 8)) * 3)
        g = np.ascontiguousarray(RNG.standard_normal((16, 8)))
        self.assert_close(_numpy.gelu_vjp(x, g), _numba_module().gelu_vjp(x, g))

    def test_softmax_and_vjp(self):
        x = np.ascontiguousarray(RNG.standard_normal((12, 10)) * 5)
        g = np.ascontiguousarray(RNG.standard_normal((12, 10)))
        ys = _numpy.softmax(x)
        yn = _numba_module().softmax(x)
        self.assert_close(ys, yn)
        self.assert_close(_numpy.softmax_vjp(ys, g), _numba_module().softmax_vjp(yn, g))

    def test_layer_norm_and_vjp(self):
        x = np.ascontiguousarray(RNG.standard_normal((9, 24)) * 2 + 1)
        gain = np.ascontiguousarray(RNG.standard_normal(24))
        bias = np.ascontiguousarray(RNG.standard_normal(24))
        g = np.ascontiguousarray(RNG.standard_normal((9, 24)))
        self.assert_close(_numpy.layer_norm(x, gain, bias, 1e-12),
                          _numba_module().layer_norm(x, gain, bias, 1e-12))
        dx_a, dg_a, db_a = _numpy.layer_norm_vjp(x, gain, g, 1e-12)
        dx_b, dg_b, db_b = _numba_module().layer_norm_vjp(x, gain, g, 1e-12)
        self.assert_close(dx_a, dx_b)
        self.assert_close(dg_a, dg_b)
        self.assert_close(db_a, db_b)

    def test_adam(self):
        def run(mod):
            param = np.linspace(-1, 1, 20)
            grad = np.ascontiguousarray(RNG.standard_normal(20))
            m = np.zeros(20)
            v = np.zeros(20)
            for t in range(1, 4):
                mod.adam_update(param, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, t)
            return param
        state = RNG.bit_generator.state
        a = run(_numpy)
        RNG.bit_generator.state = state
        b = run(_numba_module())
        self.assert_close(a, b)


class TestAdamSemantics:
    def test_first_step_is_signed_lr(self):
        # with bias correction, step 1 moves by ~lr*sign(grad)
        param = np.array([1.0, -2.0])
        grad = np.array([0.3, -0.7])
        m = np.zeros(2)
        v = np.zeros(2)
        _numpy.adam_update(param, grad, m, v, 0.01, 0.9, 0.999, 1e-12, 1)
        np.testing.assert_allclose(param, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-9)

    def test_zero_lr_freezes(self):
        param = np.array([1.0, 2.0])
        before = param.copy()
        _numpy.adam_update(param, np.array([5.0, -3.0]), np.zeros(2), np.zeros(2),
                           0.0, 0.9, 0.999, 1e-8, 1)
        assert np.array_equal(param, before)


class TestDispatch:
    def test_active_backend_listed(self):
        assert kernels.active_backend in kernels.available_backends()

    def test_use_backend_rebinds(self):
        original = kernels.active_backend
        try:
            kernels.use_backend("numpy")
            assert kernels.gelu is _numpy.gelu
            x = np.ascontiguousarray(RNG.standard_normal((3, 3)))
            assert np.array_equal(kernels.softmax(x), _numpy.softmax(x))
        finally:
            kernels.use_backend(original)

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError):
            kernels.use_backend("cuda")

    def test_env_flag_selects_backend(self):
        env = dict(os.environ, ADARANK_BACKEND="numpy")
        out = subprocess.run(
            [sys.executable, "-c",
             "from adarank import kernels; print(kernels.active_backend)"],
            env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numpy"
