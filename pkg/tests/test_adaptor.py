import numpy as np
import pytest

from datar.adaptor import InputAdaptor, adapt, perturb
from datar.autodiff import Tensor, grad_check
from datar.errors import BadScale, ShapeMismatch

from oracles import conv2d_loops


def test_lambda_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 8, 8)))
    out = adapt(x, Tensor(rng.standard_normal((1, 1, 5, 5))), Tensor([0.3]), 0.0)
    assert out.data.tobytes() == x.data.tobytes()


def test_zero_weights_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 8, 8)))
    out = InputAdaptor()(x)
    assert out.data.tobytes() == x.data.tobytes()


def test_residual_against_conv_oracle(rng):
    x = rng.standard_normal((1, 8, 8))
    w, b = rng.standard_normal((1, 1, 5, 5)), rng.standard_normal(1)
    out = adapt(Tensor(x), Tensor(w), Tensor(b), 0.005).data
    ref = x + 0.005 * conv2d_loops(x, w, b, padding=2)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_gradient(rng):
    w, b = Tensor(rng.standard_normal((1, 1, 5, 5))), Tensor(rng.standard_normal(1))
    proj = Tensor(rng.standard_normal((1, 8, 8)))
    err = grad_check(lambda x: (adapt(x, w, b, 0.005) * proj).sum(), Tensor(rng.standard_normal((1, 8, 8))))
    assert err < 1e-6


def test_rejects_even_kernel(rng):
    with pytest.raises(ShapeMismatch):
        adapt(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 4, 4))), Tensor([0.0]), 0.1)


def test_perturb_scale_zero_identity(rng):
    x = rng.standard_normal((4, 4))
    assert perturb(x, "gaussian", 0.0, 1) is x


def test_perturb_negative_scale():
    with pytest.raises(BadScale):
        perturb(np.zeros(3), "gaussian", -1.0, 0)


def test_gaussian_moments():
    n = 10 ** 6
    noise = perturb(np.zeros(n), "gaussian", 0.005, 7)
    assert abs(noise.mean()) < 3 * 0.005 / np.sqrt(n)
    assert abs(noise.std() - 0.005) < 0.01 * 0.005


def test_laplacian_moments():
    n = 10 ** 6
    noise = perturb(np.zeros(n), "laplacian", 0.005, 7)
    b = 0.005 / np.sqrt(2)  # Var = 2 b^2 = scale^2, E|x| = b
    assert abs(np.abs(noise).mean() - b) < 0.01 * b
    assert abs(noise.std() - 0.005) < 0.01 * 0.005


def test_perturb_deterministic_and_tensor(rng):
    x = rng.standard_normal((1, 4, 4))
    a = perturb(Tensor(x), "laplacian", 0.1, 3)
    b = perturb(x, "laplacian", 0.1, 3)
    assert isinstance(a, Tensor) and np.array_equal(a.data, b)
