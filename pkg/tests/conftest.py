import numpy as np
import pytest

from layerlock import tensor as T


def finite_difference(fn, arrays, h=1e-6):
    """Central finite-difference gradients of a scalar function.

    fn takes a dict name -> ndarray and returns a float. Returns a dict
    name -> gradient array of the same shapes.
    """
    grads = {}
    for name, base in arrays.items():
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def check_grads(fn_tensor, arrays, h=1e-6, rtol=1e-6, atol=1e-8):
    """Compare autodiff gradients of fn_tensor against finite differences.

    fn_tensor maps a dict name -> Tensor to a scalar Tensor.
    """
    params = {n: T.Tensor(a.copy(), requires_grad=True) for n, a in arrays.items()}
    loss = fn_tensor(params)
    grads = T.backward(loss, params)

    def fn_np(arrs):
        consts = {n: T.Tensor(a) for n, a in arrs.items()}
        with T.no_grad():
            return float(fn_tensor(consts).data)

    fd = finite_difference(fn_np, {n: a.copy() for n, a in arrays.items()}, h=h)
    for name in arrays:
        got = grads.get(name, np.zeros_like(arrays[name]))
        np.testing.assert_allclose(got, fd[name], rtol=rtol, atol=atol,
                                   err_msg=f"gradient mismatch for {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(20260824)
