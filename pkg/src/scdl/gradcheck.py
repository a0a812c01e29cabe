"""Central finite-difference gradient oracle."""
import numpy as np

from .autodiff import Tensor


class NonDeterministicError(RuntimeError):
    pass


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def grad_check_params(loss_fn, params, coords=None, step=1e-6):
    """Compare analytic and central-difference gradients of ``loss_fn()``.

    ``loss_fn`` takes no arguments and closes over the leaf tensors in
    ``params``; their ``.data`` arrays are perturbed in place and restored.
    ``coords`` optionally restricts the check to a list of
    ``(param_index, flat_index)`` pairs.  Returns the max relative error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    base = float(loss.data)
    if float(loss_fn().data) != base:
        raise NonDeterministicError("loss function is not deterministic under fixed inputs")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if coords is None:
        coords = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]

    worst = 0.0
    for k, i in coords:
        flat = params[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        fp = float(loss_fn().data)
        flat[i] = orig - step
        fm = float(loss_fn().data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        err = float(relative_error(analytic[k].reshape(-1)[i], numeric))
        worst = max(worst, err)
    return worst


def grad_check(f, x, step=1e-6):
    """Max relative error between d f(x) / dx and its central difference.

    ``f`` maps a Tensor to a scalar Tensor; ``x`` is an array or Tensor.
    """
    data = x.data if isinstance(x, Tensor) else x
    leaf = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    return grad_check_params(lambda: f(leaf), [leaf], step=step)
