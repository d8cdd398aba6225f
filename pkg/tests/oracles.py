"""Independent reference implementations used as test oracles."""

import itertools
import numpy as np


def dense_gp(X, y, Xs, lengthscale, signal_var, alpha):
    """GP posterior by explicit matrix inversion and double loops for the kernel."""
    X, Xs = np.atleast_2d(X), np.atleast_2d(Xs)

    def k(a, b):
        return signal_var * np.exp(-0.5 * np.sum((a - b) ** 2) / lengthscale**2)

    K = np.array([[k(a, b) for b in X] for a in X]) + alpha * np.eye(len(X))
    Kinv = np.linalg.inv(K)
    ks = np.array([[k(a, b) for b in Xs] for a in X])
    mean = ks.T @ Kinv @ y
    var = np.array([k(x, x) for x in Xs]) - np.einsum("ij,ik,kj->j", ks, Kinv, ks)
    return mean, var


def quartiles_by_sort(values):
    """Five-number summary with linear interpolation between order statistics."""
    v = sorted(values)
    n = len(v)

    def q(p):
        pos = p * (n - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, n - 1)
        return v[lo] + (pos - lo) * (v[hi] - v[lo])

    return v[0], q(0.25), q(0.5), q(0.75), v[-1]


def central_difference_check(fn, params, eps=1e-6):
    """Worst relative error, over the tensors in ``params``, between autograd
    and central differences: ``|num - ana| / max(|num|, |ana|)`` in the 2-norm.

    Per-tensor norms keep exact-zero gradients (softmax shift invariance makes
    key biases one) from turning round-off into huge ratios; the small step
    keeps a perturbation from crossing a ReLU kink. Use float64 parameters.
    ``fn`` returns a scalar tensor.
    """
    import torch

    loss = fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            num = torch.empty_like(g)
            for idx in itertools.product(*(range(n) for n in p.shape)):
                old = p[idx].item()
                p[idx] = old + eps
                up = fn().item()
                p[idx] = old - eps
                down = fn().item()
                p[idx] = old
                num[idx] = (up - down) / (2 * eps)
            denom = max(num.norm().item(), g.norm().item(), 1e-6)
            worst = max(worst, (num - g).norm().item() / denom)
    return worst
