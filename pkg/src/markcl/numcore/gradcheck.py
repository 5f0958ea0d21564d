"""Central finite-difference check of reverse-mode gradients."""
import numpy as np

from .tensor import backward, float64_mode


def grad_check(forward_fn, params, eps=1e-6, max_samples=None, seed=0):
    """Max relative error between autodiff and central differences.

    ``forward_fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. The check runs in float64; parameter storage is restored
    afterwards. With ``max_samples`` only that many coordinates (sampled
    uniformly over all parameters) are probed.
    """
    params = list(params)
    saved = [(p.data, p.grad) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with float64_mode():
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
            backward(forward_fn())
            analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

            coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
            if max_samples is not None and max_samples < len(coords):
                pick = rng.choice(len(coords), size=max_samples, replace=False)
                coords = [coords[k] for k in sorted(pick)]
            for i, j in coords:
                flat = params[i].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + eps
                up = forward_fn().item()
                flat[j] = orig - eps
                down = forward_fn().item()
                flat[j] = orig
                g_fd = (up - down) / (2 * eps)
                g_ad = analytic[i].reshape(-1)[j]
                err = abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)
                worst = max(worst, err)
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data, p.grad = data, grad
    return worst
