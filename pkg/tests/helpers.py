"""Test-only numerics: central finite differences for gradient verification."""

import numpy as np
import torch


def sampled_fd_check(loss_fn, tensors, samples_per_tensor=20, eps=1e-5, seed=0):
    """Compare autograd gradients to central finite differences.

    Evaluates loss_fn() (a closure over `tensors`, which must be float64
    leaves or parameters with requires_grad) once with autograd, then perturbs
    up to `samples_per_tensor` randomly chosen coordinates of each tensor for
    the central-difference estimate. Returns the norm-relative error
    ||fd - autograd|| / max(||fd||, ||autograd||) over the sampled coordinates.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.dtype != torch.float64:
            raise ValueError("finite differences need float64 tensors")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [t.grad.detach().clone() for t in tensors]

    fd_vals, an_vals = [], []
    with torch.no_grad():
        for t, grad in zip(tensors, analytic):
            flat = t.reshape(-1)
            n = flat.numel()
            coords = rng.choice(n, size=min(samples_per_tensor, n), replace=False)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_fn())
                flat[i] = orig - eps
                lo = float(loss_fn())
                flat[i] = orig
                fd_vals.append((hi - lo) / (2.0 * eps))
                an_vals.append(float(grad.reshape(-1)[i]))
    fd = np.asarray(fd_vals)
    an = np.asarray(an_vals)
    denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
    return float(np.linalg.norm(fd - an) / denom)
