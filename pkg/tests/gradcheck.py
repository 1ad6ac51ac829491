"""Central-difference gradient checking against autograd, at float64."""

import numpy as np
import torch


def finite_diff_check(loss_fn, tensors, h=1e-5, rtol=1e-4, max_entries=32, seed=0):
    """Compare autograd gradients of loss_fn() w.r.t. `tensors` against
    central finite differences. Checks a deterministic random subset of
    entries per tensor; returns the worst relative error seen.

    All tensors must be float64 leaves with requires_grad=True, and loss_fn
    must be a pure function of their current values.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(tensors, grads):
        flat = tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.numel()
        idxs = range(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in idxs:
            old = flat[i].item()
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            fd = (up - down) / (2.0 * h)
            ad = gflat[i].item()
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at entry {i}: autograd={ad:.3e} fd={fd:.3e} "
                f"rel={rel:.3e}"
            )
    return worst
