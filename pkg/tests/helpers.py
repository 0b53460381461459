"""Shared test utilities."""

import torch


def fd_check(fn, params, n_coords=6, eps=1e-6, seed=0, floor=1e-7):
    """Max relative error between autograd and central differences.

    Samples ``n_coords`` coordinates per tensor. Coordinates where both
    gradients are below ``floor`` are exact zeros up to rounding (for
    example attention key biases, which softmax ignores) and are skipped.
    """
    gen = torch.Generator().manual_seed(seed)
    grads = torch.autograd.grad(fn(), params, allow_unused=True)
    worst = 0.0
    checked = 0
    for p, g in zip(params, grads):
        if g is None:
            g = torch.zeros_like(p)
        flat = p.data.view(-1)
        for idx in torch.randint(flat.numel(), (min(n_coords, flat.numel()),), generator=gen).tolist():
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = fn().item()
            flat[idx] = orig - eps
            down = fn().item()
            flat[idx] = orig
            num = (up - down) / (2 * eps)
            ana = g.view(-1)[idx].item()
            scale = max(abs(num), abs(ana))
            if scale < floor:
                continue
            checked += 1
            worst = max(worst, abs(num - ana) / scale)
    assert checked > 0, "no coordinate had a measurable gradient"
    return worst
