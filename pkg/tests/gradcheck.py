"""Central finite differences on a sample of scalar parameters."""

import numpy as np
import torch


def sampled_gradient_errors(model, loss_fn, rng, count=20, eps=1e-6, must_include=()):
    """Relative errors between autograd and central differences.

    ``must_include`` lists parameter-name prefixes of which at least one
    entry is always sampled (e.g. the pooling or gating path).
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    picks = []
    for prefix in must_include:
        cands = [(n, p) for n, p in named if n.startswith(prefix)]
        n, p = cands[int(rng.integers(len(cands)))]
        picks.append((n, p, int(rng.integers(p.numel()))))
    sizes = np.array([p.numel() for _, p in named], dtype=float)
    while len(picks) < count:
        i = int(rng.choice(len(named), p=sizes / sizes.sum()))
        n, p = named[i]
        picks.append((n, p, int(rng.integers(p.numel()))))
    errors = []
    with torch.no_grad():
        for name, p, idx in picks:
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[idx])
            orig = float(flat[idx])
            flat[idx] = orig + eps
            up = float(loss_fn())
            flat[idx] = orig - eps
            down = float(loss_fn())
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            scale = max(abs(analytic), abs(numeric), 1e-7)
            errors.append((name, abs(analytic - numeric) / scale))
    return errors
