"""Finite-difference verification of tape gradients.

Runs the loss twice per probed entry (central differences) and compares with
the analytic gradient under rel = |fd - an| / max(1e-4, |fd|, |an|). Checks
are meant to run on float64 parameters: float32 rounding noise is the same
order as the 1e-3 tolerance for deep composites.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    rng: np.random.Generator,
    eps: float = 1e-3,
    samples_per_tensor: int = 5,
) -> dict[str, float]:
    """Max relative error per parameter tensor.

    `loss_fn` must be a deterministic closure over `params` (same batch every
    call). Entries are sampled per tensor; probing every entry of a model is
    two forward passes per scalar and is not tractable.
    """
    for _, p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    worst: dict[str, float] = {}
    for name, p in params:
        if p.grad is None:
            raise AssertionError(f"no gradient reached parameter {name!r}")
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(samples_per_tensor, n), replace=False)
        worst_rel = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            lp = float(loss_fn().data)
            flat[i] = keep - eps
            lm = float(loss_fn().data)
            flat[i] = keep
            fd = (lp - lm) / (2.0 * eps)
            an = float(gflat[i])
            rel = abs(fd - an) / max(1e-4, abs(fd), abs(an))
            worst_rel = max(worst_rel, rel)
        worst[name] = worst_rel
    return worst


def assert_gradients_close(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    rng: np.random.Generator,
    tol: float = 1e-3,
    eps: float = 1e-3,
    samples_per_tensor: int = 5,
) -> dict[str, float]:
    report = check_gradients(loss_fn, params, rng, eps, samples_per_tensor)
    bad = {k: v for k, v in report.items() if v > tol}
    if bad:
        raise AssertionError(f"gradient check failed (tol={tol}): {bad}")
    return report
