"""Shared test utilities: finite-difference gradient checking and small
independent oracles.
"""

import numpy as np


def finite_difference_check(params, loss_fn, eps=1e-5, rng=None,
                            max_per_tensor=None):
    """Max relative error between analytic grads and central differences.

    ``params`` maps names to Tensors; ``loss_fn`` recomputes the scalar
    loss from the current parameter values. Checks every entry unless
    ``max_per_tensor`` caps the sampled count.
    """
    loss = loss_fn()
    for p in params.values():
        p.zero_grad()
    loss.backward()
    worst = 0.0
    worst_name = None
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_per_tensor is not None and n > max_per_tensor:
            assert rng is not None
            idxs = rng.choice(n, size=max_per_tensor, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            fd = (up - down) / (2 * eps)
            an = analytic.reshape(-1)[i]
            # the 1e-6 floor keeps float roundoff in the central difference
            # (|loss| * 1e-16 / eps in absolute terms) from registering as a
            # large relative error on near-zero gradient entries
            denom = max(abs(fd), abs(an), 1e-6)
            err = abs(fd - an) / denom
            if err > worst:
                worst = err
                worst_name = name
    return worst, worst_name


def softmax_oracle(row):
    """Scalar-math exp-normalize, independent of the tensor implementation."""
    import math
    m = max(row)
    exps = [math.exp(v - m) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def brute_force_top2(scores, capacity):
    """Literal simulation of the greedy top-2 capacity rule."""
    n, n_experts = scores.shape
    load = {e: 0 for e in range(n_experts)}
    assignments = []
    dropped = set()
    for tok in range(n):
        ranked = sorted(range(n_experts), key=lambda e: (-scores[tok, e], e))
        got = 0
        for e in ranked[: min(2, n_experts)]:
            if load[e] < capacity:
                load[e] += 1
                assignments.append((tok, e, float(scores[tok, e])))
                got += 1
        if got == 0:
            dropped.add(tok)
    return assignments, dropped


def expert_choice_oracle(scores, capacity):
    """Per-column full-sort selection."""
    n, n_experts = scores.shape
    assignments = []
    for e in range(n_experts):
        ranked = sorted(range(n), key=lambda t: (-scores[t, e], t))
        for t in ranked[:capacity]:
            assignments.append((t, e, float(scores[t, e])))
    return assignments
