"""Independent reference implementations used to check the package numerics.

Everything here is deliberately written the slow way (Python loops, scalar
arithmetic, brute-force enumeration) so it shares no code with the package.
"""

from __future__ import annotations

import math

import numpy as np

from metashop.numcore import Activation, MlpParams, tree_leaves, tree_map, tree_zeros_like


def _act(kind: Activation, z: float) -> float:
    if kind is Activation.RELU:
        return z if z > 0.0 else 0.0
    if kind is Activation.SIGMOID:
        return 1.0 / (1.0 + math.exp(-z))
    return z


def mlp_forward_loop(params: MlpParams, x) -> list[float]:
    """Per-neuron forward pass with explicit Python loops."""
    h = [float(v) for v in x]
    for layer, act in zip(params.layers, params.activations):
        out = []
        for o in range(layer.out_dim):
            s = float(layer.biases[o]) if layer.biases is not None else 0.0
            for i in range(layer.in_dim):
                s += float(layer.weights[o, i]) * h[i]
            out.append(_act(act, s))
        h = out
    return h


def squared_loss_loop(preds, labels) -> float:
    total = 0.0
    for p, y in zip(preds, labels):
        total += (float(y) - float(p)) ** 2
    return total / len(preds)


def bce_loss_loop(preds, labels, clamp: float = 1e-7) -> float:
    total = 0.0
    for p, y in zip(preds, labels):
        pc = min(max(float(p), clamp), 1.0 - clamp)
        total += float(y) * math.log(pc) + (1.0 - float(y)) * math.log(1.0 - pc)
    return -total / len(preds)


def central_fd_grad(loss_fn, tree, h: float = 1e-4):
    """Central finite differences of ``loss_fn`` w.r.t. every array leaf.

    ``loss_fn`` takes the (mutated-in-place) tree and returns a float. The
    returned tree has the same shape as ``tree`` and holds the FD gradients.
    """
    work = tree_map(lambda a: a.copy(), tree)
    grads = tree_zeros_like(work)
    for p_leaf, g_leaf in zip(tree_leaves(work), tree_leaves(grads)):
        flat_p = p_leaf.reshape(-1)
        flat_g = g_leaf.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_fn(work)
            flat_p[i] = orig - h
            down = loss_fn(work)
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * h)
    return grads


def grads_close(analytic, fd, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    """Leafwise |a - f| <= atol + rtol * |f| over two same-shaped trees."""
    la, lf = tree_leaves(analytic), tree_leaves(fd)
    assert len(la) == len(lf)
    return all(np.allclose(a, f, rtol=rtol, atol=atol) for a, f in zip(la, lf))


def adam_trace_scalar(p0: float, grad_seq, stepsize: float) -> list[float]:
    """Scalar Adam trajectory (beta1=0.9, beta2=0.999, eps=1e-8)."""
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = v = 0.0
    p = p0
    out = []
    for t, g in enumerate(grad_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - stepsize * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# ranking-metric oracles (brute force)
# ---------------------------------------------------------------------------


def rank_candidates(scores: dict[str, float]) -> list[str]:
    """Sort candidate ids by descending score, ties broken by ascending id."""
    return [c for c, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def recall_oracle(ranked: list[str], relevant: set[str], k: int, divide_by_k: bool) -> float | None:
    if not relevant:
        return None
    hits = sum(1 for c in ranked[:k] if c in relevant)
    if divide_by_k:
        return hits / k
    return hits / len(relevant)


def dcg_oracle(gains_in_rank_order, k: int) -> float:
    total = 0.0
    for r, y in enumerate(gains_in_rank_order[:k], start=1):
        total += (2.0 ** float(y) - 1.0) / math.log2(1.0 + r)
    return total


def ndcg_oracle(ranked: list[str], relevance: dict[str, float], k: int) -> float:
    gains = [relevance.get(c, 0.0) for c in ranked]
    ideal = sorted(gains, reverse=True)
    idcg = dcg_oracle(ideal, k)
    if idcg == 0.0:
        return 0.0
    return dcg_oracle(gains, k) / idcg


def mae_loop(preds, labels) -> float:
    total = 0.0
    for p, y in zip(preds, labels):
        total += abs(float(p) - float(y))
    return total / len(preds)
