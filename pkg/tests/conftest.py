"""Shared generators and brute-force oracles for the test suite.

The oracles here are deliberately naive (explicit enumeration, python
loops, central differences) so they are independent of the implementations
they check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
import torch

from eudparse.conllu import DepGraph, NodeId

LABELS = ("a", "b", "c", "d")


# ---------------------------------------------------------------------------
# Random graph generators (plain python RNG objects passed in)
# ---------------------------------------------------------------------------


def random_plain_graph(rng, n_max=6, parallel=True, with_empties=False):
    """Graph with reserved-symbol-free labels; optional parallel arcs/empties."""
    n = rng.randint(1, n_max)
    empties = []
    if with_empties and rng.random() < 0.6:
        for word in sorted(rng.sample(range(0, n + 1), k=rng.randint(1, 2))):
            empties.append(NodeId(word, 1))
    nodes = [NodeId(w) for w in range(1, n + 1)] + empties
    arcs = []
    for dep in nodes:
        heads = [NodeId(0)] + [x for x in nodes if x != dep]
        for head in rng.sample(heads, k=min(len(heads), rng.randint(0, 2))):
            if head.is_empty and dep.is_empty:
                continue
            n_labels = rng.randint(1, 2 if parallel else 1)
            for label in rng.sample(LABELS, k=n_labels):
                arcs.append((head, dep, label))
    # collapse needs every empty node to have a parent and a child
    for node in empties:
        if not any(d == node for _, d, _ in arcs):
            arcs.append((NodeId(0), node, rng.choice(LABELS)))
        if not any(h == node for h, _, _ in arcs):
            targets = [x for x in nodes if not x.is_empty]
            if not targets:
                targets = [NodeId(1)]
            arcs.append((node, rng.choice(targets), rng.choice(LABELS)))
    return DepGraph(n, empties, arcs)


def random_collapsed_graph(rng, n_max=6):
    """Empty-node-free graph whose labels may carry one `>` composite."""
    n = rng.randint(1, n_max)
    nodes = [NodeId(w) for w in range(1, n + 1)]
    arcs = []
    for dep in nodes:
        heads = [NodeId(0)] + [x for x in nodes if x != dep]
        for head in rng.sample(heads, k=min(len(heads), rng.randint(0, 2))):
            if rng.random() < 0.5:
                label = rng.choice(LABELS)
            else:
                label = f"{rng.choice(LABELS)}>{rng.choice(LABELS)}"
            arcs.append((head, dep, label))
    return DepGraph(n, (), arcs)


# ---------------------------------------------------------------------------
# Tree enumeration oracles
# ---------------------------------------------------------------------------


def all_single_root_heads(n):
    """Yield every head vector (index d-1 -> head of d) of a single-root
    spanning arborescence over words 1..n."""
    for heads in itertools.product(range(0, n + 1), repeat=n):
        if any(heads[d - 1] == d for d in range(1, n + 1)):
            continue
        if sum(1 for h in heads if h == 0) != 1:
            continue
        # reachability from root
        children = {}
        for d in range(1, n + 1):
            children.setdefault(heads[d - 1], []).append(d)
        seen = set()
        stack = [0]
        while stack:
            v = stack.pop()
            for c in children.get(v, ()):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        if len(seen) == n:
            yield heads


def tree_weight(weights, heads):
    return sum(weights[heads[d - 1], d] for d in range(1, len(heads) + 1))


def best_arborescence(weights):
    """(weight, heads) of the best single-root arborescence, by enumeration."""
    n = weights.shape[0] - 1
    best = (-math.inf, None)
    for heads in all_single_root_heads(n):
        w = tree_weight(weights, heads)
        if w > best[0]:
            best = (w, heads)
    return best


def is_projective(heads):
    """True when every arc covers only descendants of its head."""
    n = len(heads)
    children = {}
    for d in range(1, n + 1):
        children.setdefault(heads[d - 1], []).append(d)

    def descendants(v):
        out = set()
        stack = [v]
        while stack:
            u = stack.pop()
            for c in children.get(u, ()):
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    desc = {v: descendants(v) for v in range(0, n + 1)}
    for d in range(1, n + 1):
        h = heads[d - 1]
        lo, hi = min(h, d), max(h, d)
        for between in range(lo + 1, hi):
            if between not in desc[h]:
                return False
    return True


def best_projective_tree(weights):
    """(weight, heads) of the best single-root projective tree, by enumeration."""
    n = weights.shape[0] - 1
    best = (-math.inf, None)
    for heads in all_single_root_heads(n):
        if not is_projective(heads):
            continue
        w = tree_weight(weights, heads)
        if w > best[0]:
            best = (w, heads)
    return best


# ---------------------------------------------------------------------------
# Hand-rolled MFVI oracle (explicit loops, no einsum)
# ---------------------------------------------------------------------------


def mfvi_by_hand(unary, binary, iterations):
    """Literal transcription of the update with explicit index loops."""
    unary = np.asarray(unary, dtype=float)
    m = unary.shape[0]

    def sigmoid(x):
        if x == -math.inf:
            return 0.0
        return 1.0 / (1.0 + math.exp(-x))

    def admissible(i, j):
        return j != 0 and i != j

    q = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            if admissible(i, j):
                q[i, j] = sigmoid(unary[i, j])
    sib = binary.get("sibling")
    cop = binary.get("co-parent")
    gp = binary.get("grandparent")
    for _ in range(iterations):
        f = unary.copy()
        for i in range(m):
            for j in range(m):
                if not admissible(i, j):
                    continue
                s = 0.0
                for k in range(m):
                    if k in (i, j):
                        continue
                    if sib is not None:
                        s += q[i, k] * float(sib[i, j, k])
                    if cop is not None:
                        s += q[k, j] * float(cop[i, j, k])
                    if gp is not None:
                        s += q[j, k] * float(gp[i, j, k])
                        s += q[k, i] * float(gp[k, i, j])
                f[i, j] = unary[i, j] + s
        q_new = np.zeros((m, m))
        for i in range(m):
            for j in range(m):
                if admissible(i, j):
                    q_new[i, j] = sigmoid(f[i, j])
        q = q_new
    return q


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def central_difference_grads(loss_fn, tensors, step=1e-5):
    """Per-tensor central-difference gradients of ``loss_fn()``."""
    grads = {}
    for name, tensor in tensors.items():
        grad = torch.zeros_like(tensor)
        flat = tensor.view(-1)
        gflat = grad.view(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + step
            hi = float(loss_fn())
            flat[idx] = orig - step
            lo = float(loss_fn())
            flat[idx] = orig
            gflat[idx] = (hi - lo) / (2.0 * step)
        grads[name] = grad
    return grads


def relative_error(a, b):
    num = float((a - b).abs().max())
    den = max(float(a.abs().max()), float(b.abs().max()), 1e-8)
    return num / den


@pytest.fixture
def toy_corpus_text():
    from eudparse import toy_corpus_path

    return toy_corpus_path().read_text(encoding="utf-8")
