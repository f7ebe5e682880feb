"""From potentials to graphs: MFVI arc posteriors, then decoding.

Decoding either thresholds the probability matrix directly (fast, possibly
disconnected) or first extracts a spanning tree (Chu-Liu-Edmonds for the
unrestricted maximum arborescence, Eisner for the best projective tree) and
then adds every remaining arc whose posterior clears the threshold, so the
output is guaranteed root-connected while still allowing reentrancies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import COPARENT, GRANDPARENT, SIBLING, arc_mask, compute_potentials

PROB_EPS = 1e-12

MODES = ("argmax", "mst", "eisner")


@dataclass
class ArcProbabilities:
    """Posterior arc probabilities; excluded cells (diagonal, into-root) are 0."""

    probs: np.ndarray
    iterations_run: int

    @property
    def n_words(self):
        return self.probs.shape[0] - 1


@dataclass
class ParseResult:
    arcs: tuple
    backbone: tuple
    mode: str


# ---------------------------------------------------------------------------
# Mean-field variational inference
# ---------------------------------------------------------------------------


def mfvi_matrix(unary, binary, iterations):
    """Differentiable MFVI update, unrolled for a fixed iteration count.

    Q0 = sigmoid(unary); each step recomputes the arc logit as the unary
    score plus the binary potentials of co-occurring arcs weighted by their
    current posterior:

        F[i,j] = unary[i,j] + sum_k  Q[i,k]*sib[i,j,k] + Q[k,j]*cop[i,j,k]
                                   + Q[j,k]*gp[i,j,k]  + Q[k,i]*gp[k,i,j]

    Binary tensors are zero whenever two indices coincide, so the k sums
    skip i and j automatically; excluded cells stay at probability 0.
    """
    n = unary.shape[0] - 1
    mask = arc_mask(n).to(unary.dtype)
    q = torch.sigmoid(unary) * mask
    sib = binary.get(SIBLING)
    cop = binary.get(COPARENT)
    gp = binary.get(GRANDPARENT)
    for _ in range(iterations):
        f = unary
        if sib is not None:
            f = f + torch.einsum("ik,ijk->ij", q, sib)
        if cop is not None:
            f = f + torch.einsum("kj,ijk->ij", q, cop)
        if gp is not None:
            f = f + torch.einsum("jk,ijk->ij", q, gp)
            f = f + torch.einsum("ki,kij->ij", q, gp)
        q = torch.sigmoid(f) * mask
    return q


def mfvi(potentials, iterations):
    """Run MFVI over a potential set and return plain probabilities."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    q = mfvi_matrix(potentials.unary, potentials.binary, iterations)
    return ArcProbabilities(probs=q.detach().numpy(), iterations_run=iterations)


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------


def log_odds(probs):
    """Tree-edge weights: logit of the clamped posterior."""
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return np.log(p) - np.log1p(-p)


def argmax_decode(p, threshold):
    """All arcs above threshold; no connectivity guarantee."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    n = p.n_words
    out = []
    for i in range(n + 1):
        for j in range(1, n + 1):
            if i != j and p.probs[i, j] > threshold:
                out.append((i, j))
    return tuple(out)


def _find_cycle(heads):
    m = len(heads)
    color = [0] * m  # 0 unseen, 1 on stack, 2 done
    color[0] = 2
    for start in range(1, m):
        if color[start]:
            continue
        path = []
        v = start
        while color[v] == 0:
            color[v] = 1
            path.append(v)
            v = heads[v]
        if color[v] == 1:
            return path[path.index(v):]
        for u in path:
            color[u] = 2
    return None


def _greedy_heads(w):
    m = w.shape[0]
    heads = [-1] * m
    for d in range(1, m):
        heads[d] = int(np.argmax(w[:, d]))
    return heads


def _chu_liu_edmonds(w):
    """Maximum spanning arborescence over weight matrix w[h, d], root 0.

    Returns the head of every node (heads[0] = -1).  Classic recursive
    cycle contraction; quadratic work per contraction.
    """
    m = w.shape[0]
    heads = _greedy_heads(w)
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads
    cycle_set = set(cycle)
    rest = [v for v in range(m) if v not in cycle_set]
    rep = len(rest)
    index = {v: i for i, v in enumerate(rest)}
    cycle_score = sum(w[heads[v], v] for v in cycle)

    new_w = np.full((rep + 1, rep + 1), -np.inf)
    for a in rest:
        for b in rest:
            new_w[index[a], index[b]] = w[a, b]
    entry_point = {}
    for a in rest:
        gains = [w[a, v] - w[heads[v], v] for v in cycle]
        best = int(np.argmax(gains))
        entry_point[a] = cycle[best]
        new_w[index[a], rep] = gains[best] + cycle_score
    exit_point = {}
    for b in rest:
        if b == 0:
            continue
        scores = [w[v, b] for v in cycle]
        best = int(np.argmax(scores))
        exit_point[b] = cycle[best]
        new_w[rep, index[b]] = scores[best]

    sub_heads = _chu_liu_edmonds(new_w)
    out = list(heads)
    for b_new, head_new in enumerate(sub_heads[:-1]):
        b = rest[b_new]
        if b == 0:
            continue
        if head_new == rep:
            out[b] = exit_point[b]
        else:
            out[b] = rest[head_new]
    entering = rest[sub_heads[rep]]
    broken = entry_point[entering]
    out[broken] = entering
    return out


def _prepare_weights(p):
    w = log_odds(p.probs).copy()
    np.fill_diagonal(w, -np.inf)
    w[:, 0] = -np.inf
    return w


def _tree_weight(w, heads):
    return sum(w[heads[d], d] for d in range(1, len(heads)))


def mst_decode(p, single_root=True):
    """Maximum-weight spanning arborescence over log-odds weights.

    With ``single_root`` the root gets exactly one dependent: every
    candidate root attachment is solved separately and the best kept, so
    the result is exact.
    """
    n = p.n_words
    if n == 0:
        return ParseResult(arcs=(), backbone=(), mode="mst")
    w = _prepare_weights(p)
    heads = _chu_liu_edmonds(w)
    if single_root and sum(1 for d in range(1, n + 1) if heads[d] == 0) > 1:
        best_heads, best_weight = None, -np.inf
        for r in range(1, n + 1):
            forced = w.copy()
            forced[0, :] = -np.inf
            forced[0, r] = w[0, r]
            cand = _chu_liu_edmonds(forced)
            weight = _tree_weight(w, cand)
            if weight > best_weight:
                best_heads, best_weight = cand, weight
        heads = best_heads
    backbone = tuple((heads[d], d) for d in range(1, n + 1))
    return ParseResult(arcs=(), backbone=backbone, mode="mst")


def eisner_decode(p):
    """Best projective spanning tree (single root attachment), O(n^3) spans.

    Standard first-order Eisner chart over complete/incomplete spans; the
    root's incomplete items are restricted to the split m = 0, which forces
    exactly one dependent of the root.
    """
    n = p.n_words
    if n == 0:
        return ParseResult(arcs=(), backbone=(), mode="eisner")
    w = _prepare_weights(p)
    neg = -np.inf
    m1 = n + 1
    c_r = np.zeros((m1, m1))  # complete, head at left end
    c_l = np.zeros((m1, m1))  # complete, head at right end
    i_r = np.full((m1, m1), neg)  # incomplete, arc i -> j
    i_l = np.full((m1, m1), neg)  # incomplete, arc j -> i
    bp_cr = np.zeros((m1, m1), dtype=int)
    bp_cl = np.zeros((m1, m1), dtype=int)
    bp_ir = np.zeros((m1, m1), dtype=int)
    bp_il = np.zeros((m1, m1), dtype=int)

    for span in range(1, m1):
        for i in range(0, m1 - span):
            j = i + span
            splits = range(i, i + 1) if i == 0 else range(i, j)
            best_r, arg_r = neg, i
            best_l, arg_l = neg, i
            for m in splits:
                val = c_r[i, m] + c_l[m + 1, j]
                if val > best_r:
                    best_r, arg_r = val, m
                if i > 0 and val > best_l:
                    best_l, arg_l = val, m
            i_r[i, j] = best_r + w[i, j]
            bp_ir[i, j] = arg_r
            if i > 0:
                i_l[i, j] = best_l + w[j, i]
                bp_il[i, j] = arg_l
            best, arg = neg, i
            for m in range(i, j):
                val = c_l[i, m] + i_l[m, j]
                if val > best:
                    best, arg = val, m
            c_l[i, j] = best
            bp_cl[i, j] = arg
            best, arg = neg, i + 1
            for m in range(i + 1, j + 1):
                val = i_r[i, m] + c_r[m, j]
                if val > best:
                    best, arg = val, m
            c_r[i, j] = best
            bp_cr[i, j] = arg

    heads = [-1] * m1
    stack = [("c_r", 0, n)]
    while stack:
        kind, i, j = stack.pop()
        if i == j:
            continue
        if kind == "c_r":
            m = int(bp_cr[i, j])
            stack.append(("i_r", i, m))
            stack.append(("c_r", m, j))
        elif kind == "c_l":
            m = int(bp_cl[i, j])
            stack.append(("c_l", i, m))
            stack.append(("i_l", m, j))
        elif kind == "i_r":
            heads[j] = i
            m = int(bp_ir[i, j])
            stack.append(("c_r", i, m))
            stack.append(("c_l", m + 1, j))
        else:
            heads[i] = j
            m = int(bp_il[i, j])
            stack.append(("c_r", i, m))
            stack.append(("c_l", m + 1, j))
    backbone = tuple((heads[d], d) for d in range(1, n + 1))
    return ParseResult(arcs=(), backbone=backbone, mode="eisner")


def augment(backbone, p, threshold=0.5):
    """Union of the backbone with every other above-threshold arc."""
    extra = argmax_decode(p, threshold)
    seen = set(backbone)
    out = list(backbone)
    for arc in extra:
        if arc not in seen:
            seen.add(arc)
            out.append(arc)
    return tuple(out)


def assign_labels(arcs, label_scores, labels):
    """Pick the argmax label per arc; ties go to the lowest label index."""
    scores = (
        label_scores.detach().numpy()
        if isinstance(label_scores, torch.Tensor)
        else np.asarray(label_scores)
    )
    out = []
    for i, j in arcs:
        out.append((i, j, labels[int(np.argmax(scores[i, j]))]))
    return tuple(out)


# ---------------------------------------------------------------------------
# End-to-end sentence parsing
# ---------------------------------------------------------------------------


def parse_sentence(params, words, mode="mst", iterations=3, threshold=0.5):
    """Encode, score, run MFVI, decode, and label one sentence."""
    if not words:
        raise ValueError("cannot parse an empty sentence")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r} (expected one of {MODES})")
    potentials = compute_potentials(params, words)
    probs = mfvi(potentials, iterations)
    if mode == "argmax":
        backbone = ()
        unlabeled = argmax_decode(probs, threshold)
    else:
        decoder = mst_decode if mode == "mst" else eisner_decode
        backbone = decoder(probs).backbone
        unlabeled = augment(backbone, probs, threshold)
    arcs = assign_labels(sorted(unlabeled), potentials.label_scores, params.labels)
    return ParseResult(arcs=arcs, backbone=backbone, mode=mode)
