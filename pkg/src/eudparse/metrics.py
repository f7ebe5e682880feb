"""Corpus scoring: ELAS, labeled F1, and connectivity diagnostics.

Both metrics are micro-averaged exact-match F1 over (head, dep, label)
triples; they differ only in the representation compared.  ELAS scores the
collapsed-and-split form (no empty nodes, no `+` labels).  LF1 scores the
collapsed-and-merged form the model actually predicts, without splitting,
and is the model selection metric.
"""

from __future__ import annotations

from dataclasses import dataclass

from .conllu import (
    MERGE_SEP,
    ROOT,
    NodeId,
    collapse_empty_nodes,
    merge_multi_arcs,
    split_multi_arcs,
)
from .errors import AlignmentError, LabelFormatError


@dataclass(frozen=True)
class ScoreReport:
    precision: float
    recall: float
    f1: float
    correct: int
    predicted: int
    gold: int
    connectivity_rate: float


REPORT_FIELDS = (
    "precision",
    "recall",
    "f1",
    "correct",
    "predicted",
    "gold",
    "connectivity_rate",
)


def _ratios(correct, predicted, gold):
    p = correct / predicted if predicted else 0.0
    r = correct / gold if gold else 0.0
    f = 2.0 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _check_alignment(gold, pred):
    if len(gold) != len(pred):
        raise AlignmentError(
            f"corpus size mismatch: {len(gold)} gold vs {len(pred)} predicted"
        )
    for idx, (g, p) in enumerate(zip(gold, pred)):
        if g.n_words != p.n_words:
            raise AlignmentError(
                f"sentence {idx + 1}: word count mismatch "
                f"({g.n_words} gold vs {p.n_words} predicted)"
            )


def _score(gold, pred, normalize):
    _check_alignment(gold, pred)
    correct = predicted = total_gold = 0
    for g, p in zip(gold, pred):
        g_arcs = set(normalize(g).arcs)
        p_arcs = set(normalize(p).arcs)
        correct += len(g_arcs & p_arcs)
        predicted += len(p_arcs)
        total_gold += len(g_arcs)
    prec, rec, f1_val = _ratios(correct, predicted, total_gold)
    return ScoreReport(
        precision=prec,
        recall=rec,
        f1=f1_val,
        correct=correct,
        predicted=predicted,
        gold=total_gold,
        connectivity_rate=connectivity_rate(pred),
    )


def _elas_form(graph):
    return split_multi_arcs(collapse_empty_nodes(graph))


def _lf1_form(graph):
    g = collapse_empty_nodes(graph)
    if any(MERGE_SEP in label for _, _, label in g.arcs):
        pairs = {(h, d) for h, d, _ in g.arcs}
        if len(pairs) != len(g.arcs):
            raise LabelFormatError(
                "graph mixes `+` labels with parallel arcs; cannot normalize"
            )
        return g
    return merge_multi_arcs(g)


def elas(gold, pred):
    """Micro P/R/F1 on collapsed-and-split graphs."""
    return _score(gold, pred, _elas_form)


def lf1(gold, pred):
    """Micro P/R/F1 on the collapsed, `+`-merged representation."""
    return _score(gold, pred, _lf1_form)


def is_connected(graph):
    """True when every node (words and empties) is reachable from root."""
    nodes = {node for node in graph.empty_nodes}
    nodes.update(arc[0] for arc in graph.arcs)
    nodes.update(arc[1] for arc in graph.arcs)
    nodes.update(NodeId(w) for w in range(1, graph.n_words + 1))
    nodes.discard(ROOT)
    children = {}
    for head, dep, _ in graph.arcs:
        children.setdefault(head, []).append(dep)
    seen = {ROOT}
    queue = [ROOT]
    while queue:
        for dep in children.get(queue.pop(), ()):
            if dep not in seen:
                seen.add(dep)
                queue.append(dep)
    return all(node in seen for node in nodes)


def connectivity_rate(pred):
    """Fraction of graphs fully root-reachable; 1.0 for an empty corpus."""
    if not pred:
        return 1.0
    return sum(1 for g in pred if is_connected(g)) / len(pred)


def format_report(report, machine=False):
    """Render a ScoreReport; one key=value line in machine mode."""
    values = {
        name: getattr(report, name)
        for name in REPORT_FIELDS
    }
    parts = []
    for name, value in values.items():
        text = f"{value:.4f}" if isinstance(value, float) else str(value)
        parts.append((name, text))
    if machine:
        return " ".join(f"{name}={text}" for name, text in parts)
    width = max(len(name) for name, _ in parts)
    return "\n".join(f"{name:<{width}}  {text}" for name, text in parts)
