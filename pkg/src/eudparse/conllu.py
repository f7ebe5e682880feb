"""CoNLL-U reading/writing with enhanced dependencies, plus graph transforms.

The enhanced-dependency graph of a sentence lives in the DEPS column: a set
of labeled head->dependent arcs that may form cycles, reentrancies, and may
involve empty nodes (ids like ``3.1``).  Two reversible transforms reduce
such graphs to plain bi-lexical multigraph-free form:

* multi-arc merge: parallel arcs between one head/dependent pair become a
  single arc whose label joins the originals with ``+``;
* empty-node collapse: every path parent -> empty -> child becomes a direct
  arc labeled ``l_in>l_out`` and the empty node disappears.

Both transforms are exact inverses of their counterparts (``split`` /
``expand``) on their stated domains.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .errors import (
    ConlluParseError,
    LabelFormatError,
    ReservedSymbolError,
    StructureError,
)

MERGE_SEP = "+"
COLLAPSE_SEP = ">"

_WORD_ID = re.compile(r"[0-9]+")
_EMPTY_ID = re.compile(r"([0-9]+)\.([0-9]+)")
_RANGE_ID = re.compile(r"[0-9]+-[0-9]+")


class NodeId(tuple):
    """Node identifier ``(word, sub)``.

    ``(0, 0)`` is the artificial root, ``(i, 0)`` the i-th word, and
    ``(i, k)`` with ``k > 0`` the empty node written ``i.k``.
    """

    __slots__ = ()

    def __new__(cls, word, sub=0):
        if word < 0 or sub < 0:
            raise ValueError(f"negative node id ({word}, {sub})")
        return super().__new__(cls, (word, sub))

    @property
    def word(self):
        return self[0]

    @property
    def sub(self):
        return self[1]

    @property
    def is_root(self):
        return self[0] == 0 and self[1] == 0

    @property
    def is_empty(self):
        return self[1] > 0

    @classmethod
    def parse(cls, text):
        """Parse ``"3"`` or ``"3.1"``; raises ValueError on anything else."""
        if _WORD_ID.fullmatch(text):
            return cls(int(text))
        m = _EMPTY_ID.fullmatch(text)
        if m:
            sub = int(m.group(2))
            if sub == 0:
                raise ValueError(f"empty-node id with zero sub-index: {text!r}")
            return cls(int(m.group(1)), sub)
        raise ValueError(f"not a node id: {text!r}")

    def __str__(self):
        return f"{self[0]}.{self[1]}" if self[1] else str(self[0])

    def __repr__(self):
        return f"NodeId({self[0]}, {self[1]})"


ROOT = NodeId(0)


@dataclass(frozen=True)
class Token:
    """One CoNLL-U row (regular word or empty node)."""

    id: NodeId
    form: str = "_"
    lemma: str = "_"
    upos: str = "_"
    xpos: str = "_"
    feats: str = "_"
    basic_head: NodeId | None = None
    basic_deprel: str | None = None
    enhanced_deps: tuple = ()
    misc: str = "_"


@dataclass(frozen=True)
class Sentence:
    """An ordered token list plus its comment metadata.

    ``mwt_rows`` holds multiword-token ranges (``1-2`` ids) verbatim, keyed
    by the word index they precede; they never enter the graph.
    """

    tokens: tuple = ()
    metadata: tuple = ()
    mwt_rows: tuple = ()

    def words(self):
        """Surface forms of the regular words, in order."""
        return [t.form for t in self.tokens if not t.id.is_empty]

    @property
    def n_words(self):
        return sum(1 for t in self.tokens if not t.id.is_empty)


class DepGraph:
    """Labeled directed dependency graph over root + words + empty nodes.

    Arcs form a set of unique ``(head, dep, label)`` triples; insertion
    order is preserved because the multi-arc merge joins labels in DEPS
    order.  Equality is order-insensitive (set semantics).
    """

    __slots__ = ("n_words", "empty_nodes", "arcs")

    def __init__(self, n_words, empty_nodes=(), arcs=()):
        seen = set()
        unique = []
        for head, dep, label in arcs:
            if dep == ROOT:
                raise ValueError(f"arc into the root node: ({head}, {dep}, {label})")
            triple = (head, dep, label)
            if triple not in seen:
                seen.add(triple)
                unique.append(triple)
        self.n_words = n_words
        self.empty_nodes = tuple(empty_nodes)
        self.arcs = tuple(unique)

    def __eq__(self, other):
        if not isinstance(other, DepGraph):
            return NotImplemented
        return (
            self.n_words == other.n_words
            and set(self.empty_nodes) == set(other.empty_nodes)
            and set(self.arcs) == set(other.arcs)
        )

    def __hash__(self):
        return hash((self.n_words, frozenset(self.empty_nodes), frozenset(self.arcs)))

    def __repr__(self):
        return (
            f"DepGraph(n_words={self.n_words}, empty_nodes={list(self.empty_nodes)}, "
            f"arcs={list(self.arcs)})"
        )


# ---------------------------------------------------------------------------
# Parsing and writing
# ---------------------------------------------------------------------------

N_COLUMNS = 10


def parse_conllu(text):
    """Parse CoNLL-U text into a list of Sentence.

    Sentences are separated by blank lines; each token row has 10
    tab-separated columns.  Errors name the offending 1-based line number.
    """
    sentences = []
    tokens = []
    metadata = []
    mwt_rows = []
    words_seen = 0
    last_sub = 0

    def flush(lineno):
        nonlocal tokens, metadata, mwt_rows, words_seen, last_sub
        if not tokens and not metadata and not mwt_rows:
            return
        if not tokens:
            raise ConlluParseError("sentence with no token rows", lineno)
        known = {t.id for t in tokens}
        known.add(ROOT)
        for t in tokens:
            if t.basic_head is not None and t.basic_head.word > words_seen:
                raise ConlluParseError(
                    f"HEAD {t.basic_head} beyond sentence length {words_seen}", lineno
                )
            for head, _ in t.enhanced_deps:
                if head not in known:
                    raise ConlluParseError(
                        f"DEPS head {head} does not exist in this sentence", lineno
                    )
        sentences.append(
            Sentence(tokens=tuple(tokens), metadata=tuple(metadata), mwt_rows=tuple(mwt_rows))
        )
        tokens, metadata, mwt_rows = [], [], []
        words_seen, last_sub = 0, 0

    lines = text.split("\n")
    for lineno, line in enumerate(lines, start=1):
        if line.strip() == "":
            flush(lineno)
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                metadata.append((key.strip(), value.strip()))
            else:
                metadata.append((body, None))
            continue
        cols = line.split("\t")
        if len(cols) != N_COLUMNS:
            raise ConlluParseError(f"expected {N_COLUMNS} columns, got {len(cols)}", lineno)
        id_col = cols[0]
        if _RANGE_ID.fullmatch(id_col):
            anchor = int(id_col.split("-", 1)[0])
            if anchor != words_seen + 1:
                raise ConlluParseError(f"range id {id_col!r} out of order", lineno)
            mwt_rows.append((anchor, line))
            continue
        try:
            node_id = NodeId.parse(id_col)
        except ValueError:
            raise ConlluParseError(f"non-numeric id {id_col!r}", lineno) from None
        if node_id.is_empty:
            if node_id.word != words_seen or node_id.sub != last_sub + 1:
                raise ConlluParseError(f"empty-node id {id_col!r} out of order", lineno)
            last_sub = node_id.sub
        else:
            if node_id.word != words_seen + 1:
                raise ConlluParseError(f"word id {id_col!r} out of order", lineno)
            words_seen = node_id.word
            last_sub = 0
        tokens.append(
            Token(
                id=node_id,
                form=cols[1],
                lemma=cols[2],
                upos=cols[3],
                xpos=cols[4],
                feats=cols[5],
                basic_head=_parse_head(cols[6], lineno),
                basic_deprel=None if cols[7] == "_" else cols[7],
                enhanced_deps=_parse_deps(cols[8], lineno),
                misc=cols[9],
            )
        )
    flush(len(lines))
    return sentences


def _parse_head(col, lineno):
    if col == "_":
        return None
    if not _WORD_ID.fullmatch(col):
        raise ConlluParseError(f"non-numeric head {col!r}", lineno)
    return NodeId(int(col))


def _parse_deps(col, lineno):
    if col == "_":
        return ()
    deps = []
    seen = set()
    for item in col.split("|"):
        if ":" not in item:
            raise ConlluParseError(f"DEPS item {item!r} without ':'", lineno)
        head_text, label = item.split(":", 1)
        if label == "":
            raise ConlluParseError(f"DEPS item {item!r} with empty label", lineno)
        try:
            head = NodeId.parse(head_text)
        except ValueError:
            raise ConlluParseError(f"non-numeric id {head_text!r} in DEPS", lineno) from None
        if (head, label) in seen:
            raise ConlluParseError(f"duplicate DEPS item {item!r}", lineno)
        seen.add((head, label))
        deps.append((head, label))
    return tuple(deps)


def write_conllu(sentences):
    """Serialize sentences back to CoNLL-U text (LF endings, UTF-8 ready).

    DEPS items are written sorted by head id (stable, so parallel arcs keep
    their internal order).  ``parse_conllu(write_conllu(s)) == s`` at field
    level for sentences whose DEPS already satisfy the sort invariant.
    """
    blocks = []
    for sentence in sentences:
        lines = []
        for key, value in sentence.metadata:
            lines.append(f"# {key}" if value is None else f"# {key} = {value}")
        mwt_by_anchor = {}
        for anchor, raw in sentence.mwt_rows:
            mwt_by_anchor.setdefault(anchor, []).append(raw)
        for token in sentence.tokens:
            if not token.id.is_empty:
                lines.extend(mwt_by_anchor.get(token.id.word, ()))
            lines.append(_format_token(token))
        blocks.append("\n".join(lines))
    return "".join(block + "\n\n" for block in blocks)


def _format_token(token):
    deps = sorted(token.enhanced_deps, key=lambda hl: (hl[0].word, hl[0].sub))
    return "\t".join(
        (
            str(token.id),
            token.form,
            token.lemma,
            token.upos,
            token.xpos,
            token.feats,
            "_" if token.basic_head is None else str(token.basic_head),
            "_" if token.basic_deprel is None else token.basic_deprel,
            "|".join(f"{head}:{label}" for head, label in deps) if deps else "_",
            token.misc,
        )
    )


# ---------------------------------------------------------------------------
# Sentence <-> graph
# ---------------------------------------------------------------------------


def graph_of(sentence):
    """Extract the enhanced-dependency graph of a sentence."""
    arcs = []
    empty_nodes = []
    for token in sentence.tokens:
        if token.id.is_empty:
            empty_nodes.append(token.id)
        for head, label in token.enhanced_deps:
            arcs.append((head, token.id, label))
    return DepGraph(n_words=sentence.n_words, empty_nodes=empty_nodes, arcs=arcs)


def sentence_with_graph(sentence, graph):
    """Rebuild a sentence so that its DEPS column carries ``graph``.

    Regular tokens keep all other columns.  Empty-node rows are kept when
    the graph still contains their id, dropped otherwise, and fresh ids get
    placeholder rows (all ``_`` columns).
    """
    if graph.n_words != sentence.n_words:
        raise ValueError("graph and sentence disagree on word count")
    deps_by_dep = {}
    for head, dep, label in graph.arcs:
        deps_by_dep.setdefault(dep, []).append((head, label))
    old_empty = {t.id: t for t in sentence.tokens if t.id.is_empty}
    empties_by_word = {}
    for node in sorted(set(graph.empty_nodes)):
        empties_by_word.setdefault(node.word, []).append(node)

    tokens = []

    def emit_empties(word_index):
        for node in empties_by_word.get(word_index, ()):
            base = old_empty.get(node, Token(id=node))
            tokens.append(replace(base, enhanced_deps=tuple(deps_by_dep.get(node, ()))))

    emit_empties(0)
    for token in sentence.tokens:
        if token.id.is_empty:
            continue
        tokens.append(replace(token, enhanced_deps=tuple(deps_by_dep.get(token.id, ()))))
        emit_empties(token.id.word)
    return replace(sentence, tokens=tuple(tokens))


def graph_from_indexed_arcs(n_words, arcs):
    """Build an empty-node-free graph from integer (head, dep, label) arcs."""
    return DepGraph(
        n_words,
        (),
        tuple((NodeId(h), NodeId(d), label) for h, d, label in arcs),
    )


def indexed_arcs(graph):
    """Arcs of an empty-node-free graph as integer (head, dep, label) triples."""
    if graph.empty_nodes:
        raise StructureError("graph still contains empty nodes; collapse it first")
    out = []
    for head, dep, label in graph.arcs:
        if head.sub or dep.sub:
            raise StructureError("graph still contains empty-node arcs; collapse it first")
        out.append((head.word, dep.word, label))
    return tuple(out)


# ---------------------------------------------------------------------------
# Multi-arc merge / split
# ---------------------------------------------------------------------------


def merge_multi_arcs(graph):
    """Join parallel arcs between one (head, dep) pair with ``+``.

    Labels are concatenated in arc (DEPS) order.  Inputs already containing
    ``+`` are rejected: escaping would break the split inverse.
    """
    for _, _, label in graph.arcs:
        if MERGE_SEP in label:
            raise ReservedSymbolError(
                f"label {label!r} contains reserved symbol {MERGE_SEP!r}"
            )
    groups = {}
    order = []
    for head, dep, label in graph.arcs:
        key = (head, dep)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(label)
    arcs = [
        (head, dep, MERGE_SEP.join(groups[(head, dep)]))
        for head, dep in order
    ]
    return DepGraph(graph.n_words, graph.empty_nodes, arcs)


def split_multi_arcs(graph):
    """Split every ``+``-joined label back into parallel arcs."""
    arcs = []
    for head, dep, label in graph.arcs:
        segments = label.split(MERGE_SEP)
        if any(seg == "" for seg in segments):
            raise LabelFormatError(f"label {label!r} has an empty {MERGE_SEP!r}-segment")
        for seg in segments:
            arcs.append((head, dep, seg))
    return DepGraph(graph.n_words, graph.empty_nodes, arcs)


# ---------------------------------------------------------------------------
# Empty-node collapse / expand
# ---------------------------------------------------------------------------


def collapse_empty_nodes(graph):
    """Remove empty nodes by composing in/out label pairs with ``>``.

    Every (parent -> empty, empty -> child) pair yields one direct arc
    ``parent -> child`` labeled ``l_in>l_out``.  A graph without empty
    nodes is returned unchanged (fixpoint), which keeps the operation
    usable as an evaluation-time normalizer.
    """
    if not graph.empty_nodes:
        return graph
    for _, _, label in graph.arcs:
        if COLLAPSE_SEP in label:
            raise ReservedSymbolError(
                f"label {label!r} contains reserved symbol {COLLAPSE_SEP!r}"
            )
    empty = set(graph.empty_nodes)
    incoming = {node: [] for node in empty}
    outgoing = {node: [] for node in empty}
    regular_arcs = []
    for head, dep, label in graph.arcs:
        if head in empty and dep in empty:
            raise StructureError(f"arc between two empty nodes: ({head}, {dep})")
        if dep in empty:
            incoming[dep].append((head, label))
        elif head in empty:
            outgoing[head].append((dep, label))
        else:
            regular_arcs.append((head, dep, label))
    arcs = list(regular_arcs)
    for node in graph.empty_nodes:
        if not incoming[node] or not outgoing[node]:
            raise StructureError(f"orphan empty node {node} (needs a parent and a child)")
        for parent, l_in in incoming[node]:
            for child, l_out in outgoing[node]:
                arcs.append((parent, child, f"{l_in}{COLLAPSE_SEP}{l_out}"))
    return DepGraph(graph.n_words, (), arcs)


def expand_empty_nodes(graph):
    """Reintroduce empty nodes from ``>``-composed labels.

    Arcs sharing the same ``(head, l_in)`` map to one fresh empty node;
    fresh ids are assigned ``h.1, h.2, ...`` per head word in first
    appearance order.  Inverse of collapse on collapse's own output.
    """
    for _, _, label in graph.arcs:
        if label.count(COLLAPSE_SEP) >= 2:
            raise LabelFormatError(
                f"label {label!r} nests more than one {COLLAPSE_SEP!r} level"
            )
        if COLLAPSE_SEP in label and "" in label.split(COLLAPSE_SEP):
            raise LabelFormatError(f"label {label!r} has an empty segment")
    next_sub = {}
    for node in graph.empty_nodes:
        next_sub[node.word] = max(next_sub.get(node.word, 0), node.sub)
    node_for_group = {}
    new_nodes = []
    arcs = []
    for head, dep, label in graph.arcs:
        if COLLAPSE_SEP not in label:
            arcs.append((head, dep, label))
            continue
        l_in, l_out = label.split(COLLAPSE_SEP)
        key = (head, l_in)
        if key not in node_for_group:
            word = head.word
            next_sub[word] = next_sub.get(word, 0) + 1
            node = NodeId(word, next_sub[word])
            node_for_group[key] = node
            new_nodes.append(node)
            arcs.append((head, node, l_in))
        arcs.append((node_for_group[key], dep, l_out))
    empty_nodes = sorted(set(graph.empty_nodes) | set(new_nodes))
    return DepGraph(graph.n_words, empty_nodes, arcs)
