"""Trainable potentials: biaffine arc/label scores and trilinear binary scores.

The token encoder is deliberately small: a trainable embedding table plus a
+/-2 mean-window context average, with a dedicated learned root vector in
row 0.  Everything downstream (the biaffine unary scorer, the per-structure
trilinear scorers, the label scorer) is the full scoring machinery and is
differentiable end to end.  All tensors are float64 on CPU.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ModelFormatError

OOV_TOKEN = "<unk>"
WINDOW = 2

SIBLING = "sibling"
COPARENT = "co-parent"
GRANDPARENT = "grandparent"
STRUCTURE_TYPES = (SIBLING, COPARENT, GRANDPARENT)

MODEL_FORMAT = "eudparse-model"
MODEL_VERSION = 1

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ModelDims:
    d_embed: int = 64
    d_arc: int = 64
    d_binary: int = 32


# Desk-scale default; "paper" uses the published unary/binary hidden sizes
# (500/150) over the same small embedding table.
DIM_PROFILES = {
    "desk": ModelDims(),
    "paper": ModelDims(d_embed=64, d_arc=500, d_binary=150),
}


@dataclass
class ModelParams:
    """All trainable tensors plus vocabulary and label inventory.

    ``vocab`` maps word form to embedding row; row 0 is the OOV slot.
    ``tensors`` is a flat name->tensor dict so the optimizer and the
    serializer can treat parameters uniformly.
    """

    vocab: dict
    labels: tuple
    structure_types: tuple
    tensors: dict
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels in label set")
        if not self.labels:
            raise ValueError("empty label set")
        unknown = set(self.structure_types) - set(STRUCTURE_TYPES)
        if unknown:
            raise ValueError(f"unknown structure types: {sorted(unknown)}")
        self._index = dict(self.vocab)

    @property
    def d_embed(self):
        return self.tensors["embeddings"].shape[1]

    @property
    def d_arc(self):
        return self.tensors["arc_head_w"].shape[0]

    @property
    def d_binary(self):
        return self.tensors["tri_head_w"].shape[0]

    @property
    def n_labels(self):
        return len(self.labels)

    def word_index(self, form):
        return self._index.get(form, self.vocab[OOV_TOKEN])

    def label_index(self, label):
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(label) from None

    def clone(self):
        return ModelParams(
            vocab=dict(self.vocab),
            labels=self.labels,
            structure_types=self.structure_types,
            tensors={k: v.detach().clone() for k, v in self.tensors.items()},
        )


@dataclass
class TokenEncoding:
    """Context vectors, one row per node; row 0 is the root."""

    vectors: torch.Tensor

    @property
    def n_words(self):
        return self.vectors.shape[0] - 1


@dataclass
class PotentialSet:
    """Scores for one sentence: unary matrix, binary tensors, label scores."""

    unary: torch.Tensor
    binary: dict
    label_scores: torch.Tensor

    @property
    def n_words(self):
        return self.unary.shape[0] - 1


def build_vocab(sentences_words):
    """Vocabulary from an iterable of word lists: OOV slot plus sorted forms."""
    forms = sorted({w for words in sentences_words for w in words})
    vocab = {OOV_TOKEN: 0}
    for form in forms:
        if form not in vocab:
            vocab[form] = len(vocab)
    return vocab


def _tensor_seed(seed, name):
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _tensor_shapes(n_vocab, n_labels, dims, structure_types):
    d_e, d_u, d_b = dims.d_embed, dims.d_arc, dims.d_binary
    shapes = {
        "embeddings": (n_vocab, d_e),
        "root": (d_e,),
        "arc_head_w": (d_u, d_e),
        "arc_head_b": (d_u,),
        "arc_dep_w": (d_u, d_e),
        "arc_dep_b": (d_u,),
        "biaffine_arc": (d_u + 1, d_u + 1),
        "tri_head_w": (d_b, d_e),
        "tri_head_b": (d_b,),
        "tri_dep_w": (d_b, d_e),
        "tri_dep_b": (d_b,),
        "tri_sib_w": (d_b, d_e),
        "tri_sib_b": (d_b,),
        "label_head_w": (d_u, d_e),
        "label_head_b": (d_u,),
        "label_dep_w": (d_u, d_e),
        "label_dep_b": (d_u,),
        "biaffine_label": (n_labels, d_u + 1, d_u + 1),
    }
    for stype in structure_types:
        shapes[f"trilinear_{stype}"] = (d_b, d_b, d_b)
    return shapes


def init_params(vocab, labels, dims=None, seed=0, structure_types=STRUCTURE_TYPES):
    """Fresh parameters, uniform in [-0.1, 0.1].

    Each tensor draws from its own generator seeded by (seed, name), so two
    models sharing a seed have identical shared tensors even when their
    structure-type sets differ.
    """
    dims = dims or ModelDims()
    if min(dims.d_embed, dims.d_arc, dims.d_binary) <= 0:
        raise ValueError("model dimensions must be strictly positive")
    labels = tuple(labels)
    structure_types = tuple(structure_types)
    shapes = _tensor_shapes(len(vocab), len(labels), dims, structure_types)
    tensors = {}
    for name, shape in sorted(shapes.items()):
        gen = torch.Generator().manual_seed(_tensor_seed(seed, name))
        t = torch.empty(shape, dtype=torch.float64)
        t.uniform_(-0.1, 0.1, generator=gen)
        tensors[name] = t
    return ModelParams(
        vocab=dict(vocab), labels=labels, structure_types=structure_types, tensors=tensors
    )


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def encode_tokens(params, words, dropout_rate=0.0, generator=None):
    """Encode a sentence: row i >= 1 averages embeddings over [i-2, i+2].

    OOV forms map to the OOV embedding.  With ``dropout_rate`` > 0 whole
    embedding rows are dropped independently (inverted scaling); that path
    requires an explicit seeded generator so training stays reproducible.
    """
    if not words:
        raise ValueError("cannot encode an empty sentence")
    emb_table = params.tensors["embeddings"]
    idx = torch.tensor([params.word_index(w) for w in words], dtype=torch.long)
    emb = emb_table[idx]
    if dropout_rate > 0.0:
        if generator is None:
            raise ValueError("dropout requires a seeded generator")
        keep = (
            torch.rand(len(words), generator=generator, dtype=torch.float64)
            >= dropout_rate
        ).to(torch.float64)
        emb = emb * keep.unsqueeze(1) / (1.0 - dropout_rate)
    n = len(words)
    rows = [params.tensors["root"]]
    for i in range(n):
        lo = max(0, i - WINDOW)
        hi = min(n, i + WINDOW + 1)
        rows.append(emb[lo:hi].mean(dim=0))
    return TokenEncoding(vectors=torch.stack(rows))


def _affine_relu(vectors, w, b):
    return torch.relu(vectors @ w.T + b)


def _append_one(mat):
    ones = torch.ones(mat.shape[0], 1, dtype=mat.dtype)
    return torch.cat([mat, ones], dim=1)


def arc_mask(n):
    """Boolean (n+1)x(n+1) mask of admissible cells: j >= 1 and i != j."""
    mask = torch.ones(n + 1, n + 1, dtype=torch.bool)
    mask[:, 0] = False
    mask.fill_diagonal_(False)
    return mask


def score_unary(params, enc):
    """Biaffine head->dependent arc scores, -inf on excluded cells."""
    t = params.tensors
    head = _append_one(_affine_relu(enc.vectors, t["arc_head_w"], t["arc_head_b"]))
    dep = _append_one(_affine_relu(enc.vectors, t["arc_dep_w"], t["arc_dep_b"]))
    scores = head @ t["biaffine_arc"] @ dep.T
    return scores.masked_fill(~arc_mask(enc.n_words), NEG_INF)


def _diag_free_mask(n):
    idx = torch.arange(n + 1)
    i = idx.view(-1, 1, 1)
    j = idx.view(1, -1, 1)
    k = idx.view(1, 1, -1)
    return ((i != j) & (j != k) & (i != k)).to(torch.float64)


def score_binary(params, enc, types=None):
    """Trilinear second-order scores per structure type.

    Entry (i, j, k) reads: arc i->j co-occurring with i->k (sibling),
    k->j (co-parent), or j->k (grandparent chain i->j->k).  Sibling is
    symmetrized over (j, k), co-parent over its two heads (i, k); entries
    with any two equal indices are zeroed.
    """
    if types is None:
        types = params.structure_types
    t = params.tensors
    g_h = _affine_relu(enc.vectors, t["tri_head_w"], t["tri_head_b"])
    g_d = _affine_relu(enc.vectors, t["tri_dep_w"], t["tri_dep_b"])
    g_s = _affine_relu(enc.vectors, t["tri_sib_w"], t["tri_sib_b"])
    mask = _diag_free_mask(enc.n_words)
    out = {}
    for stype in types:
        w = t[f"trilinear_{stype}"]
        raw = torch.einsum("abc,ia,jb,kc->ijk", w, g_h, g_d, g_s)
        if stype == SIBLING:
            raw = 0.5 * (raw + raw.transpose(1, 2))
        elif stype == COPARENT:
            raw = 0.5 * (raw + raw.transpose(0, 2))
        out[stype] = raw * mask
    return out


def score_labels(params, enc):
    """Per-label biaffine scores, shape (n+1, n+1, L)."""
    t = params.tensors
    head = _append_one(_affine_relu(enc.vectors, t["label_head_w"], t["label_head_b"]))
    dep = _append_one(_affine_relu(enc.vectors, t["label_dep_w"], t["label_dep_b"]))
    return torch.einsum("ia,lab,jb->ijl", head, t["biaffine_label"], dep)


def label_probabilities(label_scores):
    """Softmax over the label axis."""
    return torch.softmax(label_scores, dim=-1)


def compute_potentials(params, words, types=None, dropout_rate=0.0, generator=None):
    """Full potential set for a sentence (unary, binary, label scores)."""
    enc = encode_tokens(params, words, dropout_rate=dropout_rate, generator=generator)
    return PotentialSet(
        unary=score_unary(params, enc),
        binary=score_binary(params, enc, types),
        label_scores=score_labels(params, enc),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_model(params, path):
    """Write a single self-describing .npz-compatible container.

    The zip is assembled by hand with fixed entry timestamps and sorted
    entry order so identical parameters always produce identical bytes
    (np.savez stamps entries with the current time).
    """
    vocab_list = [None] * len(params.vocab)
    for form, i in params.vocab.items():
        vocab_list[i] = form
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "vocab": vocab_list,
        "labels": list(params.labels),
        "structure_types": list(params.structure_types),
        "dtype": "float64",
    }
    entries = {"meta": np.array(json.dumps(meta))}
    entries.update(
        (f"tensor__{k}", v.detach().numpy()) for k, v in params.tensors.items()
    )
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            buf = io.BytesIO()
            np.save(buf, entries[name], allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_model(path):
    """Load a model container written by :func:`save_model`."""
    try:
        with np.load(path, allow_pickle=False) as data:
            if "meta" not in data:
                raise ModelFormatError(f"{path}: not a model file (no meta entry)")
            meta = json.loads(str(data["meta"]))
            if meta.get("format") != MODEL_FORMAT:
                raise ModelFormatError(f"{path}: unknown container format")
            if meta.get("version") != MODEL_VERSION:
                raise ModelFormatError(
                    f"{path}: unsupported model version {meta.get('version')!r}"
                )
            tensors = {
                name[len("tensor__"):]: torch.from_numpy(data[name].copy())
                for name in data.files
                if name.startswith("tensor__")
            }
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from None
    vocab = {form: i for i, form in enumerate(meta["vocab"])}
    return ModelParams(
        vocab=vocab,
        labels=tuple(meta["labels"]),
        structure_types=tuple(meta["structure_types"]),
        tensors=tensors,
    )
