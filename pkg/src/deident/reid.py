"""Reidentification of (possibly redacted) documents against a profile store.

Two reidentifier families share one duck-typed surface (`scores`,
`distribution`): a neural ranker built from a trained checkpoint, and a
BM25 lexical ranker over linearized profiles. An ensemble report counts a
document as reidentified when any member ranks its true profile first.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Document, IdfTable, ProfileStore, linearize_profile
from .encoder import (
    ModelParams,
    document_row_indices,
    encode_document,
    build_profile_matrix,
    load_checkpoint,
    rank_of,
    score_and_normalize,
)


class NeuralReidentifier:
    """Ranks profiles by dot product with the encoded document."""

    kind = "neural"

    def __init__(self, params: ModelParams, store: ProfileStore, name: str = "neural"):
        self.params = params
        self.store = store
        self.name = name
        self.matrix = build_profile_matrix(params, store)

    @classmethod
    def from_checkpoint(cls, path: str | Path, store: ProfileStore, name: str | None = None):
        params = load_checkpoint(path)
        return cls(params, store, name=name or Path(path).stem)

    def scores(self, document: Document, mask=None) -> np.ndarray:
        return self.matrix @ encode_document(self.params, document, mask)

    def distribution(self, document: Document, mask=None) -> np.ndarray:
        return score_and_normalize(encode_document(self.params, document, mask), self.matrix)

    def _candidate_features(self, document: Document, mask, candidates: Sequence[int]) -> np.ndarray:
        """Embeddings for each single-position mask addition, in one pass."""
        vocab = self.params.vocab
        rows = document_row_indices(vocab, document, mask)
        emb = self.params.embeddings
        n = len(rows)
        base_sum = emb[rows].astype(np.float64).sum(axis=0)
        mask_row = emb[vocab.mask_index].astype(np.float64)
        deltas = mask_row - emb[np.asarray([rows[j] for j in candidates])].astype(np.float64)
        means = (base_sum + deltas) / n
        return means @ self.params.doc_proj.astype(np.float64)

    def candidate_distributions(self, document: Document, mask, candidates: Sequence[int]) -> np.ndarray:
        """Row c is the full distribution after additionally masking candidates[c]."""
        feats = self._candidate_features(document, mask, candidates)
        scores = feats @ self.matrix.T
        shifted = scores - scores.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def candidate_true_probs(
        self, document: Document, mask, candidates: Sequence[int], true_index: int
    ) -> np.ndarray:
        return self.candidate_distributions(document, mask, candidates)[:, true_index]


class Bm25Reidentifier:
    """Okapi BM25 over linearized profiles, with smoothed nonnegative IDF.

    Query terms are the normalized unmasked document tokens (mask sentinels
    are excluded); each distinct query term contributes once.
    """

    kind = "bm25"

    def __init__(self, store: ProfileStore, k1: float = 1.5, b: float = 0.75, name: str = "bm25"):
        if k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= b <= 1.0:
            raise ValueError("b must be in [0, 1]")
        if len(store) == 0:
            raise ValueError("profile store is empty")
        self.store = store
        self.k1 = k1
        self.b = b
        self.name = name
        docs = [linearize_profile(p).normalized() for p in store]
        self.term_freqs = [Counter(d) for d in docs]
        self.lengths = np.array([len(d) for d in docs], dtype=np.float64)
        self.avg_length = float(self.lengths.mean())
        self.idf_table = IdfTable.from_token_documents(docs)

    def query_terms(self, document: Document, mask=None) -> list[str]:
        if mask is None:
            return sorted(set(document.normalized()))
        arr = np.asarray(mask, dtype=np.int8)
        return sorted({t.normalized for t, bit in zip(document.tokens, arr) if not bit})

    def scores(self, document: Document, mask=None) -> np.ndarray:
        terms = self.query_terms(document, mask)
        scores = np.zeros(len(self.store), dtype=np.float64)
        norm = self.k1 * (1.0 - self.b + self.b * self.lengths / self.avg_length)
        for term in terms:
            idf = self.idf_table.idf(term)
            for i, tf_map in enumerate(self.term_freqs):
                tf = tf_map.get(term)
                if tf:
                    scores[i] += idf * tf * (self.k1 + 1.0) / (tf + norm[i])
        return scores

    def distribution(self, document: Document, mask=None) -> np.ndarray:
        scores = self.scores(document, mask)
        shifted = scores - scores.max()
        exp = np.exp(shifted)
        return exp / exp.sum()


def bm25_scores(document: Document, store: ProfileStore, k1: float = 1.5, b: float = 0.75, mask=None) -> np.ndarray:
    """One-shot BM25 scoring; builds statistics over the store on each call."""
    return Bm25Reidentifier(store, k1=k1, b=b).scores(document, mask)


@dataclass
class Ranking:
    """Profiles ordered by descending score with index tie-break."""

    order: np.ndarray
    scores: np.ndarray

    def rank_of_index(self, index: int) -> int:
        return rank_of(self.scores, index)


def reidentify(reidentifier, document: Document, mask=None) -> Ranking:
    """Rank every profile in the store for one document."""
    scores = reidentifier.scores(document, mask)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return Ranking(order=order, scores=scores)


@dataclass
class EnsembleReport:
    """Reidentification outcome of an ensemble over a record set."""

    rate: float
    per_doc: list[dict]
    per_member: dict[str, float]

    def to_json(self) -> dict:
        return {"rate": self.rate, "per_member": self.per_member, "per_doc": self.per_doc}

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")


def ensemble_evaluate(
    members: Mapping[str, object],
    records: Sequence[tuple[str, Document, np.ndarray, int]],
) -> EnsembleReport:
    """Evaluate members over (doc_id, document, mask, true_index) records.

    A document counts as reidentified when at least one member puts its
    true profile at rank 1. Per-member ranks are kept for every document.
    """
    if not members:
        raise ValueError("ensemble needs at least one member")
    per_doc = []
    member_hits = {name: 0 for name in members}
    reidentified_count = 0
    for doc_id, document, mask, true_index in records:
        ranks = {}
        for name, member in members.items():
            scores = member.scores(document, mask)
            ranks[name] = rank_of(scores, true_index)
            if ranks[name] == 1:
                member_hits[name] += 1
        flag = any(r == 1 for r in ranks.values())
        reidentified_count += int(flag)
        per_doc.append({"id": doc_id, "ranks": ranks, "reidentified": flag})
    total = max(1, len(per_doc))
    rate = 100.0 * reidentified_count / total
    per_member = {name: 100.0 * hits / total for name, hits in member_hits.items()}
    return EnsembleReport(rate=rate, per_doc=per_doc, per_member=per_member)
