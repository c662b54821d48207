"""Bi-encoder scoring of documents against a profile store.

Documents and profiles share one word-embedding table; each side applies
its own linear projection to the mean of its token embeddings. Masked
document positions contribute the dedicated mask-symbol row instead of
their word row, so a fully masked document encodes identically regardless
of content. Match scores are plain dot products, normalized with a
numerically stable softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document, Profile, ProfileStore, Vocabulary, linearize_profile

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or version-incompatible checkpoints."""


@dataclass
class ModelParams:
    """Trainable arrays plus the vocabulary that indexes them.

    embeddings has one row per vocabulary row (terms, hash buckets, mask
    symbol, padding); doc_proj and profile_proj map the embedding width to
    the output width.
    """

    vocab: Vocabulary
    embeddings: np.ndarray
    doc_proj: np.ndarray
    profile_proj: np.ndarray
    label_smoothing: float = 0.0
    version: int = CHECKPOINT_VERSION

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def out_dim(self) -> int:
        return self.doc_proj.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            vocab=self.vocab,
            embeddings=self.embeddings.copy(),
            doc_proj=self.doc_proj.copy(),
            profile_proj=self.profile_proj.copy(),
            label_smoothing=self.label_smoothing,
            version=self.version,
        )


def init_params(
    vocab: Vocabulary,
    dim: int = 64,
    seed: int = 0,
    label_smoothing: float = 0.0,
    dtype: np.dtype = np.float32,
) -> ModelParams:
    """Randomly initialize parameters; deterministic for a fixed seed.

    Embeddings start at unit scale and projections at 1/sqrt(dim); smaller
    embedding scales leave the dot-product scores too flat for SGD to make
    progress through the two projection layers.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    proj_scale = 1.0 / np.sqrt(dim)
    embeddings = rng.standard_normal((vocab.n_rows, dim)).astype(dtype)
    doc_proj = (rng.standard_normal((dim, dim)) * proj_scale).astype(dtype)
    profile_proj = (rng.standard_normal((dim, dim)) * proj_scale).astype(dtype)
    return ModelParams(
        vocab=vocab,
        embeddings=embeddings,
        doc_proj=doc_proj,
        profile_proj=profile_proj,
        label_smoothing=label_smoothing,
    )


def document_row_indices(vocab: Vocabulary, document: Document, mask=None) -> np.ndarray:
    """Embedding-row index per position; masked positions map to the mask row."""
    rows = vocab.indices(document.normalized())
    if mask is not None:
        arr = np.asarray(mask, dtype=np.int8)
        if len(arr) != len(rows):
            raise ValueError("mask length does not match document length")
        rows[arr == 1] = vocab.mask_index
    return rows


def mean_rows(embeddings: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Mean of the selected embedding rows, order-insensitive in float.

    Rows are aggregated per unique index so that permuting positions with
    identical content cannot change the result through summation order.
    """
    unique, counts = np.unique(rows, return_counts=True)
    weights = counts.astype(np.float64) / len(rows)
    return weights @ embeddings[unique].astype(np.float64)


def encode_document(params: ModelParams, document: Document, mask=None) -> np.ndarray:
    """Embed a (possibly masked) document."""
    rows = document_row_indices(params.vocab, document, mask)
    mean = mean_rows(params.embeddings, rows)
    return mean @ params.doc_proj.astype(np.float64)


def encode_profile(params: ModelParams, profile: Profile) -> np.ndarray:
    """Embed a profile through its linearization; profiles are never masked."""
    linearized = linearize_profile(profile)
    rows = params.vocab.indices(linearized.normalized())
    mean = mean_rows(params.embeddings, rows)
    return mean @ params.profile_proj.astype(np.float64)


def build_profile_matrix(params: ModelParams, store: ProfileStore | Sequence[Profile]) -> np.ndarray:
    """Stack profile embeddings, one row per profile in store order."""
    profiles = list(store)
    if not profiles:
        raise ValueError("profile store is empty")
    return np.stack([encode_profile(params, p) for p in profiles])


def score_and_normalize(doc_emb: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Softmax over dot-product scores, stabilized by max subtraction."""
    scores = matrix.astype(np.float64) @ np.asarray(doc_emb, dtype=np.float64)
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def rank_of(values: np.ndarray, index: int) -> int:
    """1-based rank of values[index] under descending sort.

    Ties are broken in favor of the lower index, so among equal values the
    lowest index ranks first.
    """
    values = np.asarray(values)
    if index < 0 or index >= len(values):
        raise IndexError(f"index {index} out of range for {len(values)} values")
    target = values[index]
    return int(1 + np.sum(values > target) + np.sum(values[:index] == target))


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write a checkpoint: one JSON header line, then raw float32 arrays."""
    arrays = [
        ("embeddings", params.embeddings),
        ("doc_proj", params.doc_proj),
        ("profile_proj", params.profile_proj),
    ]
    offset = 0
    manifest = []
    payload = []
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "bytes": len(data)})
        payload.append(data)
        offset += len(data)
    header = {
        "version": params.version,
        "dim": params.dim,
        "out_dim": params.out_dim,
        "label_smoothing": params.label_smoothing,
        "hash_buckets": params.vocab.hash_buckets,
        "terms": list(params.vocab.terms),
        "arrays": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for data in payload:
            fh.write(data)


def load_checkpoint(path: str | Path) -> ModelParams:
    """Load a checkpoint, rejecting unknown versions."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version!r} not supported (expected {CHECKPOINT_VERSION})"
        )
    vocab = Vocabulary(header["terms"], hash_buckets=header["hash_buckets"])
    out: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        start = spec["offset"]
        end = start + spec["bytes"]
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint payload in {path}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(spec["shape"])
        out[spec["name"]] = arr.copy()
    for name in ("embeddings", "doc_proj", "profile_proj"):
        if name not in out:
            raise CheckpointError(f"checkpoint missing array {name!r}")
    if out["embeddings"].shape[0] != vocab.n_rows:
        raise CheckpointError("embedding table does not match vocabulary layout")
    return ModelParams(
        vocab=vocab,
        embeddings=out["embeddings"],
        doc_proj=out["doc_proj"],
        profile_proj=out["profile_proj"],
        label_smoothing=float(header.get("label_smoothing", 0.0)),
        version=version,
    )
