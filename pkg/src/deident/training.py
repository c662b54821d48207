"""Training loop for the reidentification encoders.

Documents are corrupted online with a fresh random dropout mask each epoch:
the mask count is drawn uniformly from {0..N}, then that many positions are
chosen without replacement (optionally weighted by IDF). Optimization
alternates between the two encoders: even-indexed epochs update the
document side against a fixed profile matrix, odd-indexed epochs update the
profile side on unmasked documents and then rebuild the matrix. After a
configurable budget of profile epochs, only the document side trains.

Targets are label-smoothed one-hot distributions over the full profile
store (no negative sampling). Gradients are computed analytically and
clipped by global norm; updates are plain SGD with linear warmup and decay.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, Document, ProfileStore, Vocabulary, compute_idf, linearize_profile
from .encoder import (
    ModelParams,
    document_row_indices,
    init_params,
    mean_rows,
    rank_of,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

MASK_PRIORS = ("uniform", "idf", "off")


@dataclass
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 2.0
    clip_norm: float = 5.0
    label_smoothing: float = 0.1
    mask_prior: str = "uniform"
    embed_dim: int = 64
    seed: int = 0
    profile_epochs: int = 5
    warmup_epochs: int = 2
    batch_size: int = 32
    hash_buckets: int = 2**18
    heldout_fraction: float = 0.05
    heldout_mask_rate: float = 0.3

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.mask_prior not in MASK_PRIORS:
            raise ValueError(f"mask_prior must be one of {MASK_PRIORS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must be in [0, 1)")


def random_mask(rng: np.random.Generator, n: int, count: int, weights=None) -> np.ndarray:
    """Mask with exactly `count` ones over n positions.

    Uniform without replacement by default; with weights, positions are
    drawn without replacement proportional to weight. If count exceeds the
    number of positive-weight positions, the remainder is drawn uniformly
    from the zero-weight ones.
    """
    if count < 0 or count > n:
        raise ValueError(f"count {count} out of range for {n} positions")
    mask = np.zeros(n, dtype=np.int8)
    if count == 0:
        return mask
    if weights is None:
        chosen = rng.choice(n, size=count, replace=False)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if len(w) != n or np.any(w < 0):
            raise ValueError("weights must be nonnegative and length n")
        positive = int(np.count_nonzero(w))
        if positive == 0:
            chosen = rng.choice(n, size=count, replace=False)
        elif count <= positive:
            chosen = rng.choice(n, size=count, replace=False, p=w / w.sum())
        else:
            zero_positions = np.flatnonzero(w == 0)
            extra = rng.choice(zero_positions, size=count - positive, replace=False)
            chosen = np.concatenate([np.flatnonzero(w > 0), extra])
    mask[chosen] = 1
    return mask


def sample_mask(rng: np.random.Generator, n: int, prior: str = "uniform", weights=None) -> np.ndarray:
    """Draw a dropout mask: count uniform on {0..n}, positions per prior."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if prior not in MASK_PRIORS:
        raise ValueError(f"unknown mask prior {prior!r}")
    if prior == "off":
        return np.zeros(n, dtype=np.int8)
    count = int(rng.integers(0, n + 1))
    return random_mask(rng, n, count, weights=weights if prior == "idf" else None)


def smoothed_targets(true_index: int, n_classes: int, alpha: float) -> np.ndarray:
    """(1 - alpha) * one-hot + alpha * uniform."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    if not 0 <= true_index < n_classes:
        raise IndexError("true_index out of range")
    target = np.full(n_classes, alpha / n_classes, dtype=np.float64)
    target[true_index] += 1.0 - alpha
    return target


def cross_entropy(distribution: np.ndarray, target: np.ndarray) -> float:
    """H(target, distribution) = -sum target_i * ln p_i, clamping p at 1e-12."""
    p = np.asarray(distribution, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("distribution and target lengths differ")
    clamped = (t > 0) & (p < 1e-12)
    if np.any(clamped):
        logger.warning("clamped %d near-zero probabilities in cross_entropy", int(clamped.sum()))
    return float(-(t @ np.log(np.maximum(p, 1e-12))))


@dataclass
class Gradients:
    """Sparse gradient of one phase: a projection block plus touched embedding rows."""

    which: str
    proj: np.ndarray
    emb_rows: np.ndarray
    emb_grads: np.ndarray

    def global_norm(self) -> float:
        return float(np.sqrt(np.sum(self.proj**2) + np.sum(self.emb_grads**2)))

    def dense_embeddings(self, n_rows: int) -> np.ndarray:
        dense = np.zeros((n_rows, self.emb_grads.shape[1]), dtype=np.float64)
        dense[self.emb_rows] = self.emb_grads
        return dense


def clip_gradients(grads: Gradients, max_norm: float) -> float:
    """Scale grads in place to global norm <= max_norm; returns the pre-clip norm."""
    norm = grads.global_norm()
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads.proj *= scale
        grads.emb_grads *= scale
    return norm


def apply_gradients(params: ModelParams, grads: Gradients, lr: float) -> None:
    dtype = params.embeddings.dtype
    if grads.which == "doc":
        params.doc_proj -= (lr * grads.proj).astype(dtype)
    else:
        params.profile_proj -= (lr * grads.proj).astype(dtype)
    if len(grads.emb_rows):
        params.embeddings[grads.emb_rows] -= (lr * grads.emb_grads).astype(dtype)


class ProfileEncodingIndex:
    """Precomputed token-row structure for encoding every profile at once."""

    def __init__(self, vocab: Vocabulary, store: ProfileStore | Sequence):
        profiles = list(store)
        rows_parts, seg_parts, weight_parts = [], [], []
        for i, profile in enumerate(profiles):
            rows = vocab.indices(linearize_profile(profile).normalized())
            unique, counts = np.unique(rows, return_counts=True)
            rows_parts.append(unique)
            seg_parts.append(np.full(len(unique), i, dtype=np.int64))
            weight_parts.append(counts.astype(np.float64) / len(rows))
        self.n_profiles = len(profiles)
        self.flat_rows = np.concatenate(rows_parts)
        self.flat_seg = np.concatenate(seg_parts)
        self.flat_weights = np.concatenate(weight_parts)
        self.unique_rows, self.flat_to_unique = np.unique(self.flat_rows, return_inverse=True)

    def mean_matrix(self, params: ModelParams) -> np.ndarray:
        """Per-profile mean token embedding (before projection)."""
        pbar = np.zeros((self.n_profiles, params.dim), dtype=np.float64)
        contrib = params.embeddings[self.flat_rows].astype(np.float64) * self.flat_weights[:, None]
        np.add.at(pbar, self.flat_seg, contrib)
        return pbar

    def profile_matrix(self, params: ModelParams) -> np.ndarray:
        return self.mean_matrix(params) @ params.profile_proj.astype(np.float64)


def _record_unique_weights(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    unique, counts = np.unique(rows, return_counts=True)
    return unique, counts.astype(np.float64) / len(rows)


def _softmax_loss_rows(scores: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy over rows plus its score gradient (P - T) / B."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = float(-(targets * logp).sum(axis=1).mean())
    probs = np.exp(logp)
    dscores = (probs - targets) / scores.shape[0]
    return loss, dscores


def doc_batch_gradients(
    params: ModelParams,
    row_arrays: Sequence[np.ndarray],
    true_indices: Sequence[int],
    matrix: np.ndarray,
    alpha: float,
) -> tuple[float, Gradients]:
    """Loss and document-side gradients against a fixed profile matrix."""
    batch = len(row_arrays)
    n_profiles = matrix.shape[0]
    uniques, weights = zip(*(_record_unique_weights(r) for r in row_arrays))
    ebar = np.stack(
        [w @ params.embeddings[u].astype(np.float64) for u, w in zip(uniques, weights)]
    )
    doc_proj = params.doc_proj.astype(np.float64)
    feats = ebar @ doc_proj
    scores = feats @ matrix.T
    targets = np.full((batch, n_profiles), alpha / n_profiles, dtype=np.float64)
    targets[np.arange(batch), np.asarray(true_indices)] += 1.0 - alpha
    loss, dscores = _softmax_loss_rows(scores, targets)
    dfeats = dscores @ matrix
    dproj = ebar.T @ dfeats
    debar = dfeats @ doc_proj.T
    flat_rows = np.concatenate(uniques)
    flat_seg = np.concatenate([np.full(len(u), i, dtype=np.int64) for i, u in enumerate(uniques)])
    flat_w = np.concatenate(weights)
    contrib = flat_w[:, None] * debar[flat_seg]
    unique_rows, inverse = np.unique(flat_rows, return_inverse=True)
    acc = np.zeros((len(unique_rows), params.dim), dtype=np.float64)
    np.add.at(acc, inverse, contrib)
    return loss, Gradients(which="doc", proj=dproj, emb_rows=unique_rows, emb_grads=acc)


def profile_batch_gradients(
    params: ModelParams,
    doc_embs: np.ndarray,
    true_indices: Sequence[int],
    pindex: ProfileEncodingIndex,
    alpha: float,
) -> tuple[float, Gradients]:
    """Loss and profile-side gradients with document embeddings held fixed."""
    batch = doc_embs.shape[0]
    n_profiles = pindex.n_profiles
    pbar = pindex.mean_matrix(params)
    profile_proj = params.profile_proj.astype(np.float64)
    matrix = pbar @ profile_proj
    scores = doc_embs @ matrix.T
    targets = np.full((batch, n_profiles), alpha / n_profiles, dtype=np.float64)
    targets[np.arange(batch), np.asarray(true_indices)] += 1.0 - alpha
    loss, dscores = _softmax_loss_rows(scores, targets)
    dmatrix = dscores.T @ doc_embs
    dproj = pbar.T @ dmatrix
    dpbar = dmatrix @ profile_proj.T
    contrib = pindex.flat_weights[:, None] * dpbar[pindex.flat_seg]
    acc = np.zeros((len(pindex.unique_rows), params.dim), dtype=np.float64)
    np.add.at(acc, pindex.flat_to_unique, contrib)
    return loss, Gradients(which="profile", proj=dproj, emb_rows=pindex.unique_rows, emb_grads=acc)


def grad_step(
    params: ModelParams,
    batch: Sequence[tuple[Document, np.ndarray | None, int]],
    target,
    which: str,
    config: TrainConfig,
    lr: float | None = None,
) -> tuple[ModelParams, float]:
    """One clipped SGD update on the selected encoder.

    For which="doc", target is the fixed profile matrix and batch masks are
    honored. For which="profile", target is a ProfileEncodingIndex (or a
    ProfileStore) encoded live, and documents are used unmasked.
    """
    if which not in ("doc", "profile"):
        raise ValueError("which must be 'doc' or 'profile'")
    if lr is None:
        lr = config.learning_rate
    alpha = config.label_smoothing
    true_indices = [b[2] for b in batch]
    if which == "doc":
        rows = [document_row_indices(params.vocab, doc, mask) for doc, mask, _ in batch]
        loss, grads = doc_batch_gradients(params, rows, true_indices, np.asarray(target), alpha)
    else:
        pindex = target if isinstance(target, ProfileEncodingIndex) else ProfileEncodingIndex(params.vocab, target)
        embs = np.stack(
            [
                mean_rows(params.embeddings, document_row_indices(params.vocab, doc))
                @ params.doc_proj.astype(np.float64)
                for doc, _, _ in batch
            ]
        )
        loss, grads = profile_batch_gradients(params, embs, true_indices, pindex, alpha)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss}")
    clip_gradients(grads, config.clip_norm)
    apply_gradients(params, grads, lr)
    return params, loss


def _lr_at(config: TrainConfig, epoch: int) -> float:
    peak = config.learning_rate
    warmup = max(0, config.warmup_epochs)
    if epoch < warmup:
        return peak * (epoch + 1) / warmup
    span = config.epochs - 1 - warmup
    if span <= 0:
        return peak
    t = (epoch - warmup) / span
    return peak * (1.0 - 0.9 * t)


def _accuracy(params, matrix, base_rows, masks, true_idx, indices) -> float:
    if len(indices) == 0:
        return float("nan")
    doc_proj = params.doc_proj.astype(np.float64)
    hits = 0
    for i in indices:
        rows = base_rows[i]
        if masks is not None:
            rows = rows.copy()
            rows[masks[i] == 1] = params.vocab.mask_index
        feat = mean_rows(params.embeddings, rows) @ doc_proj
        scores = matrix @ feat
        if rank_of(scores, true_idx[i]) == 1:
            hits += 1
    return hits / len(indices)


def train(
    corpus: Corpus,
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> ModelParams:
    """Train encoders on an aligned corpus.

    Writes the final checkpoint to checkpoint_path and the best-heldout one
    to checkpoint_path + ".best" when a path is given; the training log CSV
    goes to log_path. Fully deterministic for a fixed config.
    """
    config.validate()
    if len(corpus.store) < 2:
        raise ValueError("need at least 2 profiles to train")
    rng = np.random.default_rng(config.seed)
    vocab = Vocabulary.from_corpus(corpus, hash_buckets=config.hash_buckets)
    params = init_params(
        vocab, dim=config.embed_dim, seed=config.seed, label_smoothing=config.label_smoothing
    )
    n = len(corpus.records)
    base_rows = [document_row_indices(vocab, rec.document) for rec in corpus.records]
    true_idx = np.array([corpus.store.index_of(rec.profile_id) for rec in corpus.records])
    pindex = ProfileEncodingIndex(vocab, corpus.store)

    idf_weights = None
    if config.mask_prior == "idf":
        table = compute_idf(corpus)
        idf_weights = [
            np.array([table.idf(t) for t in rec.document.normalized()], dtype=np.float64)
            for rec in corpus.records
        ]

    n_held = 0
    if config.heldout_fraction > 0 and n >= 2:
        n_held = min(n - 1, max(1, int(round(config.heldout_fraction * n))))
    held = np.sort(rng.choice(n, size=n_held, replace=False)) if n_held else np.array([], dtype=int)
    held_set = set(held.tolist())
    train_ids = np.array([i for i in range(n) if i not in held_set])
    held_masks = {
        int(i): random_mask(
            rng, len(base_rows[i]), int(round(config.heldout_mask_rate * len(base_rows[i])))
        )
        for i in held
    }

    matrix = pindex.profile_matrix(params)
    profile_epochs_done = 0
    best_acc = -1.0
    best_params: ModelParams | None = None
    log_rows: list[dict] = []

    for epoch in range(config.epochs):
        lr = _lr_at(config, epoch)
        profile_phase = epoch % 2 == 1 and profile_epochs_done < config.profile_epochs
        order = train_ids[rng.permutation(len(train_ids))]
        losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            trues = true_idx[chunk]
            if profile_phase:
                embs = np.stack(
                    [
                        mean_rows(params.embeddings, base_rows[i]) @ params.doc_proj.astype(np.float64)
                        for i in chunk
                    ]
                )
                loss, grads = profile_batch_gradients(
                    params, embs, trues, pindex, config.label_smoothing
                )
            else:
                rows = []
                for i in chunk:
                    weights = idf_weights[i] if idf_weights is not None else None
                    mask = sample_mask(rng, len(base_rows[i]), prior=config.mask_prior, weights=weights)
                    r = base_rows[i].copy()
                    r[mask == 1] = vocab.mask_index
                    rows.append(r)
                loss, grads = doc_batch_gradients(params, rows, trues, matrix, config.label_smoothing)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            clip_gradients(grads, config.clip_norm)
            apply_gradients(params, grads, lr)
            losses.append(loss)
        if profile_phase:
            profile_epochs_done += 1
            matrix = pindex.profile_matrix(params)

        eval_matrix = pindex.profile_matrix(params)
        acc0 = _accuracy(params, eval_matrix, base_rows, None, true_idx, held)
        acc30 = _accuracy(params, eval_matrix, base_rows, held_masks, true_idx, held)
        log_rows.append(
            {
                "epoch": epoch + 1,
                "phase": "profile" if profile_phase else "doc",
                "mean_loss": float(np.mean(losses)) if losses else float("nan"),
                "heldout_acc_0": acc0,
                "heldout_acc_30": acc30,
                "lr": lr,
            }
        )
        if n_held and not math.isnan(acc30) and acc30 > best_acc:
            best_acc = acc30
            best_params = params.copy()

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
        save_checkpoint(best_params if best_params is not None else params, str(checkpoint_path) + ".best")
    if log_path is not None:
        write_training_log(log_rows, log_path)
    return params


def write_training_log(rows: Sequence[dict], path: str | Path) -> None:
    columns = ["epoch", "phase", "mean_loss", "heldout_acc_0", "heldout_acc_30", "lr"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [
                    row["epoch"],
                    row["phase"],
                    repr(float(row["mean_loss"])),
                    repr(float(row["heldout_acc_0"])),
                    repr(float(row["heldout_acc_30"])),
                    repr(float(row["lr"])),
                ]
            )
