"""Semantic-selective embedding initialization.

New condition rows are copied from the source class whose mean feature
vector is closest in cosine similarity. Features come from a fixed
handcrafted extractor (3x3 grid RGB means plus per-channel global stats).
"""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import numpy as np

FEATURE_DIM = 39


class SimilarityError(ValueError):
    """Cosine similarity is undefined for a zero vector."""


def extract_features(image: np.ndarray) -> np.ndarray:
    """39-d descriptor: 27 grid means (3x3 cells x RGB) + mean/std/min/max per channel."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    H, W, _ = img.shape
    rows = np.array_split(np.arange(H), 3)
    cols = np.array_split(np.arange(W), 3)
    grid = [img[r[0]:r[-1] + 1, c[0]:c[-1] + 1].mean(axis=(0, 1)) for r in rows for c in cols]
    flat = img.reshape(-1, 3)
    stats = np.concatenate([flat.mean(0), flat.std(0), flat.min(0), flat.max(0)])
    return np.concatenate([np.concatenate(grid), stats])


def extract_features_batch(images: np.ndarray) -> np.ndarray:
    return np.stack([extract_features(im) for im in images]) if len(images) else np.zeros((0, FEATURE_DIM))


def class_means(features: np.ndarray, labels: Sequence[int]) -> dict[int, np.ndarray]:
    """Mean feature per label, keyed in ascending label order."""
    groups: dict[int, list[np.ndarray]] = defaultdict(list)
    for f, lab in zip(features, labels):
        groups[int(lab)].append(f)
    return {k: np.mean(groups[k], axis=0) for k in sorted(groups)}


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise SimilarityError("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def nearest_source_class(target_mean: np.ndarray, source_means: Sequence[np.ndarray]) -> int:
    """argmax_i cos(source_i, target); ties resolve to the lowest index."""
    target = np.asarray(target_mean, dtype=np.float64)
    S = np.asarray(source_means, dtype=np.float64)
    if np.linalg.norm(target) == 0:
        raise SimilarityError("target feature vector is zero")
    norms = np.linalg.norm(S, axis=1)
    if np.any(norms == 0):
        raise SimilarityError("source feature vector is zero")
    sims = (S @ target) / (norms * np.linalg.norm(target))
    return int(np.argmax(sims))  # argmax returns the first maximum


def assign_conditions(target_means: Mapping[int, np.ndarray],
                      source_means: Mapping[int, np.ndarray]) -> list[tuple[int, int, float]]:
    """(condition_id, source_class, cosine) for every target condition."""
    src_ids = list(source_means)
    src = [source_means[i] for i in src_ids]
    out = []
    for cond, vec in target_means.items():
        idx = nearest_source_class(vec, src)
        out.append((cond, src_ids[idx], cosine(src[idx], vec)))
    return out


def init_condition_embeddings(table, assignments: Mapping[int, int] | Sequence[int]) -> int:
    """Append one row per new condition, copied from its assigned source row.

    ``assignments`` maps condition j (0..M-1, contiguous) to a source row index.
    Returns the table index of condition 0.
    """
    if isinstance(assignments, Mapping):
        conds = sorted(assignments)
        if conds != list(range(len(conds))):
            raise ValueError("assignments must cover conditions 0..M-1")
        src = [assignments[c] for c in conds]
    else:
        src = list(assignments)
    rows = table.rows()
    n_src = table.num_base
    for i in src:
        if not 0 <= int(i) < n_src:
            raise IndexError(f"source row {i} out of range [0, {n_src})")
    return table.expand(rows[np.asarray(src, dtype=int)])


def ssei_assignments(source_images: np.ndarray, source_labels: Iterable[int],
                     target_images: np.ndarray, target_conditions: Iterable[int]):
    """Full SSEI pipeline on raw images; returns (condition, class, cosine) rows."""
    src_means = class_means(extract_features_batch(source_images), list(source_labels))
    tgt_means = class_means(extract_features_batch(target_images), list(target_conditions))
    return assign_conditions(tgt_means, src_means)


def init_random_embeddings(table, count: int, rng: np.random.Generator, std: float = 0.02) -> int:
    """Baseline: append ``count`` freshly drawn N(0, std^2) rows (the table's own init)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return table.expand(rng.normal(0.0, std, size=(count, table.dim)))
