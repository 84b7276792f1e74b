"""Ancestral sampling and sample-quality metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .finetune import from_model_space, to_model_space
from .scenes import SceneSample
from .schedule import NoiseSchedule, mu_from_eps, predict_x0, q_sample, region_survival_time
from .ssei import FEATURE_DIM, extract_features_batch

EpsPredictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    frechet_distance: float
    precision: float
    recall: float
    object_region_mse: float
    trainable_param_fraction: float
    runtime_seconds: float

    def __post_init__(self):
        if self.frechet_distance < 0:
            raise MetricError("frechet_distance must be >= 0")
        for name in ("precision", "recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} must lie in [0, 1]")

    def to_csv(self) -> str:
        keys = list(self.__dataclass_fields__)
        return ",".join(keys) + "\n" + ",".join(f"{getattr(self, k):.8g}" for k in keys) + "\n"


def _predictor(model) -> EpsPredictor:
    return model.predict_eps if hasattr(model, "predict_eps") else model


def ddpm_sample(model, sched: NoiseSchedule, condition_id, rng: np.random.Generator, n: int,
                image_shape: tuple[int, int, int] = (32, 32, 3), return_model_space: bool = False,
                callback: Callable | None = None) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0; returns images in [0, 1].

    ``condition_id`` is one embedding row for all samples or one per sample.
    """
    T = getattr(getattr(model, "cfg", None), "T", sched.T)
    if T != sched.T:
        raise ValueError(f"model horizon {T} != schedule horizon {sched.T}")
    if n == 0:
        return np.zeros((0,) + tuple(image_shape), dtype=np.float32)
    predict = _predictor(model)
    y = np.broadcast_to(np.asarray(condition_id), (n,))
    x = rng.standard_normal((n,) + tuple(image_shape))
    for t in range(sched.T, 0, -1):
        tt = np.full(n, t)
        eps = np.asarray(predict(x, tt, y), dtype=np.float64)
        mean = mu_from_eps(x, t, eps, sched)
        if callback is not None:
            callback(t, x, eps, mean)
        if t > 1:
            x = mean + np.sqrt(sched.posterior_var[t]) * rng.standard_normal(x.shape)
        else:
            x = mean
    if return_model_space:
        return x
    return from_model_space(x).astype(np.float32)


# -- Frechet distance -----------------------------------------------------------

def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def sqrtm_product(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """A square root of s1 @ s2 for symmetric PSD s1, s2.

    Uses s1^1/2 (s1^1/2 s2 s1^1/2)^1/2 s1^-1/2 with a pseudo-inverse, so it is
    exact when s1 is non-singular.
    """
    r1 = _sym_sqrt(s1)
    w, v = np.linalg.eigh((s1 + s1.T) / 2)
    wc = np.clip(w, 0, None)
    inv_sqrt = np.where(wc > wc.max() * 1e-12, 1.0 / np.sqrt(np.where(wc > 0, wc, 1)), 0.0)
    r1_inv = (v * inv_sqrt) @ v.T
    return r1 @ _sym_sqrt(r1 @ s2 @ r1) @ r1_inv


def trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """tr((s1 s2)^1/2) via the symmetric form s1^1/2 s2 s1^1/2."""
    r1 = _sym_sqrt(s1)
    w = np.linalg.eigvalsh(r1 @ s2 @ r1)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_from_stats(mu1, s1, mu2, s2) -> float:
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    d = mu1 - mu2
    val = d @ d + np.trace(s1) + np.trace(s2) - 2.0 * trace_sqrt_product(s1, s2)
    return float(max(val, 0.0))


def frechet_feature_distance(set_a: np.ndarray, set_b: np.ndarray, diagonal_fallback: bool = False) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (rows = samples).

    Full covariance needs more samples than feature dimensions in both sets;
    with ``diagonal_fallback`` smaller sets use per-dimension variances.
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    dim = a.shape[1]
    if min(len(a), len(b)) < 2:
        raise MetricError("need at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    if min(len(a), len(b)) >= dim + 1:
        ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
        # symmetrize the trace term: tr sqrt(AB) == tr sqrt(BA) in exact arithmetic
        d = mu_a - mu_b
        t = 0.5 * (trace_sqrt_product(ca, cb) + trace_sqrt_product(cb, ca))
        return float(max(d @ d + np.trace(ca) + np.trace(cb) - 2.0 * t, 0.0))
    if not diagonal_fallback:
        raise MetricError(f"need >= {dim + 1} samples per set for full covariance "
                          f"(got {len(a)}, {len(b)}); pass diagonal_fallback=True")
    va, vb = a.var(0, ddof=1), b.var(0, ddof=1)
    return float(((mu_a - mu_b) ** 2).sum() + ((np.sqrt(va) - np.sqrt(vb)) ** 2).sum())


# -- precision / recall ------------------------------------------------------

def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.clip(d2, 0, None))


def knn_radii(feats: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour (itself excluded)."""
    d = _pairwise(feats, feats)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, k - 1]


def manifold_coverage(ref: np.ndarray, query: np.ndarray, k: int) -> float:
    """Fraction of query points inside the union of ref's k-NN balls."""
    radii = knn_radii(ref, k)
    d = _pairwise(query, ref)
    return float(np.mean((d <= radii[None, :]).any(axis=1)))


def knn_precision_recall(real_feats: np.ndarray, gen_feats: np.ndarray, k: int = 3) -> tuple[float, float]:
    real = np.asarray(real_feats, dtype=np.float64)
    gen = np.asarray(gen_feats, dtype=np.float64)
    if k < 1 or len(real) < k + 1 or len(gen) < k + 1:
        raise MetricError(f"k={k} too large for sets of size {len(real)} and {len(gen)}")
    return manifold_coverage(real, gen, k), manifold_coverage(gen, real, k)


# -- object-region fidelity --------------------------------------------------

def object_region_error(model, sched: NoiseSchedule, samples: Sequence[SceneSample], t_probe: int = 200,
                        seed: int = 0, label_offset: int = 0) -> float:
    """MSE (image units) of the one-shot x0 estimate at ``t_probe``, inside boxes only."""
    if not 1 <= t_probe <= sched.T:
        raise ValueError(f"t_probe outside [1, {sched.T}]")
    if not any(s.boxes for s in samples):
        raise MetricError("no boxes in any sample")
    predict = _predictor(model)
    rng = np.random.default_rng(seed)
    x0 = to_model_space(np.stack([s.image for s in samples]).astype(np.float64))
    eps = rng.standard_normal(x0.shape)
    t = np.full(len(samples), t_probe)
    xt = q_sample(x0, t, eps, sched)
    y = np.array([s.condition_id for s in samples]) + label_offset
    eps_hat = np.asarray(predict(xt, t, y), dtype=np.float64)
    x0_hat = predict_x0(xt, t, eps_hat, sched)
    sq, count = 0.0, 0
    for i, s in enumerate(samples):
        m = np.zeros(x0.shape[1:3], dtype=bool)
        for b in s.boxes:
            m[b.y:b.y + b.h, b.x:b.x + b.w] = True
        # model space is twice image scale
        diff = (x0_hat[i][m] - x0[i][m]) / 2.0
        sq += float((diff ** 2).sum())
        count += diff.size
    return sq / count


class OracleEps:
    """Test double that returns the exact noise relating x_t to known clean images."""

    def __init__(self, x0: np.ndarray, sched: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.sched = sched

    def __call__(self, xt, t, y):
        t = np.asarray(t)
        ab = self.sched.alpha_bar[t].reshape(-1, *([1] * (self.x0.ndim - 1)))
        return (np.asarray(xt, dtype=np.float64) - np.sqrt(ab) * self.x0) / np.sqrt(1.0 - ab)


# -- survival analysis ---------------------------------------------------------

SIZE_BUCKETS = ((3, 4), (5, 6), (7, 8))


def bucket_of(size: int) -> str | None:
    for lo, hi in SIZE_BUCKETS:
        if lo <= size <= hi:
            return f"{lo}-{hi}"
    return None


def survival_report(dataset: Sequence[SceneSample], schedules: Mapping[str, NoiseSchedule],
                    threshold: float = 1.0) -> list[dict]:
    """Mean survival time per (schedule, box-size bucket); empty buckets give 'NA'."""
    rows = []
    for name, sched in schedules.items():
        acc: dict[str, list[int]] = {f"{lo}-{hi}": [] for lo, hi in SIZE_BUCKETS}
        for s in dataset:
            for b in s.boxes:
                key = bucket_of(b.size)
                if key is not None:
                    acc[key].append(region_survival_time(s.image, b.as_tuple(), sched, threshold))
        for key, vals in acc.items():
            rows.append({"schedule": name, "bucket": key, "count": len(vals),
                         "mean_survival": float(np.mean(vals)) if vals else "NA"})
    return rows


def survival_csv(rows: list[dict]) -> str:
    out = ["schedule,bucket,count,mean_survival"]
    for r in rows:
        m = r["mean_survival"]
        out.append(f"{r['schedule']},{r['bucket']},{r['count']},{m if m == 'NA' else f'{m:.4f}'}")
    return "\n".join(out) + "\n"


# -- full evaluation -----------------------------------------------------------

def sample_conditions(model, sched: NoiseSchedule, rows: Sequence[int], per_row: int,
                      seed: int) -> np.ndarray:
    """``per_row`` samples for each embedding row, in one batched chain."""
    y = np.repeat(np.asarray(rows), per_row)
    return ddpm_sample(model, sched, y, np.random.default_rng(seed), len(y))


def evaluate(model, sched: NoiseSchedule, real: Sequence[SceneSample], n: int, k: int = 3,
             seed: int = 0, label_offset: int = 0, trainable_fraction: float = 0.0,
             t_probe: int = 200) -> tuple[MetricReport, np.ndarray]:
    start = time.perf_counter()
    conds = sorted({s.condition_id for s in real})
    per = max(1, n // len(conds))
    gen = sample_conditions(model, sched, [c + label_offset for c in conds], per, seed)
    real_f = extract_features_batch(np.stack([s.image for s in real]))
    gen_f = extract_features_batch(gen)
    fd = frechet_feature_distance(real_f, gen_f, diagonal_fallback=True)
    kk = min(k, len(gen_f) - 1)
    prec, rec = knn_precision_recall(real_f, gen_f, kk)
    with_boxes = [s for s in real if s.boxes]
    ore = object_region_error(model, sched, with_boxes, t_probe, seed, label_offset) if with_boxes else float("nan")
    return MetricReport(fd, prec, rec, ore, trainable_fraction, time.perf_counter() - start), gen


__all__ = [
    "FEATURE_DIM", "MetricReport", "ddpm_sample", "frechet_feature_distance", "knn_precision_recall",
    "object_region_error", "survival_report", "evaluate", "OracleEps", "sqrtm_product",
]
