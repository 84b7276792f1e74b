import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dftbench import evaluate as ev
from dftbench.evaluate import (
    MetricError, MetricReport, OracleEps, ddpm_sample, frechet_feature_distance, frechet_from_stats,
    knn_precision_recall, object_region_error, sqrtm_product, survival_report,
)
from dftbench.finetune import to_model_space
from dftbench.model import DiT, DiTConfig
from dftbench.scenes import BBox, SceneSample, gen_target_dataset
from dftbench.schedule import build_linear, build_scos, mu_from_eps


def _spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


# -- sampler -------------------------------------------------------------------

class _ConstEps:
    def __call__(self, x, t, y):
        return np.full(x.shape, 0.1)


def test_sampler_determinism_and_empty():
    sched = build_linear(50)
    a = ddpm_sample(_ConstEps(), sched, 0, np.random.default_rng(3), 2, (4, 4, 3))
    b = ddpm_sample(_ConstEps(), sched, 0, np.random.default_rng(3), 2, (4, 4, 3))
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    assert ddpm_sample(_ConstEps(), sched, 0, np.random.default_rng(3), 0, (4, 4, 3)).shape == (0, 4, 4, 3)


def test_sampler_horizon_mismatch():
    m = DiT(DiTConfig(image_size=8, patch=4, dim=16, heads=2, depth=1, T=100))
    with pytest.raises(ValueError, match="horizon"):
        ddpm_sample(m, build_linear(1000), 0, np.random.default_rng(0), 1, (8, 8, 3))


def test_oracle_sampler_collapses_to_x0():
    sched = build_linear(1000)
    img = gen_target_dataset(1, 0)[0].image.astype(np.float64)
    x0 = to_model_space(img)[None]
    out = ddpm_sample(OracleEps(x0, sched), sched, 0, np.random.default_rng(0), 1, img.shape,
                      return_model_space=True)
    assert np.mean((out - x0) ** 2) < 1e-2


def test_sampler_steps_follow_reparameterization():
    sched = build_scos(1000, 2)
    seen = []

    def cb(t, x, eps, mean):
        seen.append(t)
        np.testing.assert_allclose(mean, mu_from_eps(x, t, eps, sched), rtol=0, atol=0)

    ddpm_sample(_ConstEps(), sched, 0, np.random.default_rng(0), 1, (2, 2, 3), callback=cb)
    assert seen == list(range(1000, 0, -1))


# -- Frechet ------------------------------------------------------------------

def test_frechet_identical_and_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((60, 5)), rng.standard_normal((80, 5)) + 0.3
    assert frechet_feature_distance(a, a) == pytest.approx(0, abs=1e-8)
    assert abs(frechet_feature_distance(a, b) - frechet_feature_distance(b, a)) < 1e-10
    assert frechet_feature_distance(a, b) > 0


def test_frechet_closed_form_1d():
    assert frechet_from_stats([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-12)
    # diagonal Gaussians: |dmu|^2 + sum (s1 - s2)^2
    assert frechet_from_stats([0, 0], np.diag([1.0, 4.0]), [0, 0], np.diag([4.0, 9.0])) == pytest.approx(2.0)


def test_frechet_sample_requirements():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((10, 39)), rng.standard_normal((12, 39))
    with pytest.raises(MetricError):
        frechet_feature_distance(a, b)
    d = frechet_feature_distance(a, b, diagonal_fallback=True)
    assert d >= 0
    assert frechet_feature_distance(a, a, diagonal_fallback=True) == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_matrix_sqrt_squares_back(seed, d):
    rng = np.random.default_rng(seed)
    s1, s2 = _spd(rng, d), _spd(rng, d)
    r = sqrtm_product(s1, s2)
    prod = s1 @ s2
    assert np.linalg.norm(r @ r - prod) / np.linalg.norm(prod) < 1e-6
    assert ev.trace_sqrt_product(s1, s2) == pytest.approx(np.trace(r), rel=1e-8)


# -- precision / recall -------------------------------------------------------

def test_precision_recall_examples():
    rng = np.random.default_rng(0)
    real = rng.standard_normal((40, 4))
    assert knn_precision_recall(real, real.copy(), 3) == (1.0, 1.0)
    r_rad = ev.knn_radii(real, 3).max()
    far = real + 100 * max(r_rad, 1.0) * 10
    g_rad = ev.knn_radii(far, 3).max()
    assert np.linalg.norm(far.mean(0) - real.mean(0)) > 100 * max(r_rad, g_rad)
    assert knn_precision_recall(real, far, 3) == (0.0, 0.0)
    with pytest.raises(MetricError):
        knn_precision_recall(real[:3], real, 3)


def test_precision_permutation_invariant():
    rng = np.random.default_rng(1)
    real, gen = rng.standard_normal((30, 3)), rng.standard_normal((25, 3)) * 1.5
    p, r = knn_precision_recall(real, gen, 4)
    p2, r2 = knn_precision_recall(real[rng.permutation(30)], gen[rng.permutation(25)], 4)
    assert (p, r) == (p2, r2)
    assert 0 < p < 1 and 0 < r <= 1


# -- object region error ------------------------------------------------------

def _samples():
    return gen_target_dataset(6, 2)


def test_object_region_error_oracle_zero():
    sched = build_linear()
    s = _samples()
    oracle = OracleEps(to_model_space(np.stack([x.image for x in s]).astype(np.float64)), sched)
    assert object_region_error(oracle, sched, s, 200) == pytest.approx(0, abs=1e-24)


def test_object_region_error_ignores_background():
    sched = build_linear()
    s = _samples()
    m = DiT(seed=0)
    rng = np.random.default_rng(0)
    for _, p in m.named_parameters():
        p.data = (p.data + rng.normal(0, 0.02, p.shape)).astype(np.float32)

    class Local:  # per-pixel predictor: background cannot leak into box pixels
        def __call__(self, x, t, y):
            return 0.3 * np.asarray(x, dtype=np.float64)

    e1 = object_region_error(Local(), sched, s, 200)
    s2 = []
    for x in s:
        img = x.image.copy()
        keep = np.zeros(img.shape[:2], bool)
        for b in x.boxes:
            keep[b.y:b.y + b.h, b.x:b.x + b.w] = True
        img[~keep] = rng.random(img[~keep].shape)
        s2.append(SceneSample(img, x.condition_id, x.boxes))
    assert object_region_error(Local(), sched, s2, 200) == pytest.approx(e1, rel=1e-12)


def test_object_region_error_contracts():
    sched = build_linear()
    no_boxes = [SceneSample(np.zeros((32, 32, 3), np.float32), 0, [])]
    with pytest.raises(MetricError):
        object_region_error(_ConstEps(), sched, no_boxes, 200)
    with pytest.raises(ValueError):
        object_region_error(_ConstEps(), sched, _samples(), 0)


# -- survival report & metric report ----------------------------------------------

def test_survival_report_buckets():
    data = gen_target_dataset(100, 0)
    rows = survival_report(data, {"linear": build_linear(), "scos2": build_scos(1000, 2)})
    assert len(rows) == 6
    assert [r["bucket"] for r in rows[:3]] == ["3-4", "5-6", "7-8"]
    one = [SceneSample(data[0].image, 0, [BBox(0, 0, 3, 3)])]
    rows = survival_report(one, {"linear": build_linear()})
    assert rows[1]["mean_survival"] == "NA" and rows[2]["mean_survival"] == "NA"
    assert "linear,5-6,0,NA" in ev.survival_csv(rows)


def test_metric_report_invariants():
    r = MetricReport(1.0, 0.5, 0.5, 0.1, 0.02, 3.0)
    assert r.to_csv().splitlines()[0] == ("frechet_distance,precision,recall,object_region_mse,"
                                          "trainable_param_fraction,runtime_seconds")
    with pytest.raises(MetricError):
        MetricReport(-1.0, 0.5, 0.5, 0.1, 0.0, 0.0)
    with pytest.raises(MetricError):
        MetricReport(1.0, 1.5, 0.5, 0.1, 0.0, 0.0)
