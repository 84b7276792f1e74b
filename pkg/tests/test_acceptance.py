"""Acceptance suite: one PASS/FAIL line per criterion, printed uncaptured.

Criterion 8 shares one pretrained checkpoint across its three seeds (seed
varies the fine-tuning batches, adapter init and sampling noise); criterion 9
reruns the whole training side of criterion 8 and compares checkpoint bytes.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from dftbench import tensor as tt
from dftbench.evaluate import OracleEps, frechet_feature_distance, object_region_error, sample_conditions, survival_report
from dftbench.finetune import (
    TrainConfig, build_mask, osl_loss, prepare_finetune, to_model_space, train, trainable_fraction,
)
from dftbench.model import DiT, DiTConfig, RoPEGrid, rope_apply, wrap_modulation
from dftbench.scenes import gen_source_dataset, gen_target_dataset, stack_images
from dftbench.schedule import build_cosine_power, build_linear, build_scos
from dftbench.ssei import extract_features_batch, init_random_embeddings, nearest_source_class, ssei_assignments
from dftbench.tensor import Tensor, save_checkpoint
from helpers import PRIMITIVES, check_op_gradient, directional_fd, rel_err, tiny_model

PRETRAIN_STEPS = 1000
FINETUNE_STEPS = 500
SEEDS = (0, 1, 2)
N_SOURCE = 500
N_TARGET = 500
N_HELD_OUT = 200
EVAL_PER_CONDITION = 7  # 35 samples per evaluation, diagonal-covariance Frechet
PRETRAIN_LR = 1e-3
FINETUNE_LR = 1e-3
OSL_LAMBDA = 0.25
# half-width model so three seeds of every arm fit the time budget on one core
BENCH = DiTConfig(dim=64, depth=4, heads=4)


@pytest.fixture
def report(capsys):
    def _report(k: int, ok: bool, detail: str, seconds: float | None = None):
        tail = f" [{seconds:.1f}s]" if seconds is not None else ""
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}{tail}")
        assert ok, detail
    return _report


# -- shared pipeline -----------------------------------------------------------

def _pretrain() -> tuple[DiT, float]:
    start = time.perf_counter()
    model = DiT(BENCH, seed=0)
    cfg = TrainConfig(mode="pretrain_full", steps=PRETRAIN_STEPS, learning_rate=PRETRAIN_LR, seed=0)
    train(model, gen_source_dataset(N_SOURCE, 0), cfg)
    return model, time.perf_counter() - start


def _clone(model: DiT) -> DiT:
    m = DiT(model.cfg)
    m.load_state_dict({k: v.copy() for k, v in model.state_dict().items()})
    return m


@pytest.fixture(scope="session")
def data():
    src = gen_source_dataset(N_SOURCE, 0)
    tgt = gen_target_dataset(N_TARGET, 1)
    held = gen_target_dataset(N_HELD_OUT, 2)
    rows = ssei_assignments(stack_images(src), [s.condition_id for s in src],
                            stack_images(tgt), [s.condition_id for s in tgt])
    return {"source": src, "target": tgt, "held": held, "assign": [r[1] for r in rows],
            "held_feats": extract_features_batch(stack_images(held))}


@pytest.fixture(scope="session")
def pretrained():
    return _pretrain()


def _finetune(base: DiT, data, mode: str, seed: int):
    model = _clone(base)
    trainable = prepare_finetune(model, mode, data["assign"])
    cfg = TrainConfig(mode=mode, steps=FINETUNE_STEPS, learning_rate=FINETUNE_LR, seed=seed,
                      tau=FINETUNE_STEPS, schedule="scos", osl_lambda=OSL_LAMBDA)
    train(model, data["target"], cfg, label_offset=model.embed.num_base, trainable=trainable)
    return model, trainable_fraction(model, trainable), cfg.sampling_schedule(model.cfg.T)


def _frechet(model, sched, data, seed: int) -> float:
    rows = [model.embed.num_base + c for c in range(5)]
    gen = sample_conditions(model, sched, rows, EVAL_PER_CONDITION, seed)
    return frechet_feature_distance(data["held_feats"], extract_features_batch(gen), diagonal_fallback=True)


@pytest.fixture(scope="session")
def pipeline(pretrained, data):
    base, pre_seconds = pretrained
    start = time.perf_counter()
    ssei_only = _clone(base)
    prepare_finetune(ssei_only, "finetune_full", data["assign"])
    out = {"seeds": {}, "pretrain_seconds": pre_seconds}
    for seed in SEEDS:
        mod, frac, sched = _finetune(base, data, "finetune_modulation", seed)
        bias, _, _ = _finetune(base, data, "finetune_bias_only", seed)
        out["seeds"][seed] = {
            "fd_mod": _frechet(mod, sched, data, seed),
            "fd_bias": _frechet(bias, sched, data, seed),
            "fd_ssei": _frechet(ssei_only, build_linear(), data, seed),
            "fraction": frac,
            "states": {"mod": mod.state_dict(), "bias": bias.state_dict()},
        }
    out["pretrained_state"] = base.state_dict()
    out["seconds"] = pre_seconds + time.perf_counter() - start
    return out


# -- criteria ------------------------------------------------------------------

def test_criterion_1_schedule_math(report):
    start = time.perf_counter()
    T, b = 1000, 0.008

    def f(t, s):
        return math.cos((t / T + b) / (1 + b) * math.pi / 2) ** s

    lin_oracle = 1.0
    for k in range(1, 501):
        lin_oracle *= 1.0 - (1e-4 + (0.02 - 1e-4) * (k - 1) / (T - 1))
    errs = {"linear": abs(build_linear().alpha_bar[500] / lin_oracle - 1)}
    for s in (2, 6):
        errs[f"cos{s}"] = abs(build_cosine_power(T, s, b).alpha_bar[500] / (f(500, s) / f(0, s)) - 1)
    tails = []
    for s in range(2, 7):
        sc, lin = build_scos(T, s, b), build_linear()
        tails.append(bool(np.array_equal(sc.beta[sc.splice_index:], lin.beta[sc.splice_index:]))
                     and sc.beta[T] == 0.02)
    secs = time.perf_counter() - start
    ok = max(errs.values()) < 1e-6 and all(tails) and secs < 1.0
    detail = (f"linear abar500={build_linear().alpha_bar[500]:.6f}, cos2={build_cosine_power(T, 2).alpha_bar[500]:.6f}, "
              f"cos6={build_cosine_power(T, 6).alpha_bar[500]:.6f}, max rel err {max(errs.values()):.1e}, "
              f"scos tails exact {all(tails)}")
    report(1, ok, detail, secs)


def test_criterion_2_identity_at_init(report):
    start = time.perf_counter()
    model = DiT(DiTConfig(), seed=11)
    rng = np.random.default_rng(0)
    for _, p in model.named_parameters():  # leave the zero-initialized state
        p.data = (p.data + rng.normal(0, 0.02, p.shape)).astype(np.float32)
    x = rng.standard_normal((100, 32, 32, 3)).astype(np.float32)
    t = rng.integers(1, 1001, 100)
    y = rng.integers(0, 10, 100)
    before = model.predict_eps(x, t, y)
    wrap_modulation(model)
    model.embed.expand(model.embed.rows()[[4, 5, 6, 5, 3]])
    after = model.predict_eps(x, t, y)
    secs = time.perf_counter() - start
    same = bool(np.array_equal(before, after))
    report(2, same and secs < 10, f"100 inputs bitwise equal after wrapping {len(model.wrapped_layers())} layers "
                                  f"and expanding to {model.embed.num_rows} rows: {same}", secs)


def test_criterion_3_gradient_suite(report):
    start = time.perf_counter()
    worst_prim = {}
    for name, (build, make) in PRIMITIVES.items():
        w = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            w = max(w, check_op_gradient(build, make(rng), rng))
        worst_prim[name] = w
    worst_e2e = 0.0
    for seed in range(100):
        m = tiny_model(seed)
        wrap_modulation(m)
        params = m.parameters()
        rng = np.random.default_rng(seed)
        for p in params:  # move adapters off their identity point
            p.requires_grad = True
            p.data += rng.normal(0, 0.05, p.shape)
        x = rng.standard_normal((2, 8, 8, 3))
        t, y = rng.integers(1, 51, 2), rng.integers(0, 3, 2)
        w = rng.standard_normal(x.shape)

        def loss_value():
            with tt.no_grad():
                return float((m(x, t, y).data * w).sum())

        tt.sum_(tt.mul(m(x, t, y), Tensor(w))).backward()
        dirs = [rng.standard_normal(p.shape) for p in params]
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
        worst_e2e = max(worst_e2e, rel_err(analytic, directional_fd(loss_value, [p.data for p in params], dirs)))
    secs = time.perf_counter() - start
    wp = max(worst_prim.values())
    ok = wp < 1e-4 and worst_e2e < 1e-3 and secs < 60
    report(3, ok, f"{len(PRIMITIVES)} primitives x 100 seeds worst rel err {wp:.1e} "
                  f"({max(worst_prim, key=worst_prim.get)}); 1-block model x 100 seeds worst {worst_e2e:.1e}", secs)


def test_criterion_4_rope(report):
    start = time.perf_counter()
    grid = RoPEGrid(8, 8, 32)
    rng = np.random.default_rng(0)
    v = rng.standard_normal((64, 32))
    rv = rope_apply(Tensor(v, dtype=np.float64), grid).data
    norm_err = float(np.max(np.abs(np.linalg.norm(rv, axis=1) - np.linalg.norm(v, axis=1))))
    q, k = rng.standard_normal((64, 32)), rng.standard_normal((64, 32))
    rq = rope_apply(Tensor(q, dtype=np.float64), grid).data
    rk = rope_apply(Tensor(k, dtype=np.float64), grid).data
    logits = rq @ rk.T
    rel = np.empty((64, 64))
    for a in range(64):
        for b in range(64):
            (i, j), (i2, j2) = divmod(a, 8), divmod(b, 8)
            rel[a, b] = q[a] @ grid.position_matrix(i2 - i, j2 - j) @ k[b]
    rel_gap = float(np.max(np.abs(logits - rel)))
    shift_gap = 0.0
    for di, dj in [(1, 0), (0, 5), (-3, 7), (40, -11)]:
        g2 = grid.shifted(di, dj)
        moved = rope_apply(Tensor(q, dtype=np.float64), g2).data @ rope_apply(Tensor(k, dtype=np.float64), g2).data.T
        shift_gap = max(shift_gap, float(np.max(np.abs(moved - logits))))
    secs = time.perf_counter() - start
    ok = norm_err <= 1e-5 and rel_gap <= 1e-5 and shift_gap <= 1e-5 and secs < 5
    report(4, ok, f"norm err {norm_err:.1e} over 64 positions, relative-position gap {rel_gap:.1e}, "
                  f"shift gap {shift_gap:.1e}", secs)


def test_criterion_5_ssei(report, pretrained, data):
    start = time.perf_counter()
    mismatches = scale_breaks = 0
    for i in range(1000):
        rng = np.random.default_rng(i)
        n = int(rng.integers(2, 12))
        src, tgt = rng.standard_normal((n, 39)), rng.standard_normal(39)
        sims = [float(s @ tgt / (np.sqrt(s @ s) * np.sqrt(tgt @ tgt))) for s in src]
        brute = max(range(n), key=lambda j: (sims[j], -j))
        got = nearest_source_class(tgt, src)
        mismatches += got != brute
        c = float(rng.uniform(1e-3, 1e3))
        scale_breaks += nearest_source_class(c * tgt, src) != got
    base, _ = pretrained
    gaps = []
    for seed in range(5):
        first = {}
        for init in ("ssei", "random"):
            m = _clone(base)
            if init == "ssei":
                tr = prepare_finetune(m, "finetune_modulation", data["assign"])
            else:
                init_random_embeddings(m.embed, 5, np.random.default_rng(seed))
                tr = prepare_finetune(m, "finetune_modulation")
            cfg = TrainConfig(mode="finetune_modulation", steps=50, learning_rate=FINETUNE_LR, seed=seed,
                              tau=FINETUNE_STEPS, schedule="scos", osl_lambda=OSL_LAMBDA)
            first[init] = train(m, data["target"], cfg, label_offset=10, trainable=tr).losses.mean()
        gaps.append(first["random"] - first["ssei"])
    secs = time.perf_counter() - start
    mean_gap = float(np.mean(gaps))
    ok = mismatches == 0 and scale_breaks == 0 and mean_gap > 0 and secs < 300
    report(5, ok, f"brute-force mismatches {mismatches}/1000, scale breaks {scale_breaks}; "
                  f"first-50-step loss random minus SSEI = {mean_gap:+.5f} (per seed "
                  f"{', '.join(f'{g:+.4f}' for g in gaps)}); pretraining excluded from timing", secs)


def test_criterion_6_osl(report):
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 32, 32, 3)), rng.standard_normal((4, 32, 32, 3))
    l_simple = float(np.mean((a - b) ** 2))
    ones = osl_loss(a, b, build_mask([], (32, 32), 1.0))
    hand = osl_loss(np.ones((2, 2)), np.zeros((2, 2)), build_mask([(0, 0, 1, 1)], (2, 2), 1.0))
    sched = build_linear()
    samples = gen_target_dataset(10, 5)
    x0 = to_model_space(stack_images(samples).astype(np.float64))
    ore = object_region_error(OracleEps(x0, sched), sched, samples, 200)
    ok = abs(ones - l_simple) <= 1e-15 * max(1.0, l_simple) and hand == 1.75 and ore < 1e-24
    report(6, ok, f"all-ones mask gap {abs(ones - l_simple):.1e}, 2x2 hand case {hand}, "
                  f"oracle object-region error {ore:.1e}")


def test_criterion_7_survival(report):
    start = time.perf_counter()
    rows = survival_report(gen_target_dataset(500, 7), {"linear": build_linear(), "scos2": build_scos(1000, 2)})
    table = {(r["schedule"], r["bucket"]): r["mean_survival"] for r in rows}
    buckets = ["3-4", "5-6", "7-8"]
    lin = [table[("linear", b)] for b in buckets]
    sc = [table[("scos2", b)] for b in buckets]
    numeric = all(isinstance(v, float) for v in lin + sc)
    mono = numeric and all(x <= y for x, y in zip(lin, lin[1:]))
    exceeds = numeric and all(s > l for s, l in zip(sc, lin))
    secs = time.perf_counter() - start
    report(7, mono and exceeds and secs < 120,
           f"linear {', '.join(f'{v:.1f}' for v in lin)}; scos2 {', '.join(f'{v:.1f}' for v in sc)} "
           f"(buckets {', '.join(buckets)})", secs)


def test_criterion_8_end_to_end(report, pipeline):
    wins_ssei = wins_bias = 0
    parts = []
    for seed, r in pipeline["seeds"].items():
        wins_ssei += r["fd_mod"] < r["fd_ssei"]
        wins_bias += r["fd_mod"] < r["fd_bias"]
        parts.append(f"seed {seed}: mod {r['fd_mod']:.4f} ssei-only {r['fd_ssei']:.4f} bias {r['fd_bias']:.4f}")
    frac = max(r["fraction"] for r in pipeline["seeds"].values())
    n = len(SEEDS)
    ok = wins_ssei == n and wins_bias == n and frac < 0.05 and pipeline["seconds"] < 1800
    report(8, ok, f"{'; '.join(parts)}; beats ssei-only {wins_ssei}/{n}, beats bias-only {wins_bias}/{n}, "
                  f"trainable fraction {frac:.4%}", pipeline["seconds"])


def test_criterion_9_determinism(report, pipeline, data, tmp_path):
    start = time.perf_counter()
    base, _ = _pretrain()

    def ckpt_bytes(state, name):
        p = tmp_path / name
        save_checkpoint(p, state, {})
        return p.read_bytes()

    same = [ckpt_bytes(base.state_dict(), "a") == ckpt_bytes(pipeline["pretrained_state"], "b")]
    for seed in SEEDS:
        for mode, key in (("finetune_modulation", "mod"), ("finetune_bias_only", "bias")):
            m, _, _ = _finetune(base, data, mode, seed)
            same.append(ckpt_bytes(m.state_dict(), "a") == ckpt_bytes(pipeline["seeds"][seed]["states"][key], "b"))
    secs = time.perf_counter() - start
    report(9, all(same), f"{sum(same)}/{len(same)} checkpoints bitwise identical on rerun", secs)
