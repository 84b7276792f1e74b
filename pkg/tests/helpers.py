"""Shared test utilities: central finite differences and tiny models."""

from __future__ import annotations

import numpy as np

from dftbench.model import DiT, DiTConfig

FD_H = 1e-6


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def numeric_grad(f, x: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def directional_fd(f, arrays: list[np.ndarray], directions: list[np.ndarray], h: float = 1e-5) -> float:
    """(f(x + h v) - f(x - h v)) / 2h, perturbing every array along its direction."""
    for a, v in zip(arrays, directions):
        a += h * v
    fp = f()
    for a, v in zip(arrays, directions):
        a -= 2 * h * v
    fm = f()
    for a, v in zip(arrays, directions):
        a += h * v
    return (fp - fm) / (2 * h)


TINY = dict(image_size=8, channels=3, patch=4, dim=16, depth=1, heads=2, num_embeddings=3, T=50, rank=2)


def tiny_model(seed: int = 0, dtype=np.float64, randomize: bool = True, **over) -> DiT:
    """One-block model; ``randomize`` replaces the zero-initialized layers so every path carries gradient."""
    cfg = DiTConfig(**{**TINY, **over})
    m = DiT(cfg, seed=seed, dtype=dtype)
    if randomize:
        rng = np.random.default_rng(seed + 1000)
        for _, p in m.named_parameters():
            p.data[...] = rng.normal(0, 0.3, p.shape)
    return m


# -- primitive gradient registry ----------------------------------------------------

from dftbench import tensor as tt  # noqa: E402
from dftbench.model import RoPEGrid, _gated_residual, _modulate, rope_apply  # noqa: E402
from dftbench.tensor import Tensor  # noqa: E402


def check_op_gradient(build, arrays: list[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative error between backward() and central differences for ``build``."""
    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*ts)
    w = rng.standard_normal(out.shape)

    def loss_value():
        return float((build(*[Tensor(t.data) for t in ts]).data * w).sum())

    loss = tt.sum_(tt.mul(out, Tensor(w)))
    loss.backward()
    worst = 0.0
    for t in ts:
        num = numeric_grad(loss_value, t.data)
        worst = max(worst, rel_err(t.grad, num))
    return worst


_GRID = RoPEGrid(2, 3, 8)


def _pos(shape):
    return lambda rng: [rng.uniform(0.5, 2.0, shape)]


PRIMITIVES = {
    "add": (tt.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "add_rowbias": (tt.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "sub": (tt.sub, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "mul": (tt.mul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))]),
    "mul_scalar_tensor": (tt.mul, lambda r: [r.standard_normal((3, 4)), r.standard_normal(())]),
    "scale": (lambda x: tt.scale(x, -1.7), lambda r: [r.standard_normal((3, 4))]),
    "gelu": (tt.gelu, lambda r: [r.standard_normal((3, 5)) * 2]),
    "exp": (tt.exp, lambda r: [r.standard_normal((3, 4))]),
    "log": (tt.log, _pos((3, 4))),
    "sqrt": (tt.sqrt, _pos((3, 4))),
    "matmul": (tt.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "matmul_batched": (tt.matmul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5))]),
    "linear": (tt.linear, lambda r: [r.standard_normal((5, 4)), r.standard_normal((3, 4)), r.standard_normal(3)]),
    "transpose": (lambda x: tt.transpose(x, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 4))]),
    "reshape": (lambda x: tt.reshape(x, (4, 6)), lambda r: [r.standard_normal((2, 3, 4))]),
    "broadcast_to": (lambda x: tt.broadcast_to(x, (2, 3, 4)), lambda r: [r.standard_normal((3, 1))]),
    "getitem": (lambda x: tt.getitem(x, (slice(None), slice(1, 3))), lambda r: [r.standard_normal((3, 4))]),
    "take_rows": (lambda x: tt.take_rows(x, [2, 0, 2, 1]), lambda r: [r.standard_normal((3, 4))]),
    "concat": (lambda a, b: tt.concat([a, b], axis=1), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "permute_last": (lambda x: tt.permute_last(x, np.array([2, 0, 3, 1]), np.array([1, -1, 1, -1])),
                     lambda r: [r.standard_normal((3, 4))]),
    "sum_axis": (lambda x: tt.sum_(x, 1), lambda r: [r.standard_normal((2, 3, 4))]),
    "sum_all": (tt.sum_, lambda r: [r.standard_normal((2, 3))]),
    "mean": (lambda x: tt.mean(x, -1), lambda r: [r.standard_normal((2, 3, 4))]),
    "softmax": (tt.softmax, lambda r: [r.standard_normal((3, 5)) * 2]),
    "layernorm": (tt.layernorm, lambda r: [r.standard_normal((3, 6)), r.standard_normal(6), r.standard_normal(6)]),
    "rope": (lambda x: rope_apply(x, _GRID), lambda r: [r.standard_normal((2, 2, 6, 8))]),
    "modulate": (_modulate, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4)), r.standard_normal((2, 4))]),
    "gated_residual": (_gated_residual, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4)),
                                                   r.standard_normal((2, 4))]),
}
