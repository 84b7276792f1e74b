"""Toy pixel-space diffusion transformer with modulated low-rank adapters.

Layout: images are NHWC arrays. ``patchify`` turns them into a
(H/p * W/p) x (p*p*C) token matrix in row-major grid order, so token ``l``
sits at grid row ``l // (W/p)`` and column ``l % (W/p)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass
class DiTConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 128
    depth: int = 4
    heads: int = 4
    num_embeddings: int = 10
    T: int = 1000
    mlp_ratio: int = 4
    rank: int = 4

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if self.dim % (4 * self.heads):
            raise ValueError("dim must be divisible by 4*heads for the 2D RoPE split")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        kw = {f.name: int(d[f.name]) for f in fields(cls) if f.name in d}
        return cls(**kw)


# -- patch rearrangement ------------------------------------------------------

def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, C) or (H, W, C) -> (B, L, p*p*C) / (L, p*p*C)."""
    single = x.ndim == 3
    if single:
        x = x[None]
    B, H, W, C = x.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch {p}")
    t = x.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5)
    t = t.reshape(B, (H // p) * (W // p), p * p * C)
    return t[0] if single else t


def unpatchify(tokens: np.ndarray, p: int, H: int, W: int, C: int) -> np.ndarray:
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    B = tokens.shape[0]
    x = tokens.reshape(B, H // p, W // p, p, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)
    return x[0] if single else x


def _unpatchify_t(tokens: Tensor, p: int, H: int, W: int, C: int) -> Tensor:
    B = tokens.shape[0]
    x = tokens.reshape(B, H // p, W // p, p, p, C)
    x = tt.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(B, H, W, C)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding: first half sines, second half cosines."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# -- 2D rotary embeddings -----------------------------------------------------

class RoPEGrid:
    """Per-token rotations for a (rows x cols) grid.

    The first half of each head's channels rotates by the row index, the
    second half by the column index; within each half, channel ``k`` pairs
    with channel ``k + quarter``.
    """

    def __init__(self, rows: int, cols: int, head_dim: int, base: float = 10000.0,
                 row_idx=None, col_idx=None):
        if head_dim % 4:
            raise ValueError("head_dim must be divisible by 4")
        self.rows, self.cols, self.head_dim, self.base = rows, cols, head_dim, base
        if row_idx is None:
            row_idx = np.repeat(np.arange(rows), cols)
            col_idx = np.tile(np.arange(cols), rows)
        self.row_idx = np.asarray(row_idx, dtype=np.float64)
        self.col_idx = np.asarray(col_idx, dtype=np.float64)
        half = head_dim // 2
        q = half // 2
        self.freqs = base ** (-np.arange(q) / q)
        ang_r = self.row_idx[:, None] * self.freqs[None]
        ang_c = self.col_idx[:, None] * self.freqs[None]
        # per channel angle: [row pairs (x2), col pairs (x2)]
        ang = np.concatenate([ang_r, ang_r, ang_c, ang_c], axis=-1)
        self.cos = np.cos(ang)
        self.sin = np.sin(ang)

    @property
    def num_tokens(self) -> int:
        return self.row_idx.shape[0]

    def shifted(self, di: float, dj: float) -> "RoPEGrid":
        return RoPEGrid(self.rows, self.cols, self.head_dim, self.base,
                        self.row_idx + di, self.col_idx + dj)

    def permuted(self, order) -> "RoPEGrid":
        order = np.asarray(order)
        return RoPEGrid(self.rows, self.cols, self.head_dim, self.base,
                        self.row_idx[order], self.col_idx[order])

    def axis_matrix(self, offset: float) -> np.ndarray:
        """RoPE(offset) as a dense (head_dim/2)^2 rotation matrix."""
        half = self.head_dim // 2
        q = half // 2
        m = np.zeros((half, half))
        for k, f in enumerate(self.freqs):
            c, s = math.cos(offset * f), math.sin(offset * f)
            m[k, k], m[k, k + q] = c, -s
            m[k + q, k], m[k + q, k + q] = s, c
        return m

    def position_matrix(self, i: float, j: float) -> np.ndarray:
        """Block-diagonal diag(RoPE(i), RoPE(j))."""
        half = self.head_dim // 2
        P = np.zeros((self.head_dim, self.head_dim))
        P[:half, :half] = self.axis_matrix(i)
        P[half:, half:] = self.axis_matrix(j)
        return P


def rope_apply(x: Tensor, grid: RoPEGrid) -> Tensor:
    """Rotate (..., L, head_dim) vectors by their token's grid position."""
    if x.shape[-1] != grid.head_dim or x.shape[-2] != grid.num_tokens:
        raise tt.DimensionError(
            f"rope expects (..., {grid.num_tokens}, {grid.head_dim}), got {x.shape}")
    dt = x.dtype
    L, hd = grid.num_tokens, grid.head_dim
    q = hd // 4
    C = grid.cos.astype(dt)
    # sign pattern of the rotate-half partner: -sin on the first of each pair
    S = (grid.sin * np.tile(np.repeat([-1.0, 1.0], q), 2)).astype(dt)
    shape = x.shape

    def rotate(v: np.ndarray, sin: np.ndarray) -> np.ndarray:
        out = v * C
        sw = np.empty_like(v)
        vv = v.reshape(-1, 2, 2, q)
        ss = sw.reshape(-1, 2, 2, q)
        ss[:, :, 0] = vv[:, :, 1]
        ss[:, :, 1] = vv[:, :, 0]
        sw *= sin
        out += sw
        return out

    out = rotate(np.ascontiguousarray(x.data), S)
    neg_s = -S

    def backward(g):
        return (rotate(np.ascontiguousarray(g), neg_s),)

    return tt.custom_op(out, (x,), backward, "rope")


# -- layers ---------------------------------------------------------------------

class Module:
    """Parameter container; parameters are Tensor attributes, children are Modules."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.modules(f"{prefix}{key}.")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.modules(f"{prefix}{key}.{i}.")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None, dtype=np.float32,
                 zero: bool = False):
        self.d_in, self.d_out = d_in, d_out
        if zero or rng is None:
            w = np.zeros((d_out, d_in))
        else:
            lim = math.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-lim, lim, size=(d_out, d_in))
        self.weight = Tensor(w.astype(dtype))
        self.bias = Tensor(np.zeros(d_out, dtype=dtype))

    def effective_weight(self) -> Tensor:
        return self.weight

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.d_in) if x.ndim != 2 else x
        y = tt.linear(x2, self.effective_weight(), self.bias)
        return y.reshape(*lead, self.d_out) if x.ndim != 2 else y


class ModulatedLinear(Linear):
    """Frozen base weight W modulated as W * (Gout @ Gin) + (Bout @ Bin)."""

    def __init__(self, base: Linear, rank: int, rng: np.random.Generator):
        if rank > min(base.d_out, base.d_in):
            raise ValueError(f"rank {rank} exceeds min(d_out, d_in)={min(base.d_out, base.d_in)}")
        self.d_in, self.d_out, self.rank = base.d_in, base.d_out, rank
        self.weight = base.weight
        self.bias = base.bias
        dt = base.weight.dtype
        self.gamma_out = Tensor(np.zeros((self.d_out, rank), dtype=dt))
        self.gamma_in = Tensor(np.zeros((rank, self.d_in), dtype=dt))
        self.b_out = Tensor(np.zeros((self.d_out, rank), dtype=dt))
        self.b_in = Tensor(np.zeros((rank, self.d_in), dtype=dt))
        init_modulation_identity(self, rng)

    def adapter_parameters(self) -> dict[str, Tensor]:
        return {"gamma_out": self.gamma_out, "gamma_in": self.gamma_in,
                "b_out": self.b_out, "b_in": self.b_in}

    def effective_weight(self) -> Tensor:
        gamma = tt.matmul(self.gamma_out, self.gamma_in)
        b = tt.matmul(self.b_out, self.b_in)
        return self.weight * gamma + b

    def effective_weight_numpy(self) -> np.ndarray:
        return (self.weight.data * (self.gamma_out.data @ self.gamma_in.data)
                + self.b_out.data @ self.b_in.data)


def init_modulation_identity(layer: ModulatedLinear, rng: np.random.Generator | None = None,
                             init_scale: float = 0.01) -> None:
    """Reset adapters so the effective weight equals W exactly.

    Gamma_out column 0 and Gamma_in row 0 are ones, so Gamma is all-ones; the
    remaining Gamma_out columns and B_out are zero. Gamma_in rows 1.. and B_in
    are small random values so every factor receives gradient.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dt = layer.weight.dtype
    r = layer.rank
    go = np.zeros((layer.d_out, r), dtype=dt)
    go[:, 0] = 1
    gi = np.zeros((r, layer.d_in), dtype=dt)
    gi[0] = 1
    gi[1:] = rng.normal(0.0, init_scale, size=(r - 1, layer.d_in))
    layer.gamma_out.data = go
    layer.gamma_in.data = gi
    layer.b_out.data = np.zeros((layer.d_out, r), dtype=dt)
    layer.b_in.data = rng.normal(0.0, init_scale, size=(r, layer.d_in)).astype(dt)


def modulated_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class ConditionEmbeddingTable(Module):
    """Rows grouped in blocks; expansion appends a new block, never touching old rows."""

    def __init__(self, num: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.dim = dim
        self.base = Tensor(rng.normal(0.0, 0.02, size=(num, dim)).astype(dtype))
        self.extra: list[Tensor] = []

    def named_parameters(self, prefix: str = ""):
        yield prefix + "base", self.base
        for i, blk in enumerate(self.extra):
            yield f"{prefix}extra{i}", blk

    @property
    def num_rows(self) -> int:
        return self.base.shape[0] + sum(b.shape[0] for b in self.extra)

    @property
    def num_base(self) -> int:
        return self.base.shape[0]

    def rows(self) -> np.ndarray:
        return np.concatenate([self.base.data] + [b.data for b in self.extra], axis=0)

    def expand(self, rows: np.ndarray) -> int:
        """Append rows; returns the index of the first new row."""
        first = self.num_rows
        rows = np.asarray(rows, dtype=self.base.dtype).reshape(-1, self.dim)
        self.extra.append(Tensor(rows.copy()))
        return first

    def lookup(self, idx) -> Tensor:
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_rows):
            raise IndexError(f"condition id out of range [0, {self.num_rows})")
        table = self.base if not self.extra else tt.concat([self.base] + self.extra, axis=0)
        return tt.take_rows(table, idx)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, grid: RoPEGrid) -> Tensor:
        return mhsa_forward(self, x, grid)


def mhsa_forward(attn: Attention, x: Tensor, grid: RoPEGrid) -> Tensor:
    """Scaled dot-product self-attention; RoPE on queries and keys only."""
    B, L, D = x.shape
    H = attn.heads
    hd = D // H
    qkv = attn.qkv(x).reshape(B, L, 3, H, hd)
    qkv = tt.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, L, hd)
    q = tt.scale(rope_apply(qkv[0], grid), 1.0 / math.sqrt(hd))
    k = rope_apply(qkv[1], grid)
    v = qkv[2]
    logits = tt.matmul(q, tt.transpose(k))
    w = tt.softmax(logits, axis=-1)
    o = tt.matmul(w, v)  # (B, H, L, hd)
    o = tt.transpose(o, (0, 2, 1, 3)).reshape(B, L, D)
    return attn.proj(o)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tt.gelu(self.fc1(x)))


def _modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    """x * (1 + scale) + shift with per-sample (B, D) signals broadcast over tokens."""
    xd = x.data
    sc = scale_.data[:, None, :]
    out = xd * (sc + 1.0)
    out += shift.data[:, None, :]

    def backward(g):
        gx = g * (sc + 1.0) if x.requires_grad else None
        gsc = (g * xd).sum(axis=1) if scale_.requires_grad else None
        gsh = g.sum(axis=1) if shift.requires_grad else None
        return gx, gsh, gsc

    return tt.custom_op(out, (x, shift, scale_), backward, "modulate")


def _gated_residual(x: Tensor, f: Tensor, gate: Tensor) -> Tensor:
    """x + gate * f with a per-sample (B, D) gate."""
    fd = f.data
    gt = gate.data[:, None, :]
    out = fd * gt
    out += x.data

    def backward(g):
        gf = g * gt if f.requires_grad else None
        gg = (g * fd).sum(axis=1) if gate.requires_grad else None
        return g, gf, gg

    return tt.custom_op(out, (x, f, gate), backward, "gated_residual")


class DiTBlock(Module):
    def __init__(self, cfg: DiTConfig, rng, dtype):
        d = cfg.dim
        self.attn = Attention(d, cfg.heads, rng, dtype)
        self.mlp = MLP(d, cfg.mlp_ratio * d, rng, dtype)
        self.ada = Linear(d, 6 * d, rng, dtype, zero=True)

    def __call__(self, x: Tensor, signals: list[Tensor], grid: RoPEGrid) -> Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = signals
        x = _gated_residual(x, self.attn(_modulate(tt.layernorm(x), sh1, sc1), grid), g1)
        x = _gated_residual(x, self.mlp(_modulate(tt.layernorm(x), sh2, sc2)), g2)
        return x


class ConditionMLP(Module):
    """c = fc2(gelu(fc1(t_embed + y_embed)))."""

    def __init__(self, dim: int, rng, dtype):
        self.fc1 = Linear(dim, dim, rng, dtype)
        self.fc2 = Linear(dim, dim, rng, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc2(tt.gelu(self.fc1(h)))


class DiT(Module):
    def __init__(self, cfg: DiTConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg or DiTConfig()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d = cfg.dim
        pdim = cfg.patch * cfg.patch * cfg.channels
        self.patch_embed = Linear(pdim, d, rng, dtype)
        self.embed = ConditionEmbeddingTable(cfg.num_embeddings, d, rng, dtype)
        self.cond_mlp = ConditionMLP(d, rng, dtype)
        self.blocks = [DiTBlock(cfg, rng, dtype) for _ in range(cfg.depth)]
        self.final_ada = Linear(d, 2 * d, rng, dtype, zero=True)
        self.final = Linear(d, pdim, rng, dtype, zero=True)
        self.grid = RoPEGrid(cfg.grid, cfg.grid, cfg.head_dim)
        self._adapter_rng = np.random.default_rng(seed + 7919)

    # -- structure ---------------------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key in ("cfg", "grid", "dtype", "_adapter_rng"):
                continue
            if isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{prefix}{key}.{i}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        # create extra embedding blocks and adapters implied by the state
        n_extra = len([k for k in state if k.startswith("embed.extra")])
        while len(self.embed.extra) < n_extra:
            i = len(self.embed.extra)
            self.embed.extra.append(Tensor(np.zeros_like(state[f"embed.extra{i}"], dtype=self.dtype)))
        if any(k.endswith(".gamma_out") for k in state):
            rank = next(v.shape[1] for k, v in state.items() if k.endswith(".gamma_out"))
            wrap_modulation(self, rank)
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unknown = set(state) - set(own)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for k, t in own.items():
            if t.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=self.dtype)

    def wrapped_layers(self) -> dict[str, ModulatedLinear]:
        return {n: m for n, m in self.modules() if isinstance(m, ModulatedLinear)}

    def target_layer_names(self) -> list[str]:
        names = ["cond_mlp.fc1", "cond_mlp.fc2"]
        for i in range(len(self.blocks)):
            names += [f"blocks.{i}.attn.qkv", f"blocks.{i}.attn.proj"]
        return names

    # -- forward -----------------------------------------------------------
    def condition_signals(self, t, y) -> tuple[Tensor, list[list[Tensor]], list[Tensor]]:
        return condition_mlp(self, t, y)

    def __call__(self, x_t, t, y) -> Tensor:
        return model_forward(self, x_t, t, y)

    def predict_eps(self, x_t: np.ndarray, t, y) -> np.ndarray:
        with tt.no_grad():
            return model_forward(self, x_t, t, y).data


def condition_mlp(model: DiT, t, y):
    """Return (c, per-block [shift1, scale1, gate1, shift2, scale2, gate2], final [shift, scale])."""
    d = model.cfg.dim
    t = np.atleast_1d(np.asarray(t))
    y = np.atleast_1d(np.asarray(y))
    temb = Tensor(timestep_embedding(t, d).astype(model.dtype))
    yemb = model.embed.lookup(y)
    c = model.cond_mlp(temb + yemb)
    act = tt.gelu(c)
    per_block = []
    for blk in model.blocks:
        s = blk.ada(act)
        per_block.append([s[:, i * d:(i + 1) * d] for i in range(6)])
    f = model.final_ada(act)
    return c, per_block, [f[:, :d], f[:, d:]]


def model_forward(model: DiT, x_t, t, y) -> Tensor:
    """Predict the noise for a batch of noisy images (B, H, W, C)."""
    cfg = model.cfg
    x = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise tt.DimensionError(f"expected (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    y = np.broadcast_to(np.asarray(y), (B,))
    if np.any(t < 0) or np.any(t > cfg.T):
        raise ValueError(f"timestep outside [0, {cfg.T}]")
    tokens = Tensor(patchify(x.astype(model.dtype, copy=False), cfg.patch))
    h = model.patch_embed(tokens)
    _, per_block, (fsh, fsc) = condition_mlp(model, t, y)
    for blk, sig in zip(model.blocks, per_block):
        h = blk(h, sig, model.grid)
    h = _modulate(tt.layernorm(h), fsh, fsc)
    out = model.final(h)
    eps = _unpatchify_t(out, cfg.patch, cfg.image_size, cfg.image_size, cfg.channels)
    return tt.check_finite(eps, "model output")


# -- adapters ---------------------------------------------------------------

def _resolve(model: Module, dotted: str):
    parts = dotted.split(".")
    obj = model
    for p in parts[:-1]:
        obj = obj[int(p)] if isinstance(obj, list) else getattr(obj, p)
    return obj, parts[-1]


def wrap_modulation(model: DiT, rank: int | None = None, names: list[str] | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, ModulatedLinear]:
    """Replace target linears with identity-initialised ModulatedLinear layers."""
    rank = rank or model.cfg.rank
    rng = rng or model._adapter_rng
    out = {}
    for name in names or model.target_layer_names():
        parent, attr = _resolve(model, name)
        layer = getattr(parent, attr)
        if not isinstance(layer, ModulatedLinear):
            layer = ModulatedLinear(layer, rank, rng)
            setattr(parent, attr, layer)
        out[name] = layer
    return out


def adapter_parameter_count(model: DiT) -> int:
    return sum(2 * m.rank * (m.d_out + m.d_in) for m in model.wrapped_layers().values())


def total_parameter_count(model: DiT) -> int:
    return sum(p.size for p in model.parameters())
