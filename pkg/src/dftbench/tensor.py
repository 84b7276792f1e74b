"""Dense tensors with tape-free reverse-mode autodiff on top of numpy.

Each op builds an output ``Tensor`` holding its parents and a closure that maps
the output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order. Broadcasting is deliberately narrow: equal shapes,
scalar operands, trailing row-vector bias, and the explicit ``broadcast_to``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Input outside the domain of an elementwise function."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    # -- backward ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        Repeated calls without ``zero_grad`` accumulate.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        _check_finite(self.data, "loss")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                _check_finite(g, f"gradient of {node.name or 'leaf'}")
                if node.grad is None:
                    node.grad = np.array(g, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    _check_finite(t.data, what)
    return t


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register a primitive defined outside this module.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    return _make(data, parents, backward, op)


# -- broadcasting helpers ---------------------------------------------------

def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _lift(a, b.dtype if isinstance(b, Tensor) else DEFAULT_DTYPE)
    if not isinstance(b, Tensor):
        b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return a, b
    # row-vector bias on the trailing axis
    if b.ndim == 1 and a.ndim >= 1 and sa[-1] == sb[0]:
        return a, b
    if a.ndim == 1 and b.ndim >= 1 and sb[-1] == sa[0]:
        return a, b
    raise DimensionError(f"incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.shape != shape):
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    return g.sum(axis=axes, keepdims=False).reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, sa) if a.requires_grad else None
        gb = _reduce_to(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * x.data.dtype.type(c),)

    return _make(x.data * x.data.dtype.type(c), (x,), backward, "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    dt = xd.dtype.type
    th = xd * xd
    th *= dt(_GELU_C * 0.044715)
    th += dt(_GELU_C)
    th *= xd
    np.tanh(th, out=th)
    out = th + dt(1.0)
    out *= xd
    out *= dt(0.5)

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 * 0.044715 x^2)
        d = xd * xd
        d *= dt(_GELU_C * 3 * 0.044715)
        d += dt(_GELU_C)
        d *= xd
        sech2 = th * th
        np.subtract(dt(1.0), sech2, out=sech2)
        d *= sech2
        d += th
        d += dt(1.0)
        d *= dt(0.5)
        d *= g
        return (d,)

    return _make(out, (x,), backward, "gelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")

    def backward(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _make(out, (x,), backward, "sqrt")


_UNARY = {"gelu": gelu, "exp": exp, "log": log, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, mul, sub, scale, gelu, exp, log, sqrt."""
    if op in _BINARY:
        return _BINARY[op](*args)
    if op in _UNARY:
        return _UNARY[op](*args)
    if op == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch extents, if any, must be identical."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b for x (N, d_in), w (d_out, d_in), row bias b (d_out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: {x.shape} x {w.shape}^T")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear bias {b.shape} != ({w.shape[0]},)")
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return _make(out, parents, backward, "linear")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    out = np.transpose(x.data, axes)
    if out.ndim > 2:
        # batched consumers (attention, rope) are much faster on packed data
        out = np.ascontiguousarray(out)
    return _make(out, (x,), backward, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(tuple(shape)), (x,), backward, "reshape")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules); backward sums over expanded axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None

    def backward(g):
        lead = len(shape) - len(src)
        axes = tuple(range(lead)) + tuple(
            i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1
        )
        return (g.sum(axis=axes, keepdims=True).reshape(src) if axes else g,)

    return _make(out, (x,), backward, "broadcast_to")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    src_shape, dt = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), backward, "getitem")


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows ``table[idx]``; backward scatters into the used rows only."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")

    def backward(g):
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), backward, "take_rows")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def permute_last(x: Tensor, perm: np.ndarray, sign: np.ndarray | None = None) -> Tensor:
    """out[..., i] = sign[i] * x[..., perm[i]] for a permutation ``perm``."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    sign = None if sign is None else np.asarray(sign, dtype=x.dtype)
    out = x.data[..., perm]
    if sign is not None:
        out = out * sign

    def backward(g):
        gs = g * sign if sign is not None else g
        return (gs[..., inv],)

    return _make(out, (x,), backward, "permute_last")


# -- reductions ---------------------------------------------------------------

def sum_(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis), 1.0 / n)


# -- normalizations -----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"axis {axis} invalid for rank {x.ndim}")
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        d = g * out
        d -= out * d.sum(axis=axis, keepdims=True)
        return (d,)

    return _make(out, (x,), backward, "softmax")


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
              eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then optional affine ``gain * xhat + bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    dt = xd.dtype.type
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = dt(1.0) / np.sqrt(var + dt(eps))
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward(g):
        gx = g * gain.data if gain is not None else g
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / dt(n))
        res = [dx]
        if gain is not None:
            res.append((g * xhat).sum(axis=lead) if gain.requires_grad else None)
        if bias is not None:
            res.append(g.sum(axis=lead) if bias.requires_grad else None)
        return tuple(res)

    return _make(out, parents, backward, "layernorm")


# -- parameter checkpoints ----------------------------------------------------

CKPT_MAGIC = b"DFT1"
CONFIG_KEY = "__config__"


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict | None = None) -> None:
    """Write named arrays as little-endian float32 records after the magic."""
    import struct

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        entries: list[tuple[str, np.ndarray]] = []
        if config is not None:
            text = "\n".join(f"{k}={v}" for k, v in config.items()).encode()
            entries.append((CONFIG_KEY, np.frombuffer(text, dtype=np.uint8)))
        entries.extend(params.items())
        for name, arr in entries:
            nb = name.encode()
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for n in arr.shape:
                fh.write(struct.pack("<I", n))
            if name == CONFIG_KEY:
                fh.write(arr.tobytes())
            else:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Inverse of ``save_checkpoint``; returns (params, config)."""
    import struct

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    pos = 4
    params: dict[str, np.ndarray] = {}
    config: dict[str, str] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        if name == CONFIG_KEY:
            text = take(count).decode()
            for line in text.splitlines():
                if line:
                    k, _, v = line.partition("=")
                    config[k] = v
        else:
            params[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return params, config


def parameters_of(tensors: Iterable[Tensor]) -> int:
    return sum(t.size for t in tensors)
