"""Dense tensor helpers, seeded random streams and a reverse-mode tape.

Tensors are plain C-contiguous numpy arrays (row-major). Double precision is
the default; ``float32`` is accepted everywhere as a speed mode.

The :class:`Tape` records every differentiable op of the toy transformer and
replays them in reverse creation order. Backward rules live in
``BACKWARD_RULES`` keyed by op name so each rule can be inspected (or
swapped out in tests) independently.
"""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand extents do not agree."""


class ParameterError(ValueError):
    """A numeric parameter is outside its valid range."""


class UsageError(ValueError):
    """An operation was called on the wrong kind of input."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

RNG_ALGORITHM = "philox4x64-10"


def _key(seed: int, label: str, index: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}:{index}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def rng(seed: int, label: str = "", index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, label, index)``.

    Streams with different labels never share state, so drawing from one
    purpose (say, masking) leaves every other purpose untouched.
    """
    return np.random.Generator(np.random.Philox(key=_key(seed, label, index)))


def derive_seed(seed: int, label: str, *index: int) -> int:
    """A 63-bit child seed, stable across platforms and draw order."""
    text = ":".join([str(seed), label, *map(str, index)])
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def truncated_normal(gen: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0,
                     dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal draws resampled until they fall inside ``±bound·std``."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)


# ---------------------------------------------------------------------------
# Plain array ops
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dim")
    if not np.isfinite(x).all():
        raise NumericError("softmax input has non-finite entries")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "op", "parents", "ctx", "name", "index", "tape")

    def __init__(self, tape: Tape, value: np.ndarray, op: str, parents=(), ctx=None, name=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.ctx = ctx or {}
        self.name = name
        self.index = len(tape.nodes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op!r}, shape={self.shape}, name={self.name!r})"


class MacMeter:
    """Counts multiply-accumulates issued through :meth:`Tape.matmul`."""

    def __init__(self) -> None:
        self.total = 0
        self.calls = 0

    def add(self, m: int, k: int, n: int) -> None:
        self.total += m * k * n
        self.calls += 1


class Tape:
    """Records ops in creation order; ``backward`` walks them in reverse.

    Creation order is a valid topological order (an op can only consume
    values that already exist), so a single reverse sweep visits every node
    after all of its consumers.
    """

    def __init__(self, meter: MacMeter | None = None) -> None:
        self.nodes: list[Var] = []
        self.meter = meter

    def _push(self, value, op, parents=(), ctx=None, name=None) -> Var:
        v = Var(self, value, op, parents, ctx, name)
        self.nodes.append(v)
        return v

    # leaves
    def param(self, value: np.ndarray, name: str) -> Var:
        return self._push(value, "param", name=name)

    def constant(self, value: np.ndarray) -> Var:
        return self._push(value, "const")

    # differentiable ops
    def matmul(self, a: Var, b: Var) -> Var:
        out = matmul(a.value, b.value)
        if self.meter is not None:
            self.meter.add(a.shape[0], a.shape[1], b.shape[1])
        return self._push(out, "matmul", (a, b))

    def add(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ShapeError(f"add: {a.shape} vs {b.shape}")
        return self._push(a.value + b.value, "add", (a, b))

    def sub(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ShapeError(f"sub: {a.shape} vs {b.shape}")
        return self._push(a.value - b.value, "sub", (a, b))

    def mul(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ShapeError(f"mul: {a.shape} vs {b.shape}")
        return self._push(a.value * b.value, "mul", (a, b))

    def bias_add(self, x: Var, b: Var) -> Var:
        if b.value.ndim != 1 or b.shape[0] != x.shape[-1]:
            raise ShapeError(f"bias {b.shape} does not match last dim of {x.shape}")
        return self._push(x.value + b.value, "bias_add", (x, b))

    def scale(self, x: Var, c: float) -> Var:
        return self._push(x.value * c, "scale", (x,), {"c": c})

    def gelu(self, x: Var) -> Var:
        return self._push(gelu(x.value), "gelu", (x,))

    def softmax(self, x: Var) -> Var:
        return self._push(softmax_lastdim(x.value), "softmax", (x,))

    def layernorm(self, x: Var, gain: Var, bias: Var, eps: float = 1e-6) -> Var:
        mu = x.value.mean(axis=-1, keepdims=True)
        xc = x.value - mu
        inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return self._push(xhat * gain.value + bias.value, "layernorm", (x, gain, bias),
                          {"xhat": xhat, "inv": inv})

    def transpose(self, x: Var) -> Var:
        return self._push(np.ascontiguousarray(x.value.T), "transpose", (x,))

    def slice_cols(self, x: Var, start: int, stop: int) -> Var:
        return self._push(np.ascontiguousarray(x.value[:, start:stop]), "slice_cols", (x,),
                          {"start": start, "stop": stop})

    def concat_cols(self, xs: Sequence[Var]) -> Var:
        widths = [x.shape[1] for x in xs]
        return self._push(np.concatenate([x.value for x in xs], axis=1), "concat_cols",
                          tuple(xs), {"widths": widths})

    def gather_rows(self, x: Var, idx: Sequence[int]) -> Var:
        idx = np.asarray(idx, dtype=np.intp)
        return self._push(x.value[idx], "gather_rows", (x,), {"idx": idx})

    def scatter_rows(self, rows: Var, idx: Sequence[int], n: int, fill: Var) -> Var:
        """``n`` rows: ``rows`` placed at ``idx``, every other row equal to ``fill``."""
        idx = np.asarray(idx, dtype=np.intp)
        if fill.value.ndim != 1 or fill.shape[0] != rows.shape[1]:
            raise ShapeError(f"fill {fill.shape} does not match row width {rows.shape[1]}")
        out = np.empty((n, rows.shape[1]), dtype=rows.value.dtype)
        out[:] = fill.value
        out[idx] = rows.value
        others = np.setdiff1d(np.arange(n), idx)
        return self._push(out, "scatter_rows", (rows, fill), {"idx": idx, "others": others})

    def sum(self, x: Var) -> Var:
        return self._push(np.asarray(x.value.sum()), "sum", (x,))

    def mean(self, x: Var) -> Var:
        return self._push(np.asarray(x.value.mean()), "mean", (x,))

    def dot(self, a: Var, b: Var) -> Var:
        """Scalar inner product of two equal-shape values."""
        if a.shape != b.shape:
            raise ShapeError(f"dot: {a.shape} vs {b.shape}")
        return self._push(np.asarray((a.value * b.value).sum()), "dot", (a, b))

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` for every named parameter on the tape."""
        if loss.tape is not self:
            raise UsageError("loss was recorded on a different tape")
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.parents:
                if g is not None:
                    grads[node.index] = g
                continue
            for parent, pg in zip(node.parents, BACKWARD_RULES[node.op](node, g)):
                if pg is None or parent.op == "const":
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.op == "param":
                g = grads.get(node.index)
                out[node.name] = np.zeros_like(node.value) if g is None else g
        return out


# ---------------------------------------------------------------------------
# Backward rules: (node, upstream grad) -> one grad per parent (or None)
# ---------------------------------------------------------------------------


def _bw_matmul(node, g):
    a, b = node.parents
    return g @ b.value.T, a.value.T @ g


def _bw_add(node, g):
    return g, g


def _bw_sub(node, g):
    return g, -g


def _bw_mul(node, g):
    a, b = node.parents
    return g * b.value, g * a.value


def _bw_bias_add(node, g):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def _bw_scale(node, g):
    return (g * node.ctx["c"],)


def _bw_gelu(node, g):
    return (g * _gelu_grad(node.parents[0].value),)


def _bw_softmax(node, g):
    y = node.value
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _bw_layernorm(node, g):
    _, gain, _ = node.parents
    xhat, inv = node.ctx["xhat"], node.ctx["inv"]
    dxhat = g * gain.value
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    flat = g.reshape(-1, g.shape[-1])
    return dx, (flat * xhat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)


def _bw_transpose(node, g):
    return (np.ascontiguousarray(g.T),)


def _bw_slice_cols(node, g):
    x = node.parents[0]
    out = np.zeros_like(x.value)
    out[:, node.ctx["start"]:node.ctx["stop"]] = g
    return (out,)


def _bw_concat_cols(node, g):
    bounds = np.cumsum([0, *node.ctx["widths"]])
    return tuple(np.ascontiguousarray(g[:, lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:]))


def _bw_gather_rows(node, g):
    x = node.parents[0]
    out = np.zeros_like(x.value)
    np.add.at(out, node.ctx["idx"], g)
    return (out,)


def _bw_scatter_rows(node, g):
    return g[node.ctx["idx"]], g[node.ctx["others"]].sum(axis=0)


def _bw_sum(node, g):
    x = node.parents[0]
    return (np.full_like(x.value, g),)


def _bw_mean(node, g):
    x = node.parents[0]
    return (np.full_like(x.value, g / x.value.size),)


def _bw_dot(node, g):
    a, b = node.parents
    return g * b.value, g * a.value


BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "bias_add": _bw_bias_add,
    "scale": _bw_scale,
    "gelu": _bw_gelu,
    "softmax": _bw_softmax,
    "layernorm": _bw_layernorm,
    "transpose": _bw_transpose,
    "slice_cols": _bw_slice_cols,
    "concat_cols": _bw_concat_cols,
    "gather_rows": _bw_gather_rows,
    "scatter_rows": _bw_scatter_rows,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "dot": _bw_dot,
}


# ---------------------------------------------------------------------------
# OMNT binary tensor files
# ---------------------------------------------------------------------------

OMNT_MAGIC = b"OMNT"
OMNT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_FOR = {v: k for k, v in _DTYPE_CODES.items()}


def encode_omnt(arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.itemsize > 1 else np.dtype(arr.dtype)
    code = _CODE_FOR.get(dt)
    if code is None:
        raise UsageError(f"OMNT cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ShapeError("OMNT supports at most 255 dims")
    head = OMNT_MAGIC + bytes([OMNT_VERSION, code, arr.ndim])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_omnt(buf: bytes) -> np.ndarray:
    if buf[:4] != OMNT_MAGIC:
        raise UsageError("not an OMNT file (bad magic)")
    version, code, ndim = buf[4], buf[5], buf[6]
    if version != OMNT_VERSION:
        raise UsageError(f"unsupported OMNT version {version}")
    if code not in _DTYPE_CODES:
        raise UsageError(f"unknown OMNT dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    dt = _DTYPE_CODES[code]
    offset = 7 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != count * dt.itemsize:
        raise ShapeError(f"OMNT payload holds {len(buf) - offset} bytes, expected {count * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save_omnt(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_omnt(arr))


def load_omnt(path: str | Path) -> np.ndarray:
    return decode_omnt(Path(path).read_bytes())
