"""Dense float64 matrix ops with a small reverse-mode tape.

Values are plain ``numpy`` arrays. An op called with at least one taped
:class:`Var` operand records itself on that operand's :class:`Tape` and
returns a new ``Var``; called with plain arrays it just computes the value.
This lets the same loss code serve training (taped) and evaluation.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, StateError

NORM_EPS = 1e-12
POOL_EPS = 1e-8
BCE_CLAMP = 1e-7

_MAGIC = b"GGPK"
_VERSION = 1


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "parents", "backward_fn", "name")

    def __init__(self, value, tape, parents=(), backward_fn=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of taped ops for one loss evaluation."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: OrderedDict[str, Var] = OrderedDict()

    def leaf(self, name: str, value) -> Var:
        var = Var(np.asarray(value, dtype=np.float64), self, name=name)
        self.leaves[name] = var
        return var

    def watch(self, params: "ParamStore") -> dict:
        """Create one leaf per parameter tensor and return them by name."""
        return {name: self.leaf(name, value) for name, value in params.items()}

    def record(self, value, parents, backward_fn: Callable) -> Var:
        var = Var(value, self, tuple(parents), backward_fn)
        self.nodes.append(var)
        return var

    def backward(self, loss: Var) -> dict:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise StateError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if not isinstance(parent, Var) or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = OrderedDict()
        for name, leaf in self.leaves.items():
            g = grads.get(id(leaf))
            out[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.value.shape)
        return out


def backward(loss) -> dict:
    """Gradients of a taped scalar w.r.t. every watched leaf (zeros if untouched)."""
    if not isinstance(loss, Var) or loss.tape is None:
        raise StateError("backward() called on a value that has no tape")
    return loss.tape.backward(loss)


# --------------------------------------------------------------------------
# op plumbing

def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise StateError("operands live on different tapes")
    return tape


def _op(out, parents, backward_fn):
    tape = _tape_of(*parents)
    if tape is None:
        return out
    return tape.record(out, parents, backward_fn)


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# --------------------------------------------------------------------------
# elementwise / linear ops

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)
    return _op(out, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    return _op(out, (a, b), lambda g: (_sum_to(g, sa), -_sum_to(g, sb)))


def scale(x, c: float):
    return _op(value(x) * c, (x,), lambda g: (g * c,))


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_bias(x, b):
    xv, bv = value(x), value(b)
    if bv.size != xv.shape[-1]:
        raise DimensionError(f"bias of shape {bv.shape} does not fit input {xv.shape}")
    bshape = bv.shape
    out = xv + bv.reshape(1, -1)
    return _op(out, (x, b), lambda g: (g, g.sum(axis=0).reshape(bshape)))


def relu(x):
    xv = value(x)
    on = xv > 0
    return _op(np.where(on, xv, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x):
    xv = value(x)
    out = np.empty_like(xv, dtype=np.float64)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _op(out, (x,), lambda g: (g * out * (1.0 - out),))


def concat_cols(a, b):
    av, bv = value(a), value(b)
    if av.shape[0] != bv.shape[0]:
        raise DimensionError(f"concat row mismatch: {av.shape} vs {bv.shape}")
    k = av.shape[1]
    return _op(np.concatenate([av, bv], axis=1), (a, b), lambda g: (g[:, :k], g[:, k:]))


def reshape(x, shape):
    xv = value(x)
    old = xv.shape
    return _op(xv.reshape(shape), (x,), lambda g: (g.reshape(old),))


# --------------------------------------------------------------------------
# row geometry

def row_normalize(x, eps: float = NORM_EPS):
    xv = value(x)
    n = _row_norms(xv)[:, None]
    guarded = n > eps
    d = np.where(guarded, n, eps)
    out = xv / d

    def bw(g):
        radial = np.sum(g * out, axis=1, keepdims=True) * out
        return (np.where(guarded, g - radial, g) / d,)

    return _op(out, (x,), bw)


def _row_norms(x):
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def cosine_rows(a, b, eps: float = NORM_EPS):
    """Per-row cosine similarity; rows with norm <= eps count as zero vectors."""
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise DimensionError(f"cosine_rows shape mismatch: {av.shape} vs {bv.shape}")
    na, nb = _row_norms(av), _row_norms(bv)
    live = (na > eps) & (nb > eps)
    da = np.where(na > eps, na, eps)
    db = np.where(nb > eps, nb, eps)
    inv = np.where(live, 1.0 / (da * db), 0.0)
    cos = np.einsum("ij,ij->i", av, bv) * inv

    def bw(g):
        ga = (g * inv)[:, None] * bv - (g * cos / (da * da))[:, None] * av
        gb = (g * inv)[:, None] * av - (g * cos / (db * db))[:, None] * bv
        return ga, gb

    return _op(cos, (a, b), bw)


def cosine_matrix(a, b, eps: float = NORM_EPS):
    """(K x N) cosine similarities between the rows of ``a`` (K x C) and ``b`` (N x C)."""
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionError(f"cosine_matrix shape mismatch: {av.shape} vs {bv.shape}")
    na, nb = _row_norms(av), _row_norms(bv)
    da = np.where(na > eps, na, eps)
    db = np.where(nb > eps, nb, eps)
    ua = np.where((na > eps)[:, None], av / da[:, None], 0.0)
    ub = np.where((nb > eps)[:, None], bv / db[:, None], 0.0)
    cos = ua @ ub.T

    def bw(g):
        # d cos_kn / d a_k = (ub_n - cos_kn ua_k) / |a_k|, zero for guarded rows
        ga = (g @ ub - np.sum(g * cos, axis=1, keepdims=True) * ua) / da[:, None]
        gb = (g.T @ ua - np.sum(g * cos, axis=0)[:, None] * ub) / db[:, None]
        return ga, gb

    return _op(cos, (a, b), bw)


# --------------------------------------------------------------------------
# segment reductions

def pooling_matrix(groups: Iterable, n_points: int) -> sp.csr_matrix:
    """Sparse (K x N) matrix whose row k averages the point indices in groups[k]."""
    groups = [np.asarray(idx, dtype=np.int64).ravel() for idx in groups]
    sizes = np.array([g.size for g in groups], dtype=np.int64)
    indptr = np.zeros(len(groups) + 1, dtype=np.int64)
    np.cumsum(sizes, out=indptr[1:])
    if indptr[-1] == 0:
        return sp.csr_matrix((len(groups), n_points))
    indices = np.concatenate(groups)
    data = np.repeat(1.0 / np.maximum(sizes, 1), sizes)
    return sp.csr_matrix((data, indices, indptr), shape=(len(groups), n_points))


def segment_matrix(seg: np.ndarray, n_seg: int, weights=None) -> sp.csc_matrix:
    seg = np.asarray(seg, dtype=np.int64)
    vals = np.ones(seg.size) if weights is None else np.asarray(weights, dtype=np.float64)
    # one entry per column, so the CSC arrays can be written down directly
    return sp.csc_matrix((vals, seg, np.arange(seg.size + 1)), shape=(n_seg, seg.size))


def pool(x, matrix: sp.spmatrix, matrix_t: sp.spmatrix | None = None):
    """Sparse-linear row pooling ``matrix @ x`` (``matrix_t`` optionally caches the transpose)."""
    xv = value(x)
    if matrix.shape[1] != xv.shape[0]:
        raise DimensionError(f"pool matrix {matrix.shape} does not fit input {xv.shape}")

    def bw(g):
        mt = matrix_t if matrix_t is not None else matrix.T.tocsr()
        return (np.asarray(mt @ g),)

    return _op(np.asarray(matrix @ xv), (x,), bw)


def segment_sum(x, seg, n_seg: int):
    return pool(x, segment_matrix(seg, n_seg))


def segment_mean(x, seg, n_seg: int):
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_seg).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return pool(x, segment_matrix(seg, n_seg, weights=inv[seg]))


def segment_weighted_mean(x, w, seg, n_seg: int, eps: float = POOL_EPS):
    """Row k = sum_j w_j x_j / max(sum_j w_j, eps) over points j with seg[j] == k."""
    xv, wv = value(x), value(w)
    seg = np.asarray(seg, dtype=np.int64)
    wshape = wv.shape
    wf = wv.reshape(-1)
    if wf.size != xv.shape[0] or seg.size != xv.shape[0]:
        raise DimensionError(f"weighted pool sizes differ: x {xv.shape}, w {wshape}, seg {seg.shape}")
    mat = segment_matrix(seg, n_seg)
    wsum = np.bincount(seg, weights=wf, minlength=n_seg)
    denom = np.maximum(wsum, eps)
    num = np.asarray(mat @ (xv * wf[:, None]))
    out = num / denom[:, None]

    def bw(g):
        gp = g / denom[:, None]
        gx = gp[seg] * wf[:, None]
        gw = np.sum(gp[seg] * (xv - out[seg]), axis=1)
        gw = np.where(wsum[seg] > eps, gw, np.sum(gp[seg] * xv, axis=1))
        return gx, gw.reshape(wshape)

    return _op(out, (x, w), bw)


def gather_rows(x, idx):
    xv = value(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = xv.shape[0]

    def bw(g):
        scatter = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
        return (np.asarray(scatter @ g),)

    return _op(xv[idx], (x,), bw)


def gram(x):
    xv = value(x)
    return _op(xv @ xv.T, (x,), lambda g: ((g + g.T) @ xv,))


# --------------------------------------------------------------------------
# reductions and losses

def total(x):
    xv = value(x)
    shape = xv.shape
    return _op(np.asarray(xv.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x):
    xv = value(x)
    shape, n = xv.shape, xv.size
    return _op(np.asarray(xv.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def masked_mean(x, mask):
    """Mean over entries where ``mask`` is true; 0 if the mask is empty."""
    xv = value(x)
    mask = np.asarray(mask, dtype=bool).reshape(xv.shape)
    n = int(mask.sum())
    if n == 0:
        return _op(np.asarray(0.0), (x,), lambda g: (np.zeros(xv.shape),))
    return _op(np.asarray(xv[mask].sum() / n), (x,), lambda g: (mask * (float(g) / n),))


def mse(a, b):
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise DimensionError(f"mse shape mismatch: {av.shape} vs {bv.shape}")
    diff = av - bv
    n = diff.size
    return _op(np.asarray(np.mean(diff * diff)), (a, b), lambda g: (2.0 * float(g) / n * diff, -2.0 * float(g) / n * diff))


def bce(target, prob, clamp: float = BCE_CLAMP):
    """Mean binary cross-entropy of probabilities against 0/1 targets."""
    tv = np.asarray(value(target), dtype=np.float64)
    pv = value(prob)
    if tv.shape != pv.shape:
        raise DimensionError(f"bce shape mismatch: {tv.shape} vs {pv.shape}")
    pc = np.clip(pv, clamp, 1.0 - clamp)
    inside = (pv > clamp) & (pv < 1.0 - clamp)
    n = pv.size
    loss = -np.mean(tv * np.log(pc) + (1.0 - tv) * np.log(1.0 - pc))

    def bw(g):
        dp = (-(tv / pc) + (1.0 - tv) / (1.0 - pc)) * (float(g) / n)
        return None, np.where(inside, dp, 0.0)

    return _op(np.asarray(loss), (target, prob), bw)


def weighted_sum(coeffs, terms):
    """Scalar combination sum_k coeffs[k] * terms[k]."""
    coeffs = [float(c) for c in coeffs]
    vals = [float(value(t)) for t in terms]
    out = np.asarray(sum(c * v for c, v in zip(coeffs, vals)))
    return _op(out, tuple(terms), lambda g: tuple(np.asarray(float(g) * c) for c in coeffs))


# --------------------------------------------------------------------------
# parameters

class ParamStore:
    """Named float64 parameter tensors of the adapter, uncertainty head and mask head.

    Tensors are 2-D; biases are stored as single-row matrices. Layers use the
    row-vector convention ``y = x @ W + b``.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict(
            (name, np.array(t, dtype=np.float64, ndmin=2)) for name, t in tensors.items()
        )

    @classmethod
    def init(cls, c1: int, c: int, hidden: int | None = None, seed: int = 0) -> "ParamStore":
        """Glorot-uniform adapter, zero uncertainty head (weights start at 0.5),
        identity mask head."""
        hidden = 2 * c1 if hidden is None else hidden
        rng = np.random.default_rng(seed)

        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        return cls(
            OrderedDict(
                [
                    ("adapter.w1", glorot(c1, hidden)),
                    ("adapter.b1", np.zeros((1, hidden))),
                    ("adapter.w2", glorot(hidden, c)),
                    ("adapter.b2", np.zeros((1, c))),
                    ("uncertainty.w", np.zeros((c1 + c, 1))),
                    ("uncertainty.b", np.zeros((1, 1))),
                    ("mask.w", np.eye(c)),
                    ("mask.b", np.zeros((1, c))),
                ]
            )
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        """(C1, H, C)."""
        w1, w2 = self._tensors["adapter.w1"], self._tensors["adapter.w2"]
        return w1.shape[0], w1.shape[1], w2.shape[1]

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def __getitem__(self, name):
        return self._tensors[name]

    def __setitem__(self, name, val):
        val = np.array(val, dtype=np.float64, ndmin=2)
        if name not in self._tensors:
            raise KeyError(name)
        if val.shape != self._tensors[name].shape:
            raise DimensionError(f"{name}: cannot replace shape {self._tensors[name].shape} with {val.shape}")
        self._tensors[name] = val

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def copy(self) -> "ParamStore":
        return ParamStore(OrderedDict((k, v.copy()) for k, v in self._tensors.items()))

    def zeros_like(self) -> "ParamStore":
        return ParamStore(OrderedDict((k, np.zeros_like(v)) for k, v in self._tensors.items()))

    def equals(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self.names()
        )

    # checkpoint format: b"GGPK", u32 version, then per tensor
    # (u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64), little-endian

    def to_bytes(self, extra: Mapping[str, np.ndarray] | None = None) -> bytes:
        return dump_tensors({**self._tensors, **(extra or {})})

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        tensors = load_tensors(data)
        return cls(OrderedDict((k, v) for k, v in tensors.items() if not k.startswith("state.")))

    def save(self, path, extra=None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(extra))

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def dump_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    for name, t in tensors.items():
        t = np.array(t, dtype=np.float64, ndmin=2)
        if t.ndim != 2:
            raise DimensionError(f"{name}: only 2-D tensors can be serialized, got {t.shape}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return buf.getvalue()


def load_tensors(data: bytes) -> OrderedDict:
    if len(data) < 8 or data[:4] != _MAGIC:
        raise StateError("not a GGPK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise StateError(f"unsupported GGPK version {version}")
    pos = 8
    out = OrderedDict()
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise StateError("truncated GGPK checkpoint")
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            count = rows * cols
            if pos + 8 * count > len(data):
                raise StateError(f"truncated GGPK checkpoint in tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(rows, cols).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise StateError(f"truncated GGPK checkpoint: {exc}") from None
    return out


# --------------------------------------------------------------------------
# networks

def forward_adapter(geo, params, activation: str = "relu", normalize: bool = False):
    """Two-layer adapter from geometric descriptors to the semantic space."""
    gv = value(geo)
    w1 = params["adapter.w1"]
    if gv.ndim != 2 or gv.shape[1] != _shape(w1)[0]:
        raise DimensionError(f"adapter expects (N, {_shape(w1)[0]}) input, got {gv.shape}; w1 is {_shape(w1)}")
    h = add_bias(matmul(geo, w1), params["adapter.b1"])
    if activation == "relu":
        h = relu(h)
    elif activation == "sigmoid":
        h = sigmoid(h)
    elif activation != "identity":
        raise ValueError(f"unknown activation {activation!r}")
    out = add_bias(matmul(h, params["adapter.w2"]), params["adapter.b2"])
    if normalize:
        out = row_normalize(out)
    return out
