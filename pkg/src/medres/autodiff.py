"""Small reverse-mode autodiff engine over float64 numpy arrays.

Everything a relevance model needs and nothing more: dense tensors,
COO sparse matrices, a tape of primitive applications, and a
bias-corrected Adam step.  Values are immutable; a tape belongs to a
single training thread and is rebuilt per batch.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse as _scipy_sparse


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class MissingGradientError(KeyError):
    """A named parameter has no entry in the supplied gradient map."""


def _as_float64(data, what="tensor data"):
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


class Tensor:
    """Immutable dense value: row-major float64, finite everywhere.

    NaN/Inf are rejected at construction so they cannot leak into a
    forward pass unnoticed.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = _as_float64(data)
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class SparseMatrix:
    """COO sparse matrix with unique coordinates sorted row-major.

    CSR is used internally to multiply, but the contract is the sorted
    coordinate list.  Values must be finite; duplicates are an error
    rather than being summed, so accidental double-inserts surface.
    """

    __slots__ = ("rows", "cols", "row_idx", "col_idx", "values", "_csr")

    def __init__(self, rows, cols, row_idx, col_idx, values):
        if rows < 0 or cols < 0:
            raise ShapeError("matrix extents must be nonnegative")
        self.rows = int(rows)
        self.cols = int(cols)
        ri = np.asarray(row_idx, dtype=np.int64).ravel()
        ci = np.asarray(col_idx, dtype=np.int64).ravel()
        vals = _as_float64(values, "sparse values").ravel()
        if not (ri.shape == ci.shape == vals.shape):
            raise ShapeError("row/col/value arrays must have equal length")
        if ri.size:
            if ri.min() < 0 or ri.max() >= self.rows:
                raise IndexError("row index out of bounds")
            if ci.min() < 0 or ci.max() >= self.cols:
                raise IndexError("col index out of bounds")
        order = np.lexsort((ci, ri))
        ri, ci, vals = ri[order], ci[order], vals[order]
        if ri.size > 1:
            same = (np.diff(ri) == 0) & (np.diff(ci) == 0)
            if np.any(same):
                k = int(np.nonzero(same)[0][0])
                raise ValueError(f"duplicate coordinate ({ri[k]}, {ci[k]})")
        for a in (ri, ci, vals):
            a.setflags(write=False)
        self.row_idx, self.col_idx, self.values = ri, ci, vals
        self._csr = None

    @classmethod
    def from_entries(cls, rows, cols, entries):
        """Build from an iterable of (row, col, value) triples."""
        entries = list(entries)
        if not entries:
            return cls(rows, cols, [], [], [])
        ri, ci, vals = zip(*entries)
        return cls(rows, cols, ri, ci, vals)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, idx, idx, np.ones(n))

    @classmethod
    def empty(cls, rows, cols):
        return cls(rows, cols, [], [], [])

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    def entries(self):
        return list(zip(self.row_idx.tolist(), self.col_idx.tolist(), self.values.tolist()))

    def densify(self) -> Tensor:
        out = np.zeros((self.rows, self.cols))
        out[self.row_idx, self.col_idx] = self.values
        return Tensor(out)

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.cols, self.rows, self.col_idx, self.row_idx, self.values)

    def scaled(self, row_scale, col_scale) -> "SparseMatrix":
        """Entrywise rescale: value * row_scale[r] * col_scale[c]."""
        vals = self.values * np.asarray(row_scale)[self.row_idx] * np.asarray(col_scale)[self.col_idx]
        return SparseMatrix(self.rows, self.cols, self.row_idx, self.col_idx, vals)

    def csr(self):
        if self._csr is None:
            self._csr = _scipy_sparse.csr_matrix(
                (self.values, (self.row_idx, self.col_idx)), shape=(self.rows, self.cols)
            )
        return self._csr

    def __repr__(self):
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


class _Node:
    __slots__ = ("op", "value", "input_ids", "backward_fn", "param_name")

    def __init__(self, op, value, input_ids, backward_fn, param_name=None):
        self.op = op
        self.value = value
        self.input_ids = input_ids
        self.backward_fn = backward_fn
        self.param_name = param_name


class Var:
    """Handle to a node on a tape; `.value` is the forward result."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.index].value

    @property
    def shape(self) -> tuple:
        return self.value.shape


class Tape:
    """Append-only record of primitive applications.

    Inputs always precede outputs, so reverse creation order is a valid
    topological order and the backward sweep touches each node once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._param_ids: dict[str, int] = {}

    def _record(self, op, value, inputs, backward_fn, param_name=None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        node = _Node(op, value, tuple(v.index for v in inputs), backward_fn, param_name)
        self._nodes.append(node)
        return Var(self, len(self._nodes) - 1)

    def constant(self, data) -> Var:
        """A leaf with no gradient (raw array, Tensor, or scalar)."""
        if isinstance(data, Tensor):
            arr = data.data
        else:
            arr = _as_float64(data, "constant")
        return self._record("const", arr, (), None)

    def param(self, store: "ParameterStore", name: str) -> Var:
        """Leaf bound to a named parameter; repeated requests share a node."""
        if name in self._param_ids:
            return Var(self, self._param_ids[name])
        var = self._record("param", store.value(name), (), None, param_name=name)
        self._param_ids[name] = var.index
        return var

    @property
    def size(self) -> int:
        return len(self._nodes)


def _accumulate(grads, index, delta):
    if grads[index] is None:
        grads[index] = np.zeros_like(delta)
    grads[index] += delta


def backward(loss: Var) -> dict:
    """Reverse sweep from a scalar loss.

    Returns one gradient per parameter leaf on the tape; parameters the
    loss never reached get zeros rather than being dropped.
    """
    tape = loss.tape
    root = tape._nodes[loss.index]
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
    grads: list = [None] * len(tape._nodes)
    grads[loss.index] = np.ones_like(root.value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape._nodes[i]
        if node.backward_fn is not None:
            node.backward_fn(g, grads)
    out = {}
    for name, idx in tape._param_ids.items():
        g = grads[idx]
        out[name] = np.zeros_like(tape._nodes[idx].value) if g is None else g
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _same_tape(*vars_):
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul {av.shape} x {bv.shape}")
    ai, bi = a.index, b.index

    def back(g, grads):
        _accumulate(grads, ai, g @ bv.T)
        _accumulate(grads, bi, av.T @ g)

    return tape._record("matmul", av @ bv, (a, b), back)


def spmm(s: SparseMatrix, x: Var) -> Var:
    """Sparse @ dense with a constant sparse operand; grads reach x only."""
    tape = x.tape
    xv = x.value
    if xv.ndim != 2 or s.cols != xv.shape[0]:
        raise ShapeError(f"spmm {s.shape} x {xv.shape}")
    csr = s.csr()
    csr_t = csr.T.tocsr()
    xi = x.index

    def back(g, grads):
        _accumulate(grads, xi, np.asarray(csr_t @ g))

    return tape._record("spmm", np.asarray(csr @ xv), (x,), back)


class SparseVar:
    """Sparse matrix whose entry values are a (nnz, 1) tape variable.

    Coordinates are fixed structure (not necessarily sorted); gradients
    flow to the values column and through any spmm to the dense operand.
    """

    __slots__ = ("rows", "cols", "row_idx", "col_idx", "values")

    def __init__(self, rows, cols, row_idx, col_idx, values: Var):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_idx = np.asarray(row_idx, dtype=np.int64).ravel()
        self.col_idx = np.asarray(col_idx, dtype=np.int64).ravel()
        if values.value.shape != (self.row_idx.size, 1):
            raise ShapeError("sparse values must be an (nnz, 1) column")
        if self.row_idx.size:
            if self.row_idx.min() < 0 or self.row_idx.max() >= self.rows:
                raise IndexError("row index out of bounds")
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.cols:
                raise IndexError("col index out of bounds")
        self.values = values


def spmm_dyn(s: SparseVar, x: Var) -> Var:
    """Sparse @ dense where the sparse values are differentiable."""
    tape = _same_tape(s.values, x)
    xv = x.value
    if xv.ndim != 2 or s.cols != xv.shape[0]:
        raise ShapeError(f"spmm_dyn ({s.rows},{s.cols}) x {xv.shape}")
    vals = s.values.value.ravel()
    csr = _scipy_sparse.csr_matrix((vals, (s.row_idx, s.col_idx)), shape=(s.rows, s.cols))
    csr_t = csr.T.tocsr()
    vi, xi = s.values.index, x.index
    row_idx, col_idx = s.row_idx, s.col_idx

    def back(g, grads):
        _accumulate(grads, xi, np.asarray(csr_t @ g))
        dv = np.einsum("ij,ij->i", g[row_idx], xv[col_idx])
        _accumulate(grads, vi, dv[:, None])

    return tape._record("spmm_dyn", np.asarray(csr @ xv), (s.values, x), back)


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add {a.value.shape} vs {b.value.shape}")
    ai, bi = a.index, b.index

    def back(g, grads):
        _accumulate(grads, ai, g)
        _accumulate(grads, bi, g)

    return tape._record("add", a.value + b.value, (a, b), back)


def add_row(x: Var, bias: Var) -> Var:
    """Broadcast a row vector over every row of x (the only broadcast)."""
    tape = _same_tape(x, bias)
    xv, bv = x.value, bias.value
    if xv.ndim != 2 or bv.ravel().shape != (xv.shape[1],):
        raise ShapeError(f"add_row {xv.shape} + {bv.shape}")
    xi, bi = x.index, bias.index
    bshape = bv.shape

    def back(g, grads):
        _accumulate(grads, xi, g)
        _accumulate(grads, bi, g.sum(axis=0).reshape(bshape))

    return tape._record("add_row", xv + bv.ravel()[None, :], (x, bias), back)


def mul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    ai, bi = a.index, b.index

    def back(g, grads):
        _accumulate(grads, ai, g * bv)
        _accumulate(grads, bi, g * av)

    return tape._record("mul", av * bv, (a, b), back)


def scale(x: Var, c: float) -> Var:
    tape = x.tape
    xi = x.index
    c = float(c)

    def back(g, grads):
        _accumulate(grads, xi, g * c)

    return tape._record("scale", x.value * c, (x,), back)


def relu(x: Var) -> Var:
    tape = x.tape
    out = np.maximum(x.value, 0.0)
    mask = x.value > 0.0
    xi = x.index

    def back(g, grads):
        _accumulate(grads, xi, g * mask)

    return tape._record("relu", out, (x,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Var) -> Var:
    tape = x.tape
    out = _sigmoid(np.asarray(x.value, dtype=np.float64))
    xi = x.index

    def back(g, grads):
        _accumulate(grads, xi, g * out * (1.0 - out))

    return tape._record("sigmoid", out, (x,), back)


def concat_cols(xs) -> Var:
    """Column-wise concatenation; operands keep their order."""
    xs = list(xs)
    tape = _same_tape(*xs)
    m = xs[0].value.shape[0]
    for v in xs:
        if v.value.ndim != 2 or v.value.shape[0] != m:
            raise ShapeError("concat_cols operands must share row count")
    widths = [v.value.shape[1] for v in xs]
    offsets = np.cumsum([0] + widths)
    ids = [v.index for v in xs]

    def back(g, grads):
        for i, vid in enumerate(ids):
            _accumulate(grads, vid, g[:, offsets[i]:offsets[i + 1]])

    return tape._record("concat_cols", np.concatenate([v.value for v in xs], axis=1), xs, back)


def concat_rows(xs) -> Var:
    xs = list(xs)
    tape = _same_tape(*xs)
    n = xs[0].value.shape[1]
    for v in xs:
        if v.value.ndim != 2 or v.value.shape[1] != n:
            raise ShapeError("concat_rows operands must share column count")
    heights = [v.value.shape[0] for v in xs]
    offsets = np.cumsum([0] + heights)
    ids = [v.index for v in xs]

    def back(g, grads):
        for i, vid in enumerate(ids):
            _accumulate(grads, vid, g[offsets[i]:offsets[i + 1], :])

    return tape._record("concat_rows", np.concatenate([v.value for v in xs], axis=0), xs, back)


def gather_rows(x: Var, ids) -> Var:
    """Row gather; the backward pass scatter-adds into the source rows."""
    tape = x.tape
    idx = np.asarray(ids, dtype=np.int64).ravel()
    if x.value.ndim != 2:
        raise ShapeError("gather_rows needs a matrix")
    if idx.size and (idx.min() < 0 or idx.max() >= x.value.shape[0]):
        raise IndexError("row id out of range")
    xi = x.index
    shape = x.value.shape

    def back(g, grads):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        _accumulate(grads, xi, gx)

    return tape._record("gather", x.value[idx], (x,), back)


def sum_all(x: Var) -> Var:
    tape = x.tape
    xi = x.index
    shape = x.value.shape

    def back(g, grads):
        _accumulate(grads, xi, np.full(shape, float(g)))

    return tape._record("sum", np.asarray(x.value.sum()), (x,), back)


BCE_CLAMP = 1e-12


def bce(pred: Var, labels) -> Var:
    """Mean binary cross-entropy with logs clamped at 1e-12.

    `labels` is a constant array of 0/1; predictions must already be in
    [0, 1] (the clamp only guards exactly-saturated values).
    """
    tape = pred.tape
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    p = pred.value
    if p.shape != y.shape:
        raise ShapeError(f"bce {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("bce over an empty batch")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("bce labels must be 0 or 1")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("bce predictions must lie in [0, 1]")
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / n
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    pi = pred.index

    def back(g, grads):
        dp = np.where(inside, -(y / pc - (1.0 - y) / (1.0 - pc)) / n, 0.0)
        _accumulate(grads, pi, float(g) * dp)

    return tape._record("bce", np.asarray(loss), (pred,), back)


# ---------------------------------------------------------------------------
# parameters and Adam
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named trainable arrays plus per-parameter Adam state.

    `decay` marks parameters eligible for L2 weight decay; embedding
    tables and biases are registered with decay=False.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}
        self._decay: dict[str, bool] = {}

    def add(self, name: str, value, decay: bool = True) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = _as_float64(value, f"parameter {name!r}")
        self._values[name] = arr.copy()
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        self._t[name] = 0
        self._decay[name] = bool(decay)

    def names(self) -> tuple:
        return tuple(self._values)

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def set_value(self, name: str, value) -> None:
        arr = _as_float64(value, f"parameter {name!r}")
        if arr.shape != self._values[name].shape:
            raise ShapeError(f"parameter {name!r} shape changed")
        self._values[name] = arr

    def step_count(self, name: str) -> int:
        return self._t[name]

    def moments(self, name: str) -> tuple:
        return self._m[name], self._v[name]

    def snapshot(self) -> dict:
        """Deep copy of values and optimizer state, for checkpointing."""
        return {
            "values": {k: v.copy() for k, v in self._values.items()},
            "m": {k: v.copy() for k, v in self._m.items()},
            "v": {k: v.copy() for k, v in self._v.items()},
            "t": dict(self._t),
        }

    def restore(self, snap: dict) -> None:
        for k in self._values:
            self._values[k] = snap["values"][k].copy()
            self._m[k] = snap["m"][k].copy()
            self._v[k] = snap["v"][k].copy()
            self._t[k] = snap["t"][k]

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)


def adam_step(store: ParameterStore, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One bias-corrected Adam update over every parameter in the store.

    Every parameter must have a gradient entry; a silent skip would hide
    wiring bugs, so absence raises.
    """
    for name in store.names():
        if name not in grads:
            raise MissingGradientError(f"no gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        theta = store._values[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, want {theta.shape}")
        t = store._t[name] + 1
        m = beta1 * store._m[name] + (1.0 - beta1) * g
        v = beta2 * store._v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        store._values[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        store._m[name] = m
        store._v[name] = v
        store._t[name] = t
    return store


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) init for weight matrices."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
