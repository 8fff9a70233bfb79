"""Dense f64 arrays with a reverse-mode differentiation tape.

The tape is define-by-run: every differentiable operation appends one
node, and ``backward`` sweeps the node list once in strict reverse
creation order, accumulating adjoints.  A tape lives for exactly one
forward pass; training rebuilds it per step.

Operations are module-level functions.  They compute with plain numpy
and record a tape node only when at least one operand is
differentiable (i.e. has a node); otherwise they return a constant
tensor, so the same pipeline code serves inference and training.

Concurrency: a tape is single-writer and confined to one worker.
Distinct tapes (one per image) may run in parallel; ``ParamStore``
reads are safe, and gradient reduction across workers is the caller's
job.  Gradient accumulators are never cleared implicitly — call
``ParamStore.zero_grads`` between steps.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """Tape contract violation: non-scalar loss, mixed tapes, reuse."""


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# parameters


class Param:
    __slots__ = ("name", "data", "grad", "lr_mult")

    def __init__(self, name: str, data, lr_mult: float = 1.0):
        self.name = name
        self.data = _f64(data).copy()
        self.grad = np.zeros_like(self.data)
        self.lr_mult = float(lr_mult)


class ParamStore:
    """Named parameter tensors with same-shape gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, data, lr_mult: float = 1.0) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Param(name, data, lr_mult)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def scale_grads(self, s: float) -> None:
        for p in self._params.values():
            p.grad *= s


# ---------------------------------------------------------------------------
# tape


class TapeNode:
    __slots__ = ("op", "vals", "par", "out", "adj", "aux", "sink", "tape")

    def __init__(self, op, vals, par, out, aux, sink, tape):
        self.op = op
        self.vals = vals       # input ndarrays needed by the backward rule
        self.par = par         # parent TapeNode or None per input
        self.out = out
        self.adj = None
        self.aux = aux
        self.sink = sink       # Param receiving this leaf's adjoint
        self.tape = tape


class Tensor:
    """An f64 array, optionally attached to a tape node."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: TapeNode | None = None):
        self.data = _f64(data)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray | None:
        """Adjoint accumulated on this tensor's node (None before backward)."""
        return None if self.node is None else self.node.adj

    def __repr__(self):
        tag = "" if self.node is None else f" op={self.node.op}"
        return f"Tensor(shape={self.data.shape}{tag})"


class Tape:
    """Recording of one forward pass, swept once by ``backward``."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._swept = False

    def _emit(self, op, out, vals, par, aux=None, sink=None) -> Tensor:
        node = TapeNode(op, vals, par, out, aux, sink, self)
        self.nodes.append(node)
        return Tensor(out, node)

    def leaf(self, data) -> Tensor:
        """A differentiable input; its adjoint is readable after backward."""
        return self._emit("leaf", _f64(data).copy(), (), ())

    def param(self, store: ParamStore, name: str) -> Tensor:
        """A leaf bound to a stored parameter; backward adds into its grad."""
        return self._emit("leaf", store[name].data, (), (), sink=store[name])

    def backward(self, loss: Tensor) -> None:
        backward(loss)


def constant(data) -> Tensor:
    return Tensor(data)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        n = t.node
        if n is not None:
            if tape is None:
                tape = n.tape
            elif tape is not n.tape:
                raise TapeError("operands recorded on different tapes")
    return tape


def _nodes(*tensors: Tensor):
    return tuple(t.node for t in tensors)


# ---------------------------------------------------------------------------
# operations


def matvec(m: Tensor, v: Tensor) -> Tensor:
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise DimensionError(f"matvec {m.data.shape} x {v.data.shape}")
    out = m.data @ v.data
    tape = _tape_of(m, v)
    if tape is None:
        return Tensor(out)
    return tape._emit("matvec", out, (m.data, v.data), _nodes(m, v))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    return tape._emit("matmul", out, (a.data, b.data), _nodes(a, b))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    out = np.ascontiguousarray(x.data.T)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("transpose", out, (), _nodes(x))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    return tape._emit("add", out, (), _nodes(a, b))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n-by-d matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_bias {x.data.shape} + {b.data.shape}")
    out = x.data + b.data
    tape = _tape_of(x, b)
    if tape is None:
        return Tensor(out)
    return tape._emit("add_bias", out, (), _nodes(x, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    return tape._emit("mul", out, (a.data, b.data), _nodes(a, b))


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("scale", out, (), _nodes(x), aux=c)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("sigmoid", out, (), _nodes(x))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("tanh", out, (), _nodes(x))


def pointwise(op: str, *args: Tensor, c: float | None = None) -> Tensor:
    """Dispatch of the elementwise family: sigmoid|tanh|mul|add|scale."""
    if op == "sigmoid":
        return sigmoid(*args)
    if op == "tanh":
        return tanh(*args)
    if op == "mul":
        return mul(*args)
    if op == "add":
        return add(*args)
    if op == "scale":
        return scale(args[0], c)
    raise ValueError(f"unknown pointwise op {op!r}")


def mean_of(tensors: list[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors; gradient 1/n to each."""
    if not tensors:
        raise DimensionError("mean_of of an empty list")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise DimensionError("mean_of over mixed shapes")
    n = len(tensors)
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    out = acc / n
    tape = _tape_of(*tensors)
    if tape is None:
        return Tensor(out)
    return tape._emit("mean_of", out, (), _nodes(*tensors), aux=n)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = np.asarray(x.data.sum())
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("total", out, (), _nodes(x), aux=x.data.shape)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the rows of an n-by-d matrix, returning a d-vector."""
    if x.data.ndim != 2:
        raise DimensionError("mean_rows expects a matrix")
    n = x.data.shape[0]
    out = x.data.mean(axis=0)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("mean_rows", out, (), _nodes(x), aux=(n, x.data.shape))


def segment_mean(x: Tensor, seg: np.ndarray, nseg: int) -> Tensor:
    """Per-segment mean of matrix rows; every segment must be non-empty.

    Gradient distributes 1/|segment| of the segment adjoint to each
    member row.
    """
    if x.data.ndim != 2 or seg.shape != (x.data.shape[0],):
        raise DimensionError("segment_mean: rows and segment ids must align")
    counts = np.bincount(seg, minlength=nseg)
    if nseg == 0 or counts.min() <= 0:
        raise DimensionError("segment_mean: empty segment")
    d = x.data.shape[1]
    sums = np.empty((nseg, d))
    for j in range(d):
        sums[:, j] = np.bincount(seg, weights=x.data[:, j], minlength=nseg)
    inv = 1.0 / counts
    out = sums * inv[:, None]
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("segment_mean", out, (), _nodes(x), aux=(seg, inv))


def row(x: Tensor, i: int) -> Tensor:
    """Row i of a matrix as a vector."""
    if x.data.ndim != 2:
        raise DimensionError("row expects a matrix")
    out = x.data[i]
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("row", out, (), _nodes(x), aux=(i, x.data.shape))


def stack_rows(tensors: list[Tensor]) -> Tensor:
    """Stack equally sized vectors into an n-by-d matrix."""
    if not tensors:
        raise DimensionError("stack_rows of an empty list")
    out = np.stack([t.data for t in tensors])
    tape = _tape_of(*tensors)
    if tape is None:
        return Tensor(out)
    return tape._emit("stack_rows", out, (), _nodes(*tensors))


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("log_softmax_rows expects a matrix")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("log_softmax_rows", out, (), _nodes(x), aux=np.exp(out))


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)
    return tape._emit("softmax_rows", out, (), _nodes(x))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# backward sweep


def _acc(node: TapeNode | None, g) -> None:
    # node.adj stays privately owned: first write copies, later writes add
    # in place, so pass-through rules may hand out views safely.
    if node is None:
        return
    if node.adj is None:
        node.adj = np.array(g)
    else:
        node.adj += g


def _bk_leaf(n):
    if n.sink is not None:
        n.sink.grad += n.adj


def _bk_matvec(n):
    m, v = n.vals
    _acc(n.par[0], np.outer(n.adj, v))
    _acc(n.par[1], m.T @ n.adj)


def _bk_matmul(n):
    a, b = n.vals
    _acc(n.par[0], n.adj @ b.T)
    _acc(n.par[1], a.T @ n.adj)


def _bk_transpose(n):
    _acc(n.par[0], n.adj.T)


def _bk_add(n):
    _acc(n.par[0], n.adj)
    _acc(n.par[1], n.adj)


def _bk_add_bias(n):
    _acc(n.par[0], n.adj)
    _acc(n.par[1], n.adj.sum(axis=0))


def _bk_mul(n):
    a, b = n.vals
    _acc(n.par[0], n.adj * b)
    _acc(n.par[1], n.adj * a)


def _bk_scale(n):
    _acc(n.par[0], n.adj * n.aux)


def _bk_sigmoid(n):
    y = n.out
    _acc(n.par[0], n.adj * y * (1.0 - y))


def _bk_tanh(n):
    y = n.out
    _acc(n.par[0], n.adj * (1.0 - y * y))


def _bk_mean_of(n):
    g = n.adj / n.aux
    for p in n.par:
        _acc(p, g)


def _bk_total(n):
    _acc(n.par[0], np.broadcast_to(n.adj, n.aux))


def _bk_mean_rows(n):
    cnt, shape = n.aux
    _acc(n.par[0], np.broadcast_to(n.adj / cnt, shape))


def _bk_segment_mean(n):
    seg, inv = n.aux
    _acc(n.par[0], (n.adj * inv[:, None])[seg])


def _bk_row(n):
    i, shape = n.aux
    p = n.par[0]
    if p is None:
        return
    if p.adj is None:
        p.adj = np.zeros(shape)
    p.adj[i] += n.adj


def _bk_stack_rows(n):
    for k, p in enumerate(n.par):
        _acc(p, n.adj[k])


def _bk_log_softmax_rows(n):
    softmax = n.aux
    _acc(n.par[0], n.adj - softmax * n.adj.sum(axis=1, keepdims=True))


def _bk_softmax_rows(n):
    y = n.out
    _acc(n.par[0], y * (n.adj - (n.adj * y).sum(axis=1, keepdims=True)))


_BACKWARD = {
    "leaf": _bk_leaf,
    "matvec": _bk_matvec,
    "matmul": _bk_matmul,
    "transpose": _bk_transpose,
    "add": _bk_add,
    "add_bias": _bk_add_bias,
    "mul": _bk_mul,
    "scale": _bk_scale,
    "sigmoid": _bk_sigmoid,
    "tanh": _bk_tanh,
    "mean_of": _bk_mean_of,
    "total": _bk_total,
    "mean_rows": _bk_mean_rows,
    "segment_mean": _bk_segment_mean,
    "row": _bk_row,
    "stack_rows": _bk_stack_rows,
    "log_softmax_rows": _bk_log_softmax_rows,
    "softmax_rows": _bk_softmax_rows,
}


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) on every differentiable leaf.

    The loss must be a scalar recorded on a tape; the sweep visits
    nodes in reverse creation order exactly once.
    """
    node = loss.node
    if node is None:
        raise TapeError("loss is not recorded on any tape")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    tape = node.tape
    if tape._swept:
        raise TapeError("backward already run on this tape")
    tape._swept = True
    node.adj = np.ones_like(loss.data)
    dispatch = _BACKWARD
    for n in reversed(tape.nodes):
        if n.adj is not None:
            dispatch[n.op](n)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Per-parameter max relative error of tape gradients vs central
    finite differences; relative error is |a-b| / max(1, |a|, |b|)."""

    def __init__(self, step: float, tol: float):
        self.step = step
        self.tol = tol
        self.max_rel_err: dict[str, float] = {}
        self.flagged: list[str] = []

    @property
    def passed(self) -> bool:
        if self.flagged:
            return False
        return all(e < self.tol for e in self.max_rel_err.values())

    def worst(self) -> tuple[str, float]:
        if not self.max_rel_err:
            return ("", 0.0)
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return (name, self.max_rel_err[name])

    def lines(self) -> list[str]:
        out = []
        for name in sorted(self.max_rel_err):
            mark = "FLAGGED" if name in self.flagged else (
                "ok" if self.max_rel_err[name] < self.tol else "FAIL")
            out.append(f"{name:24s} max rel err {self.max_rel_err[name]:.3e}  {mark}")
        return out


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(f, store: ParamStore, step: float = 1e-4, tol: float = 1e-4,
               fault: tuple[str, int, float] | None = None) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` takes no arguments, reads parameters from ``store`` via
    ``Tape.param``, and returns the scalar loss tensor of a fresh tape.
    ``fault`` offsets one analytic gradient entry (flat index) before
    comparing — a hook for negative-control tests only.
    """
    report = GradCheckReport(step, tol)
    if len(store) == 0:
        return report

    store.zero_grads()
    loss = f()
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in store}
    if fault is not None:
        name, idx, delta = fault
        analytic[name].ravel()[idx] += delta

    for p in store:
        flat = p.data.ravel()
        g = analytic[p.name].ravel()
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = float(f().data)
            flat[i] = keep - step
            down = float(f().data)
            flat[i] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                report.flagged.append(p.name)
                worst = np.inf
                break
            fd = (up - down) / (2.0 * step)
            worst = max(worst, _rel_err(fd, g[i]))
        report.max_rel_err[p.name] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoint container (format documented in docs/formats.md)

_CKPT_MAGIC = b"GLCK"
_CKPT_VERSION = 1


def save_params(path: str, store: ParamStore) -> None:
    """Write the parameter container: little-endian f64 payloads with a
    version header, one record per named tensor."""
    chunks = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(store))]
    for name in sorted(store.names()):
        p = store[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(struct.pack("<d", p.lr_mult))
        chunks.append(p.data.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_params(path: str) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    store = ParamStore()
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        (lr_mult,) = struct.unpack_from("<d", blob, off)
        off += 8
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        store.add(name, data, lr_mult)
    return store


def atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
