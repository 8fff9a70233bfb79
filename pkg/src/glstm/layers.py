"""The Graph LSTM cell and layer over a region-adjacency graph.

One layer pass updates every node once, in schedule order.  A node's
gates mix its own input feature, its own previous hidden state, and
the mean hidden state of its neighbors, where already-updated
neighbors contribute their fresh states and the rest contribute their
previous ones (tracked by visit flags).  The memory update comes in
two variants:

* ``adaptive`` — one forget gate per neighbor, computed from the
  node's input feature and that neighbor's hidden state through a
  shared weight matrix; neighbor memories enter the update through
  these gates, averaged over the neighborhood.
* ``identical`` — a single forget gate (which instead absorbs the
  neighbor-mean hidden state); neighbor memories are dropped.

Both share every weight matrix across nodes.  Layers stack with
element-wise residual inputs: layer t+1 consumes layer t's input plus
its hidden output, and treats layer t's output states as the previous
states in its own update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ContractError
from .graph import NodeGraph, VisitFlags
from .numerics import ParamStore, Tape, Tensor
from .schedule import UpdateSchedule

ADAPTIVE = "adaptive"
IDENTICAL = "identical"
VARIANTS = (ADAPTIVE, IDENTICAL)

MAT_NAMES = ("Wu", "Wf", "Wc", "Wo",
             "Uu", "Uf", "Uc", "Uo",
             "Uun", "Ufn", "Ucn", "Uon")
VEC_NAMES = ("bu", "bf", "bc", "bo")


@dataclass
class GlstmParams:
    """All gate weights of one layer, square in the layer dimension d.

    W* act on the node's input feature, U* on its own hidden state,
    U*n on neighbor-derived hidden states; b* are the biases.  The
    ``identical`` variant reuses the same tensors with the alternative
    forget-gate wiring.  ``neighbor_gate_uses_new`` switches the
    per-neighbor forget gates to read updated hidden states for
    visited neighbors instead of the previous-step states.
    """

    Wu: Tensor; Wf: Tensor; Wc: Tensor; Wo: Tensor
    Uu: Tensor; Uf: Tensor; Uc: Tensor; Uo: Tensor
    Uun: Tensor; Ufn: Tensor; Ucn: Tensor; Uon: Tensor
    bu: Tensor; bf: Tensor; bc: Tensor; bo: Tensor
    variant: str = ADAPTIVE
    neighbor_gate_uses_new: bool = False
    _UfnT: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        d = self.Wu.data.shape[0]
        for name in MAT_NAMES:
            if getattr(self, name).data.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")
        for name in VEC_NAMES:
            if getattr(self, name).data.shape != (d,):
                raise ValueError(f"{name} must have length {d}")

    @property
    def dim(self) -> int:
        return self.Wu.data.shape[0]

    def UfnT(self) -> Tensor:
        # shared across node updates within one tape
        if self._UfnT is None:
            self._UfnT = nm.transpose(self.Ufn)
        return self._UfnT


def init_layer_params(store: ParamStore, layer: int, d: int,
                      rng: np.random.Generator) -> None:
    """Register one layer's tensors, uniform on [-0.1, 0.1]."""
    for name in MAT_NAMES:
        store.add(f"layer{layer}.{name}", rng.uniform(-0.1, 0.1, size=(d, d)))
    for name in VEC_NAMES:
        store.add(f"layer{layer}.{name}", rng.uniform(-0.1, 0.1, size=d))


def params_from_store(store: ParamStore, layer: int, variant: str = ADAPTIVE,
                      tape: Tape | None = None,
                      neighbor_gate_uses_new: bool = False) -> GlstmParams:
    def get(name: str) -> Tensor:
        full = f"layer{layer}.{name}"
        if tape is None:
            return Tensor(store[full].data)
        return tape.param(store, full)

    kw = {name: get(name) for name in MAT_NAMES + VEC_NAMES}
    return GlstmParams(variant=variant,
                       neighbor_gate_uses_new=neighbor_gate_uses_new, **kw)


@dataclass
class LayerState:
    """Working state of one layer pass.

    ``h``/``m`` start as the previous states and are overwritten node
    by node, so an entry is the fresh state exactly when its visit
    flag is set.  ``h_in``/``m_in`` keep the untouched layer-entry
    states for the gate terms that always read previous-step values.
    """

    h: list[Tensor]
    m: list[Tensor]
    flags: VisitFlags
    h_in: tuple[Tensor, ...] = ()
    m_in: tuple[Tensor, ...] = ()

    @classmethod
    def begin(cls, prev_h, prev_m) -> "LayerState":
        if len(prev_h) != len(prev_m):
            raise ContractError("hidden and memory tables differ in length")
        return cls(h=list(prev_h), m=list(prev_m),
                   flags=VisitFlags(len(prev_h)),
                   h_in=tuple(prev_h), m_in=tuple(prev_m))


def zero_state(r: int, d: int) -> LayerState:
    zeros = [Tensor(np.zeros(d)) for _ in range(r)]
    return LayerState.begin(zeros, list(zeros))


def avg_neighbor_hidden(i: int, g: NodeGraph, prev_h, new_h,
                        flags: VisitFlags) -> Tensor:
    """Mean hidden state over the neighbors of node i, taking the fresh
    state for visited neighbors and the previous one otherwise.
    Zero-neighbor nodes get the zero vector (the mean is undefined).
    Iteration follows ascending ids so the result is bit-stable under
    adjacency-list permutations."""
    nbrs = sorted(g.adjacency[i])
    if not nbrs:
        return nm.zeros_like(prev_h[i])
    vecs = [new_h[j] if flags.visited[j] else prev_h[j] for j in nbrs]
    return nm.mean_of(vecs)


def update_node(i: int, f_i: Tensor, g: NodeGraph, state: LayerState,
                p: GlstmParams) -> tuple[Tensor, Tensor]:
    """Update node i in place: compute its gates and new states, write
    them into the state tables, and set its visit flag."""
    if state.flags.visited[i]:
        raise ContractError(f"node {i} already updated this pass")
    nbrs = sorted(g.adjacency[i])
    h_self = state.h[i]
    m_self = state.m[i]
    hbar = avg_neighbor_hidden(i, g, state.h_in, state.h, state.flags)

    wf_f = nm.matvec(p.Wf, f_i)
    g_u = nm.sigmoid(nm.add(nm.add(nm.matvec(p.Wu, f_i), nm.matvec(p.Uu, h_self)),
                            nm.add(nm.matvec(p.Uun, hbar), p.bu)))
    g_o = nm.sigmoid(nm.add(nm.add(nm.matvec(p.Wo, f_i), nm.matvec(p.Uo, h_self)),
                            nm.add(nm.matvec(p.Uon, hbar), p.bo)))
    g_c = nm.tanh(nm.add(nm.add(nm.matvec(p.Wc, f_i), nm.matvec(p.Uc, h_self)),
                         nm.add(nm.matvec(p.Ucn, hbar), p.bc)))

    own = None
    if p.variant == IDENTICAL:
        g_f = nm.sigmoid(nm.add(nm.add(wf_f, nm.matvec(p.Uf, h_self)),
                                nm.add(nm.matvec(p.Ufn, hbar), p.bf)))
    else:
        g_f = nm.sigmoid(nm.add(nm.add(wf_f, nm.matvec(p.Uf, h_self)), p.bf))
        if nbrs:
            gate_h = state.h if p.neighbor_gate_uses_new else state.h_in
            hn = nm.stack_rows([gate_h[j] for j in nbrs])
            gates = nm.sigmoid(nm.add_bias(nm.matmul(hn, p.UfnT()),
                                           nm.add(wf_f, p.bf)))
            mn = nm.stack_rows([state.m[j] for j in nbrs])
            own = nm.mean_rows(nm.mul(gates, mn))

    m_new = nm.add(nm.mul(g_f, m_self), nm.mul(g_u, g_c))
    if own is not None:
        m_new = nm.add(own, m_new)
    h_new = nm.tanh(nm.mul(g_o, m_new))

    state.h[i] = h_new
    state.m[i] = m_new
    state.flags.mark(i)
    return h_new, m_new


def run_layer(g: NodeGraph, inputs: list[Tensor], prev: LayerState,
              sched: UpdateSchedule, p: GlstmParams) -> LayerState:
    """Apply ``update_node`` to every node in schedule order."""
    if not sched.is_permutation_of(g.node_count):
        raise ContractError("schedule is not a permutation of the graph nodes")
    if len(inputs) != g.node_count:
        raise ContractError("one input vector per node is required")
    state = LayerState.begin(prev.h, prev.m)
    for i in sched.order:
        update_node(int(i), inputs[int(i)], g, state, p)
    return state


def stack_layers(g: NodeGraph, node_inputs: list[Tensor],
                 layers: list[GlstmParams], sched: UpdateSchedule,
                 residual: bool = True) -> list[Tensor]:
    """Run stacked layers and return the final per-node feature stream.

    Layer 1 starts from zero hidden/memory states and consumes
    ``node_inputs``.  With residual connections on, each layer's
    stream output is its input plus its hidden output (element-wise),
    and that stream feeds the next layer and is what this function
    returns; with residual off the stream is the bare hidden output.
    Output states of each layer become the previous states of the
    next.  (With all-zero parameters the hidden states vanish and the
    residual stream hands ``node_inputs`` through unchanged.)
    """
    if not layers:
        return list(node_inputs)
    d = layers[0].dim
    for p in layers:
        if p.dim != d:
            raise ContractError("stacked layers must share one dimension")
    if node_inputs and node_inputs[0].data.shape != (d,):
        raise ContractError(f"node inputs must be vectors of length {d}")

    state = zero_state(g.node_count, d)
    stream = list(node_inputs)
    for p in layers:
        state = run_layer(g, stream, state, sched, p)
        if residual:
            stream = [nm.add(x, h) for x, h in zip(stream, state.h)]
        else:
            stream = list(state.h)
    return stream
