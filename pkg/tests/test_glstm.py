import numpy as np
import pytest

from conftest import random_graph
from glstm.errors import ContractError
from glstm.graph import NodeGraph
from glstm.layers import (ADAPTIVE, IDENTICAL, MAT_NAMES, VEC_NAMES,
                          GlstmParams, LayerState, avg_neighbor_hidden,
                          init_layer_params, params_from_store, run_layer,
                          stack_layers, update_node, zero_state)
from glstm.numerics import ParamStore, Tape, Tensor, backward, total
from glstm.schedule import UpdateSchedule

# ---------------------------------------------------------------------------
# Independent transliteration oracle: a line-by-line numpy rendering of
# the gate/state update rules, sharing no code with the library.


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def ref_layer(adj, order, feats, h0, m0, P, variant, gate_new=False,
              residual_inputs=None):
    r = len(adj)
    h_in = [np.array(v) for v in h0]
    m_in = [np.array(v) for v in m0]
    h = [np.array(v) for v in h0]
    m = [np.array(v) for v in m0]
    q = [False] * r
    for i in order:
        nbrs = sorted(adj[i])
        n = len(nbrs)
        d = h_in[i].shape[0]
        if n:
            hbar = np.zeros(d)
            for j in nbrs:
                hbar = hbar + (h[j] if q[j] else h_in[j])
            hbar = hbar / n
        else:
            hbar = np.zeros(d)
        f_i = feats[i]
        gu = _sig(P["Wu"] @ f_i + P["Uu"] @ h_in[i] + P["Uun"] @ hbar + P["bu"])
        go = _sig(P["Wo"] @ f_i + P["Uo"] @ h_in[i] + P["Uon"] @ hbar + P["bo"])
        gc = np.tanh(P["Wc"] @ f_i + P["Uc"] @ h_in[i] + P["Ucn"] @ hbar
                     + P["bc"])
        if variant == "identical":
            gf = _sig(P["Wf"] @ f_i + P["Uf"] @ h_in[i] + P["Ufn"] @ hbar
                      + P["bf"])
            m_new = gf * m_in[i] + gu * gc
        else:
            gf = _sig(P["Wf"] @ f_i + P["Uf"] @ h_in[i] + P["bf"])
            acc = np.zeros(d)
            for j in nbrs:
                hj = (h[j] if q[j] else h_in[j]) if gate_new else h_in[j]
                gbar = _sig(P["Wf"] @ f_i + P["Ufn"] @ hj + P["bf"])
                acc = acc + gbar * (m[j] if q[j] else m_in[j])
            m_new = (acc / n if n else acc) + gf * m_in[i] + gu * gc
        h_new = np.tanh(go * m_new)
        h[i] = h_new
        m[i] = m_new
        q[i] = True
    return h, m


def ref_stack(adj, order, feats, p_list, variant, residual=True):
    r = len(adj)
    d = feats[0].shape[0]
    h = [np.zeros(d)] * r
    m = [np.zeros(d)] * r
    stream = [np.array(v) for v in feats]
    for P in p_list:
        h, m = ref_layer(adj, order, stream, h, m, P, variant)
        if residual:
            stream = [x + hh for x, hh in zip(stream, h)]
        else:
            stream = [np.array(hh) for hh in h]
    return stream


# ---------------------------------------------------------------------------
# builders


def random_params(rng, d, variant=ADAPTIVE, scale=1.0, **kw):
    raw = {name: rng.uniform(-scale, scale, size=(d, d))
           for name in MAT_NAMES}
    raw.update({name: rng.uniform(-scale, scale, size=d)
                for name in VEC_NAMES})
    tensors = {name: Tensor(v) for name, v in raw.items()}
    return GlstmParams(variant=variant, **tensors, **kw), raw


def zero_params(d, variant=ADAPTIVE):
    tensors = {name: Tensor(np.zeros((d, d))) for name in MAT_NAMES}
    tensors.update({name: Tensor(np.zeros(d)) for name in VEC_NAMES})
    return GlstmParams(variant=variant, **tensors)


def state_from(h_rows, m_rows):
    return LayerState.begin([Tensor(v) for v in h_rows],
                            [Tensor(v) for v in m_rows])


def perm(rng, r):
    return UpdateSchedule(order=rng.permutation(r), scheme="cds")


# ---------------------------------------------------------------------------
# avg_neighbor_hidden


def test_avg_single_unvisited_neighbor():
    g = NodeGraph(adjacency=[(1,), (0,)], centroids=np.zeros((2, 2)))
    state = state_from([np.zeros(3), np.array([1.0, 2.0, 3.0])],
                       [np.zeros(3)] * 2)
    out = avg_neighbor_hidden(0, g, state.h_in, state.h, state.flags)
    assert np.array_equal(out.data, [1.0, 2.0, 3.0])


def test_avg_mixes_visited_and_unvisited():
    g = NodeGraph(adjacency=[(1, 2), (0,), (0,)], centroids=np.zeros((3, 2)))
    prev = [np.zeros(2), np.array([4.0, 0.0]), np.array([0.0, 2.0])]
    state = state_from(prev, [np.zeros(2)] * 3)
    state.h[1] = Tensor(np.array([8.0, 8.0]))   # freshly updated value
    state.flags.mark(1)
    out = avg_neighbor_hidden(0, g, state.h_in, state.h, state.flags)
    assert np.array_equal(out.data, [(8.0 + 0.0) / 2, (8.0 + 2.0) / 2])


def test_avg_zero_neighbors_gives_zero():
    g = NodeGraph(adjacency=[()], centroids=np.zeros((1, 2)))
    state = state_from([np.array([5.0, 5.0])], [np.zeros(2)])
    out = avg_neighbor_hidden(0, g, state.h_in, state.h, state.flags)
    assert np.array_equal(out.data, [0.0, 0.0])


def test_avg_matches_direct_summation(rng):
    g = NodeGraph(adjacency=[tuple(range(1, 6))] + [(0,)] * 5,
                  centroids=np.zeros((6, 2)))
    prev = [rng.normal(size=4) for _ in range(6)]
    new = [rng.normal(size=4) for _ in range(6)]
    state = state_from(prev, [np.zeros(4)] * 6)
    for j in (2, 4):
        state.h[j] = Tensor(new[j])
        state.flags.mark(j)
    out = avg_neighbor_hidden(0, g, state.h_in, state.h, state.flags)
    direct = np.zeros(4)
    for j in range(1, 6):
        direct += new[j] if j in (2, 4) else prev[j]
    assert np.allclose(out.data, direct / 5, atol=1e-15)


# ---------------------------------------------------------------------------
# update_node


def test_zero_everything_gives_zero_states():
    g = NodeGraph(adjacency=[(1,), (0,)], centroids=np.zeros((2, 2)))
    state = state_from([np.zeros(3)] * 2, [np.zeros(3)] * 2)
    h, m = update_node(0, Tensor(np.zeros(3)), g, state, zero_params(3))
    assert np.array_equal(h.data, np.zeros(3))
    assert np.array_equal(m.data, np.zeros(3))
    assert state.flags.visited[0]


def test_zero_params_halve_self_memory():
    # forget and input gates sit at sigmoid(0)=0.5 with zero parameters
    g = NodeGraph(adjacency=[()], centroids=np.zeros((1, 2)))
    m_self = np.array([1.0, -2.0])
    state = state_from([np.zeros(2)], [m_self])
    h, m = update_node(0, Tensor(np.zeros(2)), g, state, zero_params(2))
    assert np.allclose(m.data, 0.5 * m_self, atol=1e-15)
    assert np.allclose(h.data, np.tanh(0.5 * m.data), atol=1e-15)


def test_isolated_node_variants_agree(rng):
    g = NodeGraph(adjacency=[()], centroids=np.zeros((1, 2)))
    for _ in range(10):
        seed = int(rng.integers(0, 2 ** 31))
        pr = np.random.default_rng(seed)
        pa, _ = random_params(pr, 3, ADAPTIVE)
        pr = np.random.default_rng(seed)
        pi, _ = random_params(pr, 3, IDENTICAL)
        h0 = [rng.normal(size=3)]
        m0 = [rng.normal(size=3)]
        f = Tensor(rng.normal(size=3))
        sa = state_from(h0, m0)
        ha, ma = update_node(0, f, g, sa, pa)
        si = state_from(h0, m0)
        hi, mi = update_node(0, f, g, si, pi)
        # zero neighbors: the neighbor sum vanishes and hbar is zero, so
        # both variants reduce to gf*m + gu*gc
        assert np.array_equal(ha.data, hi.data)
        assert np.array_equal(ma.data, mi.data)


def test_update_matches_transliteration(rng):
    for variant in (ADAPTIVE, IDENTICAL):
        g = random_graph(rng, 4)
        p, raw = random_params(rng, 3, variant)
        feats = [rng.normal(size=3) for _ in range(4)]
        h0 = [rng.normal(size=3) for _ in range(4)]
        m0 = [rng.normal(size=3) for _ in range(4)]
        order = list(rng.permutation(4))
        state = state_from(h0, m0)
        for i in order:
            update_node(int(i), Tensor(feats[int(i)]), g, state, p)
        want_h, want_m = ref_layer(g.adjacency, order, feats, h0, m0, raw,
                                   variant)
        for i in range(4):
            assert np.allclose(state.h[i].data, want_h[i], atol=1e-12)
            assert np.allclose(state.m[i].data, want_m[i], atol=1e-12)


def test_neighbor_gate_uses_new_switch(rng):
    g = random_graph(rng, 5)
    p, raw = random_params(rng, 3, ADAPTIVE, neighbor_gate_uses_new=True)
    feats = [rng.normal(size=3) for _ in range(5)]
    h0 = [rng.normal(size=3) for _ in range(5)]
    m0 = [rng.normal(size=3) for _ in range(5)]
    order = list(rng.permutation(5))
    state = state_from(h0, m0)
    for i in order:
        update_node(int(i), Tensor(feats[int(i)]), g, state, p)
    want_h, _ = ref_layer(g.adjacency, order, feats, h0, m0, raw, ADAPTIVE,
                          gate_new=True)
    for i in range(5):
        assert np.allclose(state.h[i].data, want_h[i], atol=1e-12)


def test_adaptive_gates_collapse_when_neighbors_agree(rng):
    # identical neighbor hidden states force identical per-neighbor
    # gates: the neighbor memory term becomes gate * mean(memory)
    g = NodeGraph(adjacency=[(1, 2, 3)] + [(0,)] * 3,
                  centroids=np.zeros((4, 2)))
    p, raw = random_params(rng, 3, ADAPTIVE)
    shared_h = rng.normal(size=3)
    h0 = [rng.normal(size=3)] + [shared_h.copy() for _ in range(3)]
    m0 = [rng.normal(size=3) for _ in range(4)]
    f = rng.normal(size=3)
    state = state_from(h0, m0)
    _, m_new = update_node(0, Tensor(f), g, state, p)
    gate = _sig(raw["Wf"] @ f + raw["Ufn"] @ shared_h + raw["bf"])
    hbar = shared_h
    gu = _sig(raw["Wu"] @ f + raw["Uu"] @ h0[0] + raw["Uun"] @ hbar
              + raw["bu"])
    gc = np.tanh(raw["Wc"] @ f + raw["Uc"] @ h0[0] + raw["Ucn"] @ hbar
                 + raw["bc"])
    gf = _sig(raw["Wf"] @ f + raw["Uf"] @ h0[0] + raw["bf"])
    want = gate * np.mean(m0[1:], axis=0) + gf * m0[0] + gu * gc
    assert np.allclose(m_new.data, want, atol=1e-12)


def test_update_rejects_revisit(rng):
    g = random_graph(rng, 3)
    p, _ = random_params(rng, 2)
    state = state_from([np.zeros(2)] * 3, [np.zeros(2)] * 3)
    update_node(0, Tensor(np.zeros(2)), g, state, p)
    with pytest.raises(ContractError):
        update_node(0, Tensor(np.zeros(2)), g, state, p)


def test_dimension_mismatch_raises(rng):
    g = random_graph(rng, 2)
    p, _ = random_params(rng, 3)
    state = state_from([np.zeros(3)] * 2, [np.zeros(3)] * 2)
    with pytest.raises(ValueError):
        update_node(0, Tensor(np.zeros(4)), g, state, p)


# ---------------------------------------------------------------------------
# run_layer


def test_run_layer_single_node_equals_update(rng):
    g = NodeGraph(adjacency=[()], centroids=np.zeros((1, 2)))
    p, _ = random_params(rng, 3)
    f = Tensor(rng.normal(size=3))
    prev = state_from([rng.normal(size=3)], [rng.normal(size=3)])
    out = run_layer(g, [f], prev, UpdateSchedule(order=[0], scheme="cds"), p)
    again = state_from([v.data for v in prev.h_in],
                       [v.data for v in prev.m_in])
    h, m = update_node(0, f, g, again, p)
    assert np.array_equal(out.h[0].data, h.data)
    assert np.array_equal(out.m[0].data, m.data)


def test_run_layer_zero_params_zero_output(rng):
    g = random_graph(rng, 5)
    prev = zero_state(5, 3)
    inputs = [Tensor(np.zeros(3)) for _ in range(5)]
    out = run_layer(g, inputs, prev, perm(rng, 5), zero_params(3))
    for i in range(5):
        assert np.array_equal(out.h[i].data, np.zeros(3))
        assert np.array_equal(out.m[i].data, np.zeros(3))
    assert out.flags.all_set()


def test_run_layer_matches_transliteration(rng):
    for variant in (ADAPTIVE, IDENTICAL):
        g = random_graph(rng, 5)
        p, raw = random_params(rng, 3, variant)
        feats = [rng.normal(size=3) for _ in range(5)]
        h0 = [rng.normal(size=3) for _ in range(5)]
        m0 = [rng.normal(size=3) for _ in range(5)]
        sched = perm(rng, 5)
        out = run_layer(g, [Tensor(v) for v in feats], state_from(h0, m0),
                        sched, p)
        want_h, want_m = ref_layer(g.adjacency, list(sched.order), feats,
                                   h0, m0, raw, variant)
        for i in range(5):
            assert np.allclose(out.h[i].data, want_h[i], atol=1e-12)
            assert np.allclose(out.m[i].data, want_m[i], atol=1e-12)


def test_run_layer_rejects_non_permutation(rng):
    g = random_graph(rng, 3)
    p, _ = random_params(rng, 2)
    prev = zero_state(3, 2)
    bad = UpdateSchedule(order=[0, 0, 2], scheme="cds")
    with pytest.raises(ContractError):
        run_layer(g, [Tensor(np.zeros(2))] * 3, prev, bad, p)


def test_hidden_range_strictly_inside_unit(rng):
    for _ in range(10):
        r = int(rng.integers(1, 9))
        g = random_graph(rng, r)
        p, _ = random_params(rng, 4, scale=0.1)
        inputs = [Tensor(rng.normal(size=4)) for _ in range(r)]
        prev = state_from([rng.uniform(-0.9, 0.9, 4) for _ in range(r)],
                          [rng.normal(size=4) for _ in range(r)])
        out = run_layer(g, inputs, prev, perm(rng, r), p)
        for h in out.h:
            assert (np.abs(h.data) < 1.0).all()


def test_neighbor_permutation_bit_invariance(rng):
    r = 6
    g = random_graph(rng, r)
    p, _ = random_params(rng, 3)
    feats = [rng.normal(size=3) for _ in range(r)]
    h0 = [rng.normal(size=3) for _ in range(r)]
    m0 = [rng.normal(size=3) for _ in range(r)]
    sched = perm(rng, r)
    out1 = run_layer(g, [Tensor(v) for v in feats], state_from(h0, m0),
                     sched, p)
    shuffled = NodeGraph(
        adjacency=[tuple(rng.permutation(nb)) for nb in g.adjacency],
        centroids=g.centroids)
    out2 = run_layer(shuffled, [Tensor(v) for v in feats],
                     state_from(h0, m0), sched, p)
    for a, b in zip(out1.h, out2.h):
        assert np.array_equal(a.data, b.data)
    for a, b in zip(out1.m, out2.m):
        assert np.array_equal(a.data, b.data)


def test_visited_predecessors_drive_update(rng):
    # node i's update must read fresh states for exactly the nodes
    # scheduled before it: changing a successor's input leaves i alone
    r = 4
    g = NodeGraph(adjacency=[(1, 2, 3)] + [(0,)] * 3,
                  centroids=np.zeros((4, 2)))
    p, _ = random_params(rng, 2)
    sched = UpdateSchedule(order=[1, 0, 2, 3], scheme="cds")
    h0 = [rng.normal(size=2) for _ in range(r)]
    m0 = [rng.normal(size=2) for _ in range(r)]
    base = [rng.normal(size=2) for _ in range(r)]
    out1 = run_layer(g, [Tensor(v) for v in base], state_from(h0, m0),
                     sched, p)
    bumped = [v.copy() for v in base]
    bumped[2] = bumped[2] + 1.0      # node 2 updates after node 0
    out2 = run_layer(g, [Tensor(v) for v in bumped], state_from(h0, m0),
                     sched, p)
    assert np.array_equal(out1.h[0].data, out2.h[0].data)
    bumped_pre = [v.copy() for v in base]
    bumped_pre[1] = bumped_pre[1] + 1.0   # node 1 updates before node 0
    out3 = run_layer(g, [Tensor(v) for v in bumped_pre],
                     state_from(h0, m0), sched, p)
    assert not np.array_equal(out1.h[0].data, out3.h[0].data)


# ---------------------------------------------------------------------------
# stack_layers


def test_single_layer_residual_off_is_run_layer(rng):
    r = 4
    g = random_graph(rng, r)
    p, _ = random_params(rng, 3)
    feats = [rng.normal(size=3) for _ in range(r)]
    sched = perm(rng, r)
    stacked = stack_layers(g, [Tensor(v) for v in feats], [p], sched,
                           residual=False)
    direct = run_layer(g, [Tensor(v) for v in feats], zero_state(r, 3),
                       sched, p)
    for a, b in zip(stacked, direct.h):
        assert np.array_equal(a.data, b.data)


def test_zero_param_stack_passes_inputs_through(rng):
    r = 5
    g = random_graph(rng, r)
    feats = [rng.normal(size=3) for _ in range(r)]
    sched = perm(rng, r)
    out = stack_layers(g, [Tensor(v) for v in feats],
                       [zero_params(3), zero_params(3)], sched,
                       residual=True)
    # zero fixed point: hidden is zero, so the residual stream returns
    # the node inputs unchanged
    for a, want in zip(out, feats):
        assert np.array_equal(a.data, want)


def test_two_layer_stack_matches_transliteration(rng):
    for variant in (ADAPTIVE, IDENTICAL):
        for residual in (True, False):
            r = 6
            g = random_graph(rng, r)
            p1, raw1 = random_params(rng, 3, variant)
            p2, raw2 = random_params(rng, 3, variant)
            feats = [rng.normal(size=3) for _ in range(r)]
            sched = perm(rng, r)
            out = stack_layers(g, [Tensor(v) for v in feats], [p1, p2],
                               sched, residual=residual)
            want = ref_stack(g.adjacency, list(sched.order), feats,
                             [raw1, raw2], variant, residual=residual)
            for a, b in zip(out, want):
                assert np.allclose(a.data, b, atol=1e-12)


def test_stack_is_differentiable_end_to_end(rng):
    r, d = 4, 3
    g = random_graph(rng, r)
    store = ParamStore()
    init_layer_params(store, 0, d, rng)
    feats = [rng.normal(size=d) for _ in range(r)]
    sched = perm(rng, r)
    tape = Tape()
    p = params_from_store(store, 0, ADAPTIVE, tape)
    out = stack_layers(g, [Tensor(v) for v in feats], [p], sched)
    backward(total(out[0]))
    got = sum(float(np.abs(q.grad).sum()) for q in store)
    assert got > 0.0


def test_params_from_store_checkpoint_names(rng):
    store = ParamStore()
    init_layer_params(store, 1, 4, rng)
    assert "layer1.Wu" in store and "layer1.bf" in store and \
        "layer1.Ufn" in store
    p = params_from_store(store, 1, IDENTICAL)
    assert p.variant == IDENTICAL
    assert np.array_equal(p.Ucn.data, store["layer1.Ucn"].data)
    for name in MAT_NAMES + VEC_NAMES:
        arr = store[f"layer1.{name}"].data
        assert np.abs(arr).max() <= 0.1
