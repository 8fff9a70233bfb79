"""Acceptance gate: every criterion prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`.  The toy-task
thresholds (mIoU >= 0.80, lift >= 5 points) were calibrated from
3-seed pilot runs and pinned; the full-scale check runs one pinned
seed within its 30-minute budget.
"""

import os
import time

import numpy as np
import pytest
from scipy import ndimage

from conftest import random_confidences, random_graph, textured_image
from glstm.cli import main
from glstm.layers import (ADAPTIVE, IDENTICAL, run_layer, stack_layers,
                          update_node, zero_state)
from glstm.metrics import ConfusionMatrix, confusion, iou, prf1, report
from glstm.model import ParserConfig, init_params, parse
from glstm.numerics import Tensor
from glstm.schedule import (ConfidenceMap, UpdateSchedule, bfs_order,
                            cds_order, dfs_order)
from glstm.superpixel import slic
from glstm.toydata import gen_toy
from glstm.train import SgdConfig, evaluate, train_two_stage
from test_glstm import random_params, ref_layer, state_from
from test_metrics import brute_metrics

_4CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def _line(name: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


def test_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--d", "8", "--nodes", "12", "--layers", "2",
                 "--variant", "adaptive", "--seed", "0",
                 "--step", "1e-4", "--tol", "1e-4"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    worst = [ln for ln in out.splitlines() if ln.startswith("PASS")]
    with capsys.disabled():
        _line("gradient-fidelity",
              code == 0 and elapsed < 60.0,
              f"exit {code}, {elapsed:.1f}s; {worst[0] if worst else out}")


def test_transliteration_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(200):
        variant = ADAPTIVE if trial % 2 == 0 else IDENTICAL
        r = int(rng.integers(1, 7))
        d = int(rng.integers(1, 5))
        g = random_graph(rng, r)
        p, raw = random_params(rng, d, variant)
        feats = [rng.normal(size=d) for _ in range(r)]
        h0 = [rng.normal(size=d) for _ in range(r)]
        m0 = [rng.normal(size=d) for _ in range(r)]
        sched = UpdateSchedule(order=rng.permutation(r), scheme="cds")
        out = run_layer(g, [Tensor(v) for v in feats], state_from(h0, m0),
                        sched, p)
        want_h, want_m = ref_layer(g.adjacency, list(sched.order), feats,
                                   h0, m0, raw, variant)
        for i in range(r):
            worst = max(worst,
                        float(np.abs(out.h[i].data - want_h[i]).max()),
                        float(np.abs(out.m[i].data - want_m[i]).max()))
    _line("transliteration-oracle", worst < 1e-12,
          f"200 instances, both variants, max abs err {worst:.2e}")


def test_scheduler_properties():
    rng = np.random.default_rng(77)
    schedulers = [
        ("cds", lambda g, cm: cds_order(cm, g)),
        ("bfs-location", lambda g, cm: bfs_order(g, "location", cm)),
        ("bfs-confidence", lambda g, cm: bfs_order(g, "confidence", cm)),
        ("dfs-location", lambda g, cm: dfs_order(g, "location", cm)),
        ("dfs-confidence", lambda g, cm: dfs_order(g, "confidence", cm)),
    ]
    transforms = [lambda x: 3.0 * x + 0.5, np.exp, lambda x: x ** 3 + x]
    checked = 0
    for trial in range(1000):
        r = int(rng.integers(1, 30))
        g = random_graph(rng, r)
        cm = random_confidences(rng, r, int(rng.integers(2, 7)))
        name, fn = schedulers[trial % len(schedulers)]
        sched = fn(g, cm)
        assert sched.is_permutation_of(r), name
        if name == "cds":
            assigned = cm.assigned()
            aconf = cm.assigned_conf()
            fg = [aconf[i] for i in sched.order if assigned[i] != 0]
            assert all(a >= b for a, b in zip(fg, fg[1:]))
            f = transforms[trial % len(transforms)]
            warped = ConfidenceMap(scores=f(cm.scores), background=0)
            assert np.array_equal(cds_order(warped, g).order, sched.order)
        checked += 1
    _line("scheduler-properties", checked == 1000,
          "1000 graphs: permutations, CDS monotone block, "
          "argsort invariance")


def test_slic_invariants():
    rng = np.random.default_rng(11)
    ks = (16, 64, 200)
    t0 = time.perf_counter()
    for trial in range(200):
        k = ks[trial % 3]
        if trial % 2 == 0:
            img = textured_image(rng, 64, 64)
        else:
            from glstm.imgio import Image
            img = Image.from_array(rng.uniform(0, 1, (64, 64, 3)))
        sp = slic(img, k)
        counts = np.bincount(sp.labels.ravel(), minlength=sp.region_count)
        assert counts.min() > 0 and sp.labels.min() == 0
        assert sp.labels.max() == sp.region_count - 1
        assert 0.5 * k <= sp.region_count <= 1.5 * k, \
            f"k={k} gave R={sp.region_count}"
        for lid in range(sp.region_count):
            _, ncomp = ndimage.label(sp.labels == lid, structure=_4CONN)
            assert ncomp == 1
        if trial % 10 == 0:
            again = slic(img, k)
            assert np.array_equal(sp.labels, again.labels)
    _line("slic-invariants", True,
          f"200 images x k in {ks}: partition, 4-connectivity, "
          f"0.5k<=R<=1.5k, rerun determinism; {time.perf_counter()-t0:.0f}s")


# Pinned from 3-seed pilots (seeds 0/1/2, half-scale 100/30 then one
# full-scale confirmation): the binding direction is the lift.
TOY_MIOU_FLOOR = 0.80
TOY_LIFT_FLOOR = 0.05


@pytest.mark.slow
def test_toy_learning_lift():
    t0 = time.perf_counter()
    samples = gen_toy(0, 250)
    train, test = samples[:200], samples[200:]
    sgd = SgdConfig(lr_new=0.1, lr_pretrained=0.01, epochs_a=50,
                    epochs_b=40)
    base_cfg = ParserConfig(d=16, labels=7, superpixel_k=200,
                            compactness=30.0, layers=0, scheduler="cds")
    base_store, _ = train_two_stage(train, test, base_cfg, sgd, seed=0)
    _, base_miou, _ = evaluate(test, base_cfg, base_store)

    full_cfg = ParserConfig(d=16, labels=7, superpixel_k=200,
                            compactness=30.0, layers=2, scheduler="cds",
                            forget=ADAPTIVE, residual=True)
    full_store, history = train_two_stage(train, test, full_cfg, sgd, seed=0)
    _, full_miou, _ = evaluate(test, full_cfg, full_store)
    elapsed = time.perf_counter() - t0

    mean_regions = float(np.mean(
        [slic(s.image, 200, 30.0).region_count for s in test[:10]]))
    ok = (full_miou >= TOY_MIOU_FLOOR and
          full_miou - base_miou >= TOY_LIFT_FLOOR and
          elapsed <= 1800.0)
    _line("toy-learning-lift", ok,
          f"full {full_miou:.4f} vs head-only {base_miou:.4f} "
          f"(lift {100 * (full_miou - base_miou):.1f}pt, "
          f"~{mean_regions:.0f} superpixels, {elapsed / 60:.1f} min)")


@pytest.mark.slow
def test_ablation_machinery(tmp_path):
    t0 = time.perf_counter()
    small = """
d = 6
layers = 2
labels = 7
superpixel_k = 24
compactness = 30.0
lr_new = 0.05
lr_pretrained = 0.005
epochs_a = 2
epochs_b = 2
train_n = 4
val_n = 2
image_size = 32
parts = 6
"""
    cfg_small = tmp_path / "small.cfg"
    cfg_small.write_text(small)
    # the superpixel sweep mirrors the reported six counts; at 64x64 the
    # full grid {250..1500} is feasible as-is
    cfg_sweep = tmp_path / "sweep.cfg"
    cfg_sweep.write_text(small.replace("image_size = 32", "image_size = 64")
                         .replace("superpixel_k = 24", "superpixel_k = 200"))

    expected_rows = {"scheduler": ["cds", "bfs-location", "bfs-confidence",
                                   "dfs-location", "dfs-confidence"],
                     "forget": ["adaptive", "identical"],
                     "residual": ["residual-on", "residual-off"],
                     "superpixels": ["k250", "k500", "k750", "k1000",
                                     "k1250", "k1500"]}
    for which in ("scheduler", "forget", "residual", "superpixels"):
        out = tmp_path / which
        config = cfg_sweep if which == "superpixels" else cfg_small
        code = main(["ablate", "--which", which, "--config", str(config),
                     "--seeds", "0,1", "--out", str(out)])
        assert code == 0, which
        rows = (out / "comparison.csv").read_text().strip().split("\n")
        assert [r.split(",")[0] for r in rows[1:]] == expected_rows[which]
        assert rows[0] == "variant,miou_seed0,miou_seed1,miou_mean"
        assert (out / "comparison.svg").exists()

    # shared seeds: stage-A history of the forget pair is bit-equal
    runs = tmp_path / "forget" / "runs"
    for seed in (0, 1):
        a = (runs / f"adaptive-seed{seed}" / "history.csv").read_text()
        b = (runs / f"identical-seed{seed}" / "history.csv").read_text()
        rows_a = [r for r in a.strip().split("\n")[1:] if ",A," in r]
        rows_b = [r for r in b.strip().split("\n")[1:] if ",A," in r]
        assert rows_a == rows_b and rows_a
    _line("ablation-machinery", True,
          f"4 grids complete with shared seeds; forget pair shares "
          f"stage-A bit-exactly; {time.perf_counter()-t0:.0f}s")


def test_metrics_correctness():
    rng = np.random.default_rng(31)
    for _ in range(100):
        labels = int(rng.integers(2, 7))
        shape = (int(rng.integers(2, 12)), int(rng.integers(2, 12)))
        gt = rng.integers(0, labels, size=shape)
        pred = rng.integers(0, labels, size=shape)
        rep = report(confusion(pred, gt, labels))
        want = brute_metrics(pred, gt, labels)
        assert np.allclose(rep.per_class_iou, want["iou"], atol=1e-15)
        assert abs(rep.mean_iou - want["mean_iou"]) < 1e-15
        assert np.allclose(rep.precision, want["precision"], atol=1e-15)
        assert np.allclose(rep.recall, want["recall"], atol=1e-15)
        assert np.allclose(rep.f1, want["f1"], atol=1e-15)
        assert abs(rep.accuracy - want["accuracy"]) < 1e-15
        assert abs(rep.fg_accuracy - want["fg_accuracy"]) < 1e-15

    cm = ConfusionMatrix(np.array([[3, 1], [1, 3]]))
    per_class, mean = iou(cm)
    stats = prf1(cm)
    hand_ok = (np.allclose(per_class, [0.6, 0.6]) and
               abs(mean - 0.6) < 1e-15 and
               np.allclose(stats["precision"], [0.75, 0.75]) and
               np.allclose(stats["recall"], [0.75, 0.75]) and
               np.allclose(stats["f1"], [0.75, 0.75]))
    _line("metrics-correctness", hand_ok,
          "100 random instances match per-pixel recomputation exactly; "
          "hand case [[3,1],[1,3]] checked")


def test_degenerate_inputs():
    rng = np.random.default_rng(5)

    # single-region image through the full pipeline
    from glstm.imgio import Image
    flat = Image.from_array(np.full((16, 16, 3), 0.42))
    cfg = ParserConfig(d=4, labels=3, superpixel_k=1, layers=2)
    store = init_params(cfg, seed=0)
    out = parse(flat, cfg, store)
    assert out.superpixels.region_count == 1
    assert np.unique(out.label_map).size == 1

    # single-node graph through every scheduler and a layer pass
    g1 = random_graph(rng, 1)
    cm1 = random_confidences(rng, 1, 3)
    for sched in (cds_order(cm1, g1), bfs_order(g1, "location", cm1),
                  dfs_order(g1, "confidence", cm1)):
        assert list(sched.order) == [0]
    p, _ = random_params(rng, 4)
    state = run_layer(g1, [Tensor(rng.normal(size=4))], zero_state(1, 4),
                      cds_order(cm1, g1), p)
    assert state.flags.all_set()

    # zero-parameter network: exact zero fixed point
    from test_glstm import zero_params
    g = random_graph(rng, 5)
    sched = UpdateSchedule(order=np.arange(5), scheme="cds")
    hidden = stack_layers(g, [Tensor(np.zeros(4)) for _ in range(5)],
                          [zero_params(4), zero_params(4)], sched,
                          residual=False)
    assert all(np.array_equal(h.data, np.zeros(4)) for h in hidden)

    # zero-neighbor node: adaptive and identical agree for any params
    iso = random_graph(rng, 1)
    for _ in range(5):
        seed = int(rng.integers(0, 2 ** 31))
        pa, _ = random_params(np.random.default_rng(seed), 3, ADAPTIVE)
        pi, _ = random_params(np.random.default_rng(seed), 3, IDENTICAL)
        h0 = [rng.normal(size=3)]
        m0 = [rng.normal(size=3)]
        f = Tensor(rng.normal(size=3))
        ha, _ = update_node(0, f, iso, state_from(h0, m0), pa)
        hi, _ = update_node(0, f, iso, state_from(h0, m0), pi)
        assert np.array_equal(ha.data, hi.data)

    _line("degenerate-inputs", True,
          "single-region image, single-node graph, zero parameters, "
          "zero-neighbor nodes all run with the stated invariants")
