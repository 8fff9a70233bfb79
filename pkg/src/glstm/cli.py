"""Command-line driver.

Subcommands: ``superpixels`` (segment an image), ``inspect`` (dump the
region graph), ``train`` / ``eval`` (two-stage training and dataset
evaluation), ``ablate`` (variant grids with shared seeds), and
``gradcheck`` (finite-difference verification of the full stack).

Every run writes a ``manifest.json`` capturing the command, config
snapshot, seeds, and wall-clock timings; primary outputs are written
atomically and are byte-identical across reruns of the same manifest
(plots carry no timestamps).  Exit codes: 0 success, 1 check failure,
2 usage/config error.  ``GLSTM_THREADS`` caps ablation workers.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import (build_configs, dump_configs, load_configs,
                     parse_config_text)
from .errors import ConfigError
from .graph import build_graph, mean_degree, save_node_features, \
    write_edge_list
from .imgio import read_image, write_pgm_labels
from .layers import init_layer_params, params_from_store, stack_layers
from .metrics import confusion, report, report_csv, report_table
from .model import parse
from .numerics import (ParamStore, Tape, Tensor, atomic_write_bytes,
                       atomic_write_text, grad_check, load_params,
                       save_params)
from .schedule import UpdateSchedule
from .superpixel import pool_matrix, slic, write_boundary_overlay, write_map
from .toydata import gen_toy, load_dataset, save_dataset
from .train import evaluate, history_csv, train_two_stage
from . import numerics as nm

SUPERPIXEL_GRID = (250, 500, 750, 1000, 1250, 1500)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_manifest(outdir: str, command: str, argv: list[str],
                    config: dict, seeds: list[int],
                    timings: dict[str, float]) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seeds": seeds,
        "output_dir": os.path.abspath(outdir),
        "git_describe": _git_describe(),
        "timings_sec": {k: round(v, 3) for k, v in timings.items()},
    }
    atomic_write_text(os.path.join(outdir, "manifest.json"),
                      json.dumps(manifest, indent=2) + "\n")


def _save_plot(path: str, fig) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    atomic_write_bytes(path, buf.getvalue())


def _plot_series(path: str, xs, ys, xlabel: str, ylabel: str,
                 title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "glstm"
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    positions = range(len(xs))
    ax.plot(positions, ys, marker="o")
    ax.set_xticks(list(positions))
    ax.set_xticklabels([str(x) for x in xs], rotation=20)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    _save_plot(path, fig)
    plt.close(fig)


# ---------------------------------------------------------------------------
# superpixels / inspect


def cmd_superpixels(args) -> int:
    t0 = time.perf_counter()
    try:
        img = read_image(args.image)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read {args.image}: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    sp = slic(img, args.k, args.compactness, args.iters, args.seed)
    write_map(os.path.join(args.out, "superpixels.spm"), sp)
    write_boundary_overlay(os.path.join(args.out, "overlay.ppm"), img, sp)
    feats = [Tensor(np.zeros(1)) for _ in range(sp.region_count)]
    g = build_graph(sp, feats)
    print(f"regions: {sp.region_count}")
    print(f"mean degree: {mean_degree(g):.3f}")
    _write_manifest(args.out, "superpixels", sys.argv[1:],
                    {"image": args.image, "k": args.k,
                     "compactness": args.compactness, "iters": args.iters},
                    [args.seed], {"total": time.perf_counter() - t0})
    return 0


def cmd_inspect(args) -> int:
    t0 = time.perf_counter()
    try:
        img = read_image(args.image)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read {args.image}: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    sp = slic(img, args.k, args.compactness, args.iters, args.seed)
    from .model import pixel_inputs
    feats = pool_matrix(Tensor(pixel_inputs(img)), sp)
    g = build_graph(sp, [nm.row(feats, i) for i in range(sp.region_count)])
    write_edge_list(os.path.join(args.out, "edges.txt"), g)
    save_node_features(os.path.join(args.out, "features.ckpt"), g)
    print(f"regions: {sp.region_count}")
    print(f"edges: {sum(len(nb) for nb in g.adjacency) // 2}")
    print(f"mean degree: {mean_degree(g):.3f}")
    _write_manifest(args.out, "inspect", sys.argv[1:],
                    {"image": args.image, "k": args.k}, [args.seed],
                    {"total": time.perf_counter() - t0})
    return 0


# ---------------------------------------------------------------------------
# train / eval


def _load_config_file(path: str):
    try:
        return load_configs(path)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return None
    except ConfigError as exc:
        print("error: bad config:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return None


def _make_dataset(data_cfg, seed: int):
    total = data_cfg.train_n + data_cfg.val_n
    size = (data_cfg.image_size, data_cfg.image_size)
    samples = gen_toy(seed, total, size=size, parts=data_cfg.parts,
                      noise_sigma=data_cfg.noise_sigma)
    return samples[:data_cfg.train_n], samples[data_cfg.train_n:]


def cmd_train(args) -> int:
    loaded = _load_config_file(args.config)
    if loaded is None:
        return 2
    cfg, sgd, data_cfg = loaded
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    train_data, val_data = _make_dataset(data_cfg, args.seed)
    data_dir = os.path.join(args.out, f"data-seed{args.seed}")
    save_dataset(os.path.join(data_dir, "train"), train_data)
    save_dataset(os.path.join(data_dir, "val"), val_data)
    t_data = time.perf_counter()

    def log(row):
        print(f"epoch {row.epoch:3d} [{row.stage}]  "
              f"train {row.train_loss:.4f}  val {row.val_loss:.4f}  "
              f"mIoU {row.val_miou:.4f}")

    store, history = train_two_stage(train_data, val_data, cfg, sgd,
                                     args.seed, log=log)
    t_train = time.perf_counter()
    save_params(os.path.join(args.out, "model.ckpt"), store)
    atomic_write_text(os.path.join(args.out, "model.cfg"),
                      dump_configs(cfg, sgd, data_cfg))
    atomic_write_text(os.path.join(args.out, "history.csv"),
                      history_csv(history))
    _write_manifest(args.out, "train", sys.argv[1:],
                    {"config": dump_configs(cfg, sgd, data_cfg)},
                    [args.seed],
                    {"dataset": t_data - t0, "train": t_train - t_data,
                     "total": time.perf_counter() - t0})
    if history:
        print(f"final val mIoU: {history[-1].val_miou:.4f}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    config_path = args.config or os.path.splitext(args.checkpoint)[0] + ".cfg"
    loaded = _load_config_file(config_path)
    if loaded is None:
        return 2
    cfg, sgd, data_cfg = loaded
    try:
        store = load_params(args.checkpoint)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read checkpoint: {exc}", file=sys.stderr)
        return 2
    try:
        samples = load_dataset(args.data)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read dataset: {exc}", file=sys.stderr)
        return 2
    if not samples:
        print(f"error: no samples under {args.data}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    pred_dir = os.path.join(args.out, "pred")
    os.makedirs(pred_dir, exist_ok=True)

    cm_total = None
    for i, s in enumerate(samples):
        out = parse(s.image, cfg, store)
        write_pgm_labels(os.path.join(pred_dir, f"{i:04d}.pgm"),
                         out.label_map)
        if args.dump_logits:
            dump = ParamStore()
            dump.add("logits", out.node_logits.data)
            save_params(os.path.join(pred_dir, f"{i:04d}.logits.ckpt"), dump)
        cm = confusion(out.label_map, s.gt, cfg.labels)
        cm_total = cm if cm_total is None else cm_total + cm
    rep = report(cm_total, cfg.background)
    atomic_write_text(os.path.join(args.out, "metrics.csv"), report_csv(rep))
    table = report_table(rep)
    atomic_write_text(os.path.join(args.out, "metrics.txt"), table)
    print(table, end="")
    _write_manifest(args.out, "eval", sys.argv[1:],
                    {"checkpoint": args.checkpoint, "data": args.data},
                    [], {"total": time.perf_counter() - t0})
    return 0


# ---------------------------------------------------------------------------
# ablation grids


def _ablate_run(job) -> dict:
    """One training run of an ablation grid (top level for pickling)."""
    variant_name, overrides, config_text, seed, outdir = job
    cfg, sgd, data_cfg = build_configs(parse_config_text(config_text))
    for key, value in overrides.items():
        setattr(cfg, key, value)
    train_data, val_data = _make_dataset(data_cfg, seed)
    store, history = train_two_stage(train_data, val_data, cfg, sgd, seed)
    _, miou, val_loss = (evaluate(val_data, cfg, store)
                         if val_data else (None, float("nan"), float("nan")))
    os.makedirs(outdir, exist_ok=True)
    save_params(os.path.join(outdir, "model.ckpt"), store)
    atomic_write_text(os.path.join(outdir, "model.cfg"),
                      dump_configs(cfg, sgd, data_cfg))
    atomic_write_text(os.path.join(outdir, "history.csv"),
                      history_csv(history))
    return {"variant": variant_name, "seed": seed, "miou": miou,
            "val_loss": val_loss, "outdir": outdir}


def _ablation_grid(which: str, k_grid: list[int]) -> list[tuple[str, dict]]:
    if which == "scheduler":
        return [(s, {"scheduler": s}) for s in
                ("cds", "bfs-location", "bfs-confidence",
                 "dfs-location", "dfs-confidence")]
    if which == "forget":
        return [("adaptive", {"forget": "adaptive"}),
                ("identical", {"forget": "identical"})]
    if which == "superpixels":
        return [(f"k{k}", {"superpixel_k": k}) for k in k_grid]
    if which == "residual":
        return [("residual-on", {"residual": True}),
                ("residual-off", {"residual": False})]
    raise ValueError(f"unknown ablation {which!r}")


def cmd_ablate(args) -> int:
    loaded = _load_config_file(args.config)
    if loaded is None:
        return 2
    try:
        grid = _ablation_grid(args.which, args.k_grid)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    seeds = args.seeds
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    with open(args.config, "r", encoding="utf-8") as fh:
        config_text = fh.read()

    jobs = []
    for name, overrides in grid:
        for seed in seeds:
            outdir = os.path.join(args.out, "runs", f"{name}-seed{seed}")
            jobs.append((name, overrides, config_text, seed, outdir))
    workers = int(os.environ.get("GLSTM_THREADS", os.cpu_count() or 1))
    workers = max(1, min(workers, len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_run, jobs))
    else:
        results = [_ablate_run(job) for job in jobs]

    by_variant = {name: [] for name, _ in grid}
    for res in results:
        by_variant[res["variant"]].append(res)

    lines = ["variant," + ",".join(f"miou_seed{s}" for s in seeds)
             + ",miou_mean"]
    means = []
    for name, _ in grid:
        runs = sorted(by_variant[name], key=lambda r: seeds.index(r["seed"]))
        vals = [r["miou"] for r in runs]
        mean = float(np.mean(vals))
        means.append(mean)
        lines.append(f"{name}," + ",".join(f"{v:.6f}" for v in vals)
                     + f",{mean:.6f}")
    table = "\n".join(lines) + "\n"
    atomic_write_text(os.path.join(args.out, "comparison.csv"), table)
    print(table, end="")
    _plot_series(os.path.join(args.out, "comparison.svg"),
                 [name for name, _ in grid], means,
                 args.which, "val mIoU", f"{args.which} ablation")
    _write_manifest(args.out, "ablate", sys.argv[1:],
                    {"which": args.which, "config": config_text,
                     "k_grid": args.k_grid}, seeds,
                    {"total": time.perf_counter() - t0})
    return 0


# ---------------------------------------------------------------------------
# gradient check


def _random_graph(r: int, rng: np.random.Generator):
    """Random connected graph: a random tree plus a few extra edges."""
    from .graph import NodeGraph
    adjacency = [set() for _ in range(r)]
    for i in range(1, r):
        j = int(rng.integers(0, i))
        adjacency[i].add(j)
        adjacency[j].add(i)
    for _ in range(max(0, r // 2)):
        i, j = (int(v) for v in rng.integers(0, r, size=2))
        if i != j:
            adjacency[i].add(j)
            adjacency[j].add(i)
    centroids = rng.uniform(0.0, 100.0, size=(r, 2))
    return NodeGraph(adjacency=[tuple(sorted(nb)) for nb in adjacency],
                     centroids=centroids)


def cmd_gradcheck(args) -> int:
    if args.d > 16 or args.nodes > 20:
        print("error: gradcheck is limited to d <= 16 and nodes <= 20 "
              "(finite differences cost one forward pass per entry)",
              file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    rng = np.random.default_rng(args.seed)
    g = _random_graph(args.nodes, rng)
    inputs = [rng.uniform(-1.0, 1.0, size=args.d) for _ in range(args.nodes)]
    readout = [rng.uniform(-1.0, 1.0, size=args.d) for _ in range(args.nodes)]
    sched = UpdateSchedule(order=rng.permutation(args.nodes),
                           scheme="cds")
    store = ParamStore()
    for t in range(args.layers):
        init_layer_params(store, t, args.d, rng)

    def f():
        tape = Tape()
        layer_params = [params_from_store(store, t, args.variant, tape)
                        for t in range(args.layers)]
        hidden = stack_layers(g, [Tensor(v) for v in inputs], layer_params,
                              sched)
        picked = nm.mul(nm.stack_rows(hidden),
                        Tensor(np.stack(readout)))
        return nm.total(picked)

    fault = None
    if os.environ.get("GLSTM_GRADCHECK_CORRUPT"):
        fault = (sorted(store.names())[0], 0, 1e-2)
    rep = grad_check(f, store, step=args.step, tol=args.tol, fault=fault)
    for line in rep.lines():
        print(line)
    worst_name, worst_err = rep.worst()
    elapsed = time.perf_counter() - t0
    if rep.passed:
        print(f"PASS: {len(store)} parameter tensors within tol {args.tol:g} "
              f"(worst {worst_name} at {worst_err:.3e}, {elapsed:.1f}s)")
        return 0
    print(f"FAIL: worst parameter {worst_name} at rel err {worst_err:.3e} "
          f"(tol {args.tol:g})")
    return 1


# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="glstm",
        description="Graph LSTM over superpixel region-adjacency graphs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("superpixels", help="segment an image with SLIC")
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_superpixels)

    p = sub.add_parser("inspect", help="dump the region-adjacency graph")
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="two-stage training on the toy task")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None,
                   help="config path (default: sidecar .cfg of checkpoint)")
    p.add_argument("--dump-logits", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a variant grid with shared seeds")
    p.add_argument("--which", required=True,
                   choices=("scheduler", "forget", "superpixels", "residual"))
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--k-grid", type=_int_list,
                   default=list(SUPERPIXEL_GRID),
                   help="superpixel counts for --which superpixels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full stack")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--nodes", type=int, default=12)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--variant", default="adaptive",
                   choices=("adaptive", "identical"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
