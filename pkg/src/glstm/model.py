"""End-to-end parser: pixel frontend, confidence head, Graph LSTM stack,
and final per-node classifier.

The frontend is a learnable affine map of the 5-vector
(c1, c2, c3, x/W, y/H) per pixel; pooled per-region features feed the
Graph LSTM stack, while the confidence head only steers node
scheduling.  Every prediction is constant within a superpixel: the
label map broadcasts each region's argmax logits to its pixels.

Two confidence paths exist.  The default applies the head to pooled
region features (affine then softmax per node).  With
``per_pixel_head`` the head runs on every pixel, softmax is taken per
pixel, and the resulting confidences are averaged within each region —
the two differ only in where the softmax sits relative to pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .graph import NodeGraph, build_graph
from .imgio import Image
from .layers import (ADAPTIVE, VARIANTS, GlstmParams, init_layer_params,
                     params_from_store, stack_layers)
from .numerics import ParamStore, Tape, Tensor
from .schedule import (SCHEMES, ConfidenceMap, UpdateSchedule, make_schedule,
                       node_confidences)
from .superpixel import SuperpixelMap, pool_matrix, slic

FRONTEND_IN = 5


@dataclass
class ParserConfig:
    d: int = 16
    layers: int = 2
    labels: int = 7
    background: int = 0
    superpixel_k: int = 200
    compactness: float = 10.0
    slic_iters: int = 10
    scheduler: str = "cds"
    forget: str = ADAPTIVE
    residual: bool = True
    per_pixel_head: bool = False
    cds_label: int | None = None
    neighbor_gate_uses_new: bool = False

    def validate(self) -> None:
        if self.labels < 2:
            raise ValueError("need at least 2 labels (background + 1)")
        if self.d < 1:
            raise ValueError("embedding dimension must be positive")
        if self.layers < 0:
            raise ValueError("layer count must be non-negative")
        if not 0 <= self.background < self.labels:
            raise ValueError("background label out of range")
        if self.scheduler not in SCHEMES:
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.forget not in VARIANTS:
            raise ValueError(f"unknown forget-gate variant {self.forget!r}")


@dataclass
class ParseOutput:
    node_logits: Tensor          # (R, L)
    label_map: np.ndarray        # (H, W)
    schedule: UpdateSchedule
    confidences: ConfidenceMap
    superpixels: SuperpixelMap
    graph: NodeGraph


def init_params(cfg: ParserConfig, seed: int) -> ParamStore:
    """Fresh parameters: Gaussian (sigma 0.001) affine layers, uniform
    [-0.1, 0.1] Graph LSTM weights, zero biases on the affine layers.
    Separate seed streams per component keep early stages reproducible
    regardless of later-stage configuration."""
    ss = np.random.SeedSequence(seed).spawn(4)
    rng_front = np.random.default_rng(ss[0])
    rng_head = np.random.default_rng(ss[1])
    rng_cls = np.random.default_rng(ss[2])
    rng_glstm = np.random.default_rng(ss[3])

    store = ParamStore()
    store.add("frontend.W", rng_front.normal(0.0, 1e-3,
                                             size=(FRONTEND_IN, cfg.d)))
    store.add("frontend.b", np.zeros(cfg.d))
    store.add("head.W", rng_head.normal(0.0, 1e-3, size=(cfg.d, cfg.labels)))
    store.add("head.b", np.zeros(cfg.labels))
    for t in range(cfg.layers):
        init_layer_params(store, t, cfg.d, rng_glstm)
    store.add("classifier.W", rng_cls.normal(0.0, 1e-3,
                                             size=(cfg.d, cfg.labels)))
    store.add("classifier.b", np.zeros(cfg.labels))
    return store


STAGE_A_PARAMS = ("frontend.W", "frontend.b", "head.W", "head.b")


def _p(store: ParamStore, name: str, tape: Tape | None) -> Tensor:
    return Tensor(store[name].data) if tape is None else tape.param(store, name)


def pixel_inputs(img: Image) -> np.ndarray:
    """(H*W, 5) rows of (c1, c2, c3, x/W, y/H); grayscale replicates
    its channel."""
    rgb = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    xs = np.tile(np.arange(img.width) / img.width, img.height)
    ys = np.repeat(np.arange(img.height) / img.height, img.width)
    return np.column_stack([rgb.reshape(-1, 3), xs, ys])


def embed_frontend(img: Image, store: ParamStore,
                   tape: Tape | None = None) -> Tensor:
    """Per-pixel feature field as an (H*W, d) matrix."""
    x5 = Tensor(pixel_inputs(img))
    return nm.add_bias(nm.matmul(x5, _p(store, "frontend.W", tape)),
                       _p(store, "frontend.b", tape))


def head_logits(feats: Tensor, store: ParamStore,
                tape: Tape | None = None) -> Tensor:
    """Affine d->L head applied to rows (pixels or pooled regions)."""
    return nm.add_bias(nm.matmul(feats, _p(store, "head.W", tape)),
                       _p(store, "head.b", tape))


def confidence_head(node_feats: list[Tensor], store: ParamStore,
                    background: int = 0) -> ConfidenceMap:
    """The per-node fast path: affine map then softmax per node."""
    if not node_feats:
        raise ValueError("confidence head needs at least one node")
    logits = head_logits(nm.stack_rows(node_feats), store)
    return ConfidenceMap(scores=nm.softmax_rows(logits).data,
                         background=background)


def pixel_confidence_map(feat_field: Tensor, store: ParamStore,
                         sp: SuperpixelMap,
                         background: int = 0) -> ConfidenceMap:
    """The literal path: per-pixel softmax confidences averaged within
    each region."""
    scores = nm.softmax_rows(head_logits(Tensor(feat_field.data), store))
    return node_confidences(scores.data, sp, background)


def classifier_logits(hidden: list[Tensor], store: ParamStore,
                      tape: Tape | None = None) -> Tensor:
    return nm.add_bias(nm.matmul(nm.stack_rows(hidden),
                                 _p(store, "classifier.W", tape)),
                       _p(store, "classifier.b", tape))


def parse(img: Image, cfg: ParserConfig, store: ParamStore,
          sp: SuperpixelMap | None = None,
          tape: Tape | None = None) -> ParseOutput:
    """Full pipeline: superpixels, pooling, graph, schedule, Graph LSTM
    stack, classifier, and region-constant label broadcast.  Passing a
    tape makes ``node_logits`` differentiable end to end (scheduling
    decisions themselves are discrete and carry no gradient)."""
    cfg.validate()
    if sp is None:
        sp = slic(img, cfg.superpixel_k, cfg.compactness, cfg.slic_iters)

    feats = embed_frontend(img, store, tape)
    pooled = pool_matrix(feats, sp)
    node_feats = [nm.row(pooled, i) for i in range(sp.region_count)]
    g = build_graph(sp, node_feats)

    if cfg.per_pixel_head:
        cm = pixel_confidence_map(feats, store, sp, cfg.background)
    else:
        cm = confidence_head([Tensor(f.data) for f in node_feats], store,
                             cfg.background)
    sched = make_schedule(cfg.scheduler, cm, g, cfg.cds_label)

    if cfg.layers == 0:
        node_logits = head_logits(pooled, store, tape)
    else:
        layer_params = [params_from_store(
            store, t, cfg.forget, tape,
            neighbor_gate_uses_new=cfg.neighbor_gate_uses_new)
            for t in range(cfg.layers)]
        hidden = stack_layers(g, node_feats, layer_params, sched,
                              residual=cfg.residual)
        node_logits = classifier_logits(hidden, store, tape)

    region_label = np.argmax(node_logits.data, axis=1)
    label_map = region_label[sp.labels]
    return ParseOutput(node_logits=node_logits, label_map=label_map,
                       schedule=sched, confidences=cm, superpixels=sp,
                       graph=g)


def superpixel_smooth(pixel_conf: np.ndarray, sp: SuperpixelMap) -> np.ndarray:
    """Average per-pixel scores within each region and broadcast the
    region argmax back to its pixels (ties to the smaller label)."""
    conf = np.asarray(pixel_conf, dtype=np.float64)
    if conf.ndim == 3:
        conf = conf.reshape(-1, conf.shape[-1])
    if conf.shape[0] != sp.width * sp.height:
        raise ValueError("confidence rows do not match the pixel count")
    seg = sp.labels.ravel()
    counts = np.bincount(seg, minlength=sp.region_count)
    means = np.empty((sp.region_count, conf.shape[1]))
    for j in range(conf.shape[1]):
        means[:, j] = np.bincount(seg, weights=conf[:, j],
                                  minlength=sp.region_count)
    means /= counts[:, None]
    return np.argmax(means, axis=1)[sp.labels]
