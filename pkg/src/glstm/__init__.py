"""Graph LSTM over superpixel region-adjacency graphs.

Library layout:
    numerics    f64 tensors, reverse-mode tape, gradient checking,
                parameter checkpoints
    imgio       PPM/PGM images
    superpixel  SLIC over-segmentation, feature pooling
    graph       region-adjacency graph and visit flags
    schedule    confidence-driven / BFS / DFS node orderings
    layers      the Graph LSTM cell, layer, and residual stack
    model       end-to-end parser pipeline and its config
    toydata     synthetic articulated-figure dataset
    train       two-stage SGD training and evaluation
    metrics     confusion matrix, IoU, precision/recall/F-1
    cli         command-line driver (``glstm`` entry point)
"""

from .graph import NodeGraph, VisitFlags, build_graph, neighbors
from .imgio import Image, read_image, write_image
from .layers import (ADAPTIVE, IDENTICAL, GlstmParams, LayerState,
                     avg_neighbor_hidden, run_layer, stack_layers,
                     update_node)
from .metrics import ConfusionMatrix, confusion, iou, prf1
from .model import ParseOutput, ParserConfig, parse, superpixel_smooth
from .numerics import (ParamStore, Tape, Tensor, backward, grad_check,
                       load_params, save_params)
from .schedule import (ConfidenceMap, UpdateSchedule, bfs_order, cds_order,
                       dfs_order, node_confidences)
from .superpixel import (SuperpixelMap, pool_features, quantization_oracle,
                         slic)
from .toydata import ToySample, gen_toy
from .train import SgdConfig, loss, train_two_stage

__version__ = "0.1.0"
