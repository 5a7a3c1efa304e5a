"""Graphical residual flows: DAG-structured invertible residual networks."""

from .graphs import DagGraph, GraphError, InvertedGraph, TopoOrder, invert_for_inference, parse_graph, render_graph, topo_sort
from .masks import MaskSet, UnitLabel, assign_labels, build_masks, conditional_masks, masks_for_graph
from .autodiff import Tape, Tensor2
from .activations import ActivationTriple, lipmish, lipmish_triple
from .flow import (
    ResidualBlock,
    ResidualFlow,
    build_density_flow,
    build_inference_flow,
    block_forward,
    flow_forward,
    load_checkpoint,
    log_prob,
    log_prob_np,
    save_checkpoint,
    spectral_normalize,
)
from .inversion import InversionConfig, InversionReport, banach_invert_block, grid_search_inversion, invert_flow, newton_invert_block
from .datasets import DatasetBundle, gen_arithmetic_circuit, gen_tree, load_csv
from .training import AdamState, TrainConfig, lr_schedule, train

__version__ = "0.1.0"
