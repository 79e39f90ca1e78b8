"""Hardware-constrained post-training quantization for small dataflow graphs."""
from .binding import EdgeChoice, SignatureMismatch, SimulatedGraph, Strategy, bind, bind_strategy
from .calibration import CalibrationStats, EdgeStats, collect_stats, estimate_threshold, round_pow2
from .fixedpoint import RequantParams, fixed_point_multiply, requantize_params
from .graph import DType, Edge, Graph, GraphBuilder, Node, edge_order, traversal_order, validate_graph
from .hwspec import HardwareSpec, Signature, classify_op, max_bits, parse_spec
from .interpreter import Dataset, eval_fp32, eval_int, top1_agreement
from .realize import choose_storage_dtype, realize, rewrite_clip
from .search import (CandidateEvaluator, SearchSpace, anneal_search, batched_evaluate,
                     build_search_space, evaluate_candidate, exhaustive_search, greedy_search,
                     random_search, space_size)
from .simulate import QParams, simulated_quantize
from .topology import Topology, generate_topology, insert_simulated_quantize

__version__ = "0.1.0"
