"""bpdo: arbitrary-shape text detection at desk scale.

A numpy library implementing the full pipeline: supervision-map generation
from polygons, text-aware attention fusion, boundary proposals from a
binarized distance map, iterative boundary-point refinement by deformable
attention, the scheduled multi-objective loss, synthetic training data, and
a detection-metrics harness. A thin CLI (``bpdo``) ties the stages together.
"""

from .autodiff import (
    GradCheckReport,
    LinearParams,
    Tensor,
    activation,
    bilinear_sample,
    grad_check,
    linear_apply,
)
from .dom import DomParams, deformable_attention, dom_optimize, dom_step, init_dom_params
from .errors import (
    BpdoError,
    ConfigError,
    DegenerateComponentError,
    FitAbortError,
    FormatError,
    GenerationError,
    InvalidInputError,
    ParseError,
)
from .evalharness import EvalReport, boundary_error, evaluate
from .fields import TensorField
from .geometry import (
    BinaryMask,
    BoundaryPoints,
    Polygon,
    connected_components,
    distance_transform,
    point_to_nearest_boundary,
    polygon_iou,
    rasterize,
    resample_polygon,
    trace_boundary,
)
from .losses import LossReport, LossWeights, cls_loss, dir_loss, dis_loss, pm_loss, total_loss
from .pipeline import Checkpoint, PipelineConfig, detect_scene, fit
from .priors import PriorMaps, binarize_distance, make_prior_maps
from .proposal import ProposalConfig, extract_proposals
from .tam import TamParams, channel_attention, init_tam_params, position_attention, tam_forward

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "LinearParams",
    "GradCheckReport",
    "TensorField",
    "activation",
    "bilinear_sample",
    "linear_apply",
    "grad_check",
    "Polygon",
    "BoundaryPoints",
    "BinaryMask",
    "resample_polygon",
    "distance_transform",
    "connected_components",
    "trace_boundary",
    "rasterize",
    "polygon_iou",
    "point_to_nearest_boundary",
    "PriorMaps",
    "make_prior_maps",
    "binarize_distance",
    "TamParams",
    "init_tam_params",
    "channel_attention",
    "position_attention",
    "tam_forward",
    "ProposalConfig",
    "extract_proposals",
    "DomParams",
    "init_dom_params",
    "deformable_attention",
    "dom_step",
    "dom_optimize",
    "LossWeights",
    "LossReport",
    "cls_loss",
    "dis_loss",
    "dir_loss",
    "pm_loss",
    "total_loss",
    "EvalReport",
    "evaluate",
    "boundary_error",
    "PipelineConfig",
    "Checkpoint",
    "fit",
    "detect_scene",
    "BpdoError",
    "InvalidInputError",
    "ParseError",
    "FormatError",
    "GenerationError",
    "DegenerateComponentError",
    "ConfigError",
    "FitAbortError",
]
