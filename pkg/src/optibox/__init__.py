"""Query-guided box grounding and refinement on a synthetic oracle benchmark.

Two cooperating models: a grounding stage scores region proposals against an
encoded query and picks one, and a refinement stage nudges the picked box
toward the referent using a query-conditioned summary of a global feature
map. Everything trains with the small reverse-mode engine in ``diffcore``.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataFormatError,
    EmptyQueryError,
    InvalidBoxError,
    MissingAssetError,
    NumericalError,
    OptiboxError,
    OutOfBoundsError,
)
from .geometry import (
    Box,
    BoxOffset,
    best_target_proposal,
    clip_box,
    decode_offset,
    encode_offset,
    image_bounds,
    iou,
    pairwise_iou,
    union_box,
)
from .diffcore import Tape, Tensor, backward, grad_check
from .textenc import Vocabulary, encode_tokens, pretrain_autoencoder, pretrain_projections
from .grounder import GrounderModel, GroundingOutput, ground, init_grounder
from .refinement import FeatureMask, NO_MASK, RefinerModel, init_refiner, refine_box
from .dataio import Query, SampleRecord, load_dataset, write_dataset
from .synthdata import SceneConfig, generate_dataset, generate_scene, split_annotations
from .evalkit import MetricsReport, accuracy_at_iou, evaluate, proposal_upper_bound
from .train import (
    TrainConfig,
    TrainHistory,
    build_regression_pairs,
    grid_search,
    train_grounder,
    train_optibox,
    train_optibox_independent,
)

__all__ = [
    "__version__",
    "Box",
    "BoxOffset",
    "ConfigError",
    "DataFormatError",
    "EmptyQueryError",
    "FeatureMask",
    "GrounderModel",
    "GroundingOutput",
    "InvalidBoxError",
    "MetricsReport",
    "MissingAssetError",
    "NO_MASK",
    "NumericalError",
    "OptiboxError",
    "OutOfBoundsError",
    "Query",
    "RefinerModel",
    "SampleRecord",
    "SceneConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "Vocabulary",
    "accuracy_at_iou",
    "backward",
    "best_target_proposal",
    "build_regression_pairs",
    "clip_box",
    "decode_offset",
    "encode_offset",
    "encode_tokens",
    "evaluate",
    "generate_dataset",
    "generate_scene",
    "grad_check",
    "grid_search",
    "ground",
    "image_bounds",
    "init_grounder",
    "init_refiner",
    "iou",
    "load_dataset",
    "pairwise_iou",
    "pretrain_autoencoder",
    "pretrain_projections",
    "proposal_upper_bound",
    "refine_box",
    "split_annotations",
    "train_grounder",
    "train_optibox",
    "train_optibox_independent",
    "union_box",
    "write_dataset",
]
