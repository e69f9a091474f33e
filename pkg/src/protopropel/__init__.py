"""Prototype-guarded class-incremental segmentation of 3D point clouds with pseudo-label refinement."""

from .cil import Arm, CilReport, SplitPlan, make_split, run_ablation, run_cil
from .cloud import KnnIndex, PointCloud, SceneSpec, build_knn_index, generate_scene, load_cloud, save_cloud
from .config import RunConfig, parse_config
from .evaluation import ConfusionMatrix, miou, overlap_degree
from .features import GeometricFeatures, SemanticFeatures
from .network import Network, TrainConfig
from .propel import PropelConfig, PropelSegmenter, bald_uncertainty, propagate_pseudo_labels
from .protoguard import ModelConfig, ProtoGuardSegmenter, load_model, save_model
from .validation import IGNORE

__version__ = "0.1.0"

__all__ = [
    "Arm",
    "CilReport",
    "ConfusionMatrix",
    "GeometricFeatures",
    "IGNORE",
    "KnnIndex",
    "ModelConfig",
    "Network",
    "PointCloud",
    "PropelConfig",
    "PropelSegmenter",
    "ProtoGuardSegmenter",
    "RunConfig",
    "SceneSpec",
    "SemanticFeatures",
    "SplitPlan",
    "TrainConfig",
    "bald_uncertainty",
    "build_knn_index",
    "generate_scene",
    "load_cloud",
    "load_model",
    "make_split",
    "miou",
    "overlap_degree",
    "parse_config",
    "propagate_pseudo_labels",
    "run_ablation",
    "run_cil",
    "save_cloud",
    "save_model",
]
