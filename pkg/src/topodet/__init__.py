"""Anchor-constrained open-world object detection at desk scale.

Fixed per-class feature centroids ("semantic anchors") pin down the geometry
of a learned feature space while classes arrive incrementally; instances that
belong to no known class are routed to a dedicated `unknown` anchor. The
package provides the trainable head, the incremental task protocol with
exemplar replay and topology-stabilizing finetuning, the open-world metric
suite (mAP@IoU, absorption count, wilderness impact), a synthetic Gaussian
benchmark, and a CLI that exports metrics CSVs, feature dumps, and figures.
"""

from .config import ExperimentConfig, load_config
from .dataset import AnnotatedInstance, make_toy_benchmark
from .metrics import (Detection, GroundTruth, MetricsRecord, compute_aose,
                      compute_map, compute_wi)
from .model import ForwardTrace, LossWeights, ModelParams, forward, total_loss
from .openworld import Proposal, ensemble_predict, iou, select_unknown_proposals
from .protocol import (DetectorState, ExemplarStore, TaskSchedule,
                       evaluate_time_point, finetune_stabilize, init_detector,
                       run_task, update_exemplars)
from .topology import (SemanticAnchor, SemanticTopology,
                       generate_random_anchors, load_anchors)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedInstance", "Detection", "DetectorState", "ExemplarStore",
    "ExperimentConfig", "ForwardTrace", "GroundTruth", "LossWeights",
    "MetricsRecord", "ModelParams", "Proposal", "SemanticAnchor",
    "SemanticTopology", "TaskSchedule", "compute_aose", "compute_map",
    "compute_wi", "ensemble_predict", "evaluate_time_point",
    "finetune_stabilize", "forward", "generate_random_anchors",
    "init_detector", "iou", "load_anchors", "load_config",
    "make_toy_benchmark", "run_task", "select_unknown_proposals",
    "total_loss", "update_exemplars",
]
