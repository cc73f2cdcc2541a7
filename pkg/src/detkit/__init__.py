"""Post-network tooling for large-vocabulary object detection."""

from .boxes import BBox, area, ioa, ioa_matrix, iou, iou_matrix
from .data import Detection, DetectionSet, GroundTruthBox, GroundTruthSet
from .hierarchy import CategoryHierarchy, HierarchyError, expand_hierarchy
from .nms import NmsConfig, apply_nms, nms_adj, nms_naive, nms_soft
from .evaluation import EvalConfig, EvalReport, average_precision, evaluate, match_image_category
from .ensemble import (ClassWeightTable, VotingConfig, cascade_fuse, fuse, naive_ensemble,
                       pfdet_reweight, vote_group, vote_pool)
from .autoensemble import (EnsemblePlan, Leaf, Merge, MergeParams, SearchConfig, auto_ensemble,
                           execute_plan, search_architecture, search_operators)
from .rescore import CooccurrenceModel, build_cooccurrence, rescore, rescore_image
from .classtools import (AnchorSet, ClassifierWeights, SamplingPlan, ScaleDistribution,
                         build_sampling_plan, cosine_similarity, kmeans_anchors, sample_crop_scale,
                         select_expert_categories)
from .dhops import CmlParams, RoiSpec, cml_cls, cml_reg, dhpool_cls, dhpool_reg, roi_avg_pool

__version__ = "0.1.0"
