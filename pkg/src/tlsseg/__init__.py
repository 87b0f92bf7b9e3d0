"""Multi-view projection-based instance segmentation for terrestrial laser scans."""

from ._validation import EmptyImageError, FormatError, ParameterError, PoseError
from .config import PipelineConfig, load_config
from .evaluation import (EvalReport, MatchResult, ReferenceSet, compute_metrics, compute_usr, evaluate,
                         load_references, match_instances, merge_predictions_nms)
from .fusion import FusionGraph, MultiViewFusion, build_graph, merge_cluster_instances
from .hcs import HCSClustering, hcs_cluster
from .instances import Instance, InstanceSet, PartialInstance, load_instances, save_instances
from .label_transfer import (PseudoLabeler, SphereSample, augment_sphere, instance_majority_reset,
                             refine_majority_vote, sample_spheres, transfer_labels)
from .masks import InstanceMask2D, MaskSet, filter_masks, load_masks, save_masks
from .obb import OBB, compute_obb, obb_iou
from .projection import (ProjectionParams, SphericalImage, SphericalProjector, backproject_mask, lanczos_resample,
                         project_station)
from .scan_io import PointCloud, ScanStation, load_scans, merge_clouds, statistical_outlier_filter, voxel_downsample

__version__ = "0.1.0"
