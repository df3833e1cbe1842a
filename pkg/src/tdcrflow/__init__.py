"""Action-conditioned flow matching for tendon-driven continuum robot shapes.

Predicts the settled 3D point-cloud shape of a multi-module tendon robot from
motor commands (and optionally a tip payload) by integrating a learned
conditional velocity field from a Gaussian prior to the data distribution.
"""

import os as _os

# Honor the thread cap before any BLAS-backed import happens.
_threads = _os.environ.get("TDCRFLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import DatasetBundle, build_bundle, read_bundle, write_bundle
from .errors import ContractViolation, FormatError, NumericError
from .flow import (FlowBatch, TrainConfig, TrainResult, fm_loss,
                   heun_integrate, interpolate, make_flow_batch, sample_prior,
                   sample_shape, sample_time, train)
from .metrics import (MetricsReport, chamfer, emd_approx, emd_exact, evaluate)
from .nets import (ARCHITECTURES, VelocityHybrid, VelocityMLP, make_net,
                   net_from_meta)
from .pointcloud import (NormalizationStats, PointCloud, denormalize_points,
                         load_ply, load_xyz, normalize_condition,
                         normalize_points, resample_to_count, save_ply,
                         save_xyz, stats_from_training_data, voxel_downsample)
from .robot import (ModuleArc, RobotSpec, apply_payload, arcs_to_backbone,
                    generate_dataset, motors_to_arcs, sample_surface, settle,
                    split_indices, tip_position, workspace_projection)

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "ContractViolation", "DatasetBundle", "FlowBatch",
    "FormatError", "MetricsReport", "ModuleArc", "NormalizationStats",
    "NumericError", "PointCloud", "RobotSpec", "TrainConfig", "TrainResult",
    "VelocityHybrid", "VelocityMLP", "apply_payload", "arcs_to_backbone",
    "build_bundle", "chamfer", "denormalize_points", "emd_approx", "emd_exact",
    "evaluate", "fm_loss", "generate_dataset", "heun_integrate", "interpolate",
    "load_checkpoint", "load_ply", "load_xyz", "make_flow_batch", "make_net",
    "motors_to_arcs", "net_from_meta", "normalize_condition",
    "normalize_points", "read_bundle", "resample_to_count", "sample_prior",
    "sample_shape", "sample_surface", "sample_time", "save_checkpoint",
    "save_ply", "save_xyz", "settle", "split_indices",
    "stats_from_training_data", "tip_position", "train", "voxel_downsample",
    "workspace_projection", "write_bundle",
]
