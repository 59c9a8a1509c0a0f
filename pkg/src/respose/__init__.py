"""Resolution-aware 3D body pose, shape, and texture estimation on a
synthetic, fully deterministic benchmark."""

from .backbone import BackboneConfig, GatedBackbone, IterativeRegressor, PoseNet, select_range
from .body_model import (
    BodyModelDefinition,
    BodyParams,
    canonicalize_theta,
    forward_kinematics,
    joints3d,
    load_model,
    make_synthetic_model,
    rodrigues,
    save_model,
    smpl_forward,
)
from .dataset import DatasetManifest, SyntheticDataset, generate_dataset
from .errors import (
    AlignmentDegenerateError,
    CheckpointError,
    ConfigError,
    DegenerateGeometryError,
    GenerationError,
    InvalidArgumentError,
    ResposeError,
    TrainingComplete,
    TrainingDiverged,
)
from .evaluation import EvalReport, evaluate, load_pose_bundle, mpjpe, mpjpe_pa
from .geometry import CameraIntrinsics, procrustes_align
from .losses import (
    FeatureQueue,
    LossConfig,
    ProjectionHead,
    basic_loss,
    contrastive_g,
    feature_loss,
    self_supervision_loss,
    ss_weight,
    total_loss,
)
from .training import AugmentConfig, TrainConfig, Trainer, progressive_schedule

__version__ = "0.1.0"
