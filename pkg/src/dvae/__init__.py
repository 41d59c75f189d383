"""Disentangled cross-modal VAE toolkit.

Learns a latent code deterministically partitioned into named factors
(pose, viewpoint, content, residual) for controllable image synthesis,
pose transfer and 3D pose estimation, trained end-to-end on a procedural
desk-scale dataset.
"""

from .config import TrainConfig, resolve_config
from .data import Sample, SceneParams, generate_dataset, generate_sample, ingest_external, load_dataset
from .errors import DvaeError
from .estimators import DisentangledSynthesizer, PoseEstimator3D
from .geometry import (
    CanonicalPose,
    Pose3D,
    Viewpoint,
    auc_pck,
    canonicalize,
    compose,
    mean_epe,
    metrics_report,
    nearest_rotation,
    pck,
)
from .inference import (
    MeanPosePredictor,
    estimate_pose,
    evaluate,
    latent_walk,
    pose_transfer,
    synthesize,
)
from .latent import GaussianParams, LatentCode, LatentPartition, concat_latent, kl_standard_normal, reparameterize, split_latent
from .networks import Checkpoint, NetSpec, build_decoder, build_encoder, load_checkpoint
from .objectives import (
    ElboWeights,
    ReconTerm,
    consistency_loss_zu,
    elbo_cvae,
    elbo_dis,
    elbo_dis_u,
    elbo_emb,
    elbo_emb_prime,
    recon_log_likelihood,
)
from .training import (
    Adam,
    AdamState,
    TrainLog,
    augment,
    optimizer_step,
    train,
    train_fully_specified,
    train_second_modality,
    train_with_zu,
)

__version__ = "0.1.0"
