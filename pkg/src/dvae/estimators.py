"""Scikit-learn style estimators wrapping the training pipelines.

These classes expose the two end-user tasks through the familiar
``fit`` / ``predict`` / ``get_params`` surface so they compose with
sklearn tooling (clone, parameter search, pipelines over sample lists).
``X`` is a sequence of :class:`dvae.data.Sample` records.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import resolve_config
from .data import Sample
from .errors import SupervisionError
from .geometry import Viewpoint, mean_epe, nearest_rotation
from .inference import CheckpointPredictor, estimate_pose, latent_walk, pose_transfer, synthesize
from .training import train_fully_specified, train_pose_estimation, train_with_zu


def check_samples(X, require=()):
    """Validate a sample sequence; returns it as a list.

    ``require`` names labels that at least one record must carry.
    """
    samples = list(X)
    if not samples:
        raise ValueError("X must contain at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise TypeError(f"X[{i}] is {type(s).__name__}, expected dvae.data.Sample")
    for label in require:
        if not any(label in s.label_mask for s in samples):
            raise SupervisionError(f"no record in X carries the {label!r} label")
    return samples


def check_images(X, image_size: int) -> np.ndarray:
    """Validate an (n, H, W, 3) float image batch in [-1, 1]."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (image_size, image_size, 3):
        raise ValueError(
            f"expected images of shape (n, {image_size}, {image_size}, 3), got {arr.shape}"
        )
    if not np.isfinite(arr).all():
        raise ValueError("images contain non-finite values")
    return arr


class _ConfiguredEstimator(BaseEstimator):
    _task = ""

    def _config(self):
        return resolve_config(overrides=self._config_items())

    def _fitted_model(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")
        return self.model_


class PoseEstimator3D(_ConfiguredEstimator):
    """RGB image -> (canonical pose, viewpoint, absolute pose) estimator.

    ``fit`` runs pose-domain disentangling followed by second-modality
    embedding of the images; ``predict`` composes predicted canonical pose
    and viewpoint with each sample's ground-truth root and scale (the
    standard evaluation protocol).
    """

    _task = "pose_estimation"

    def __init__(self, cpose_dim=32, view_dim=32, epochs_disentangle=30, epochs_embed=25,
                 batch_size=32, learning_rate=1e-4, beta=0.01, seed=0, image_size=32,
                 joint_count=5, supervision="full", augment_rotation=0.0, augment_flip=False):
        self.cpose_dim = cpose_dim
        self.view_dim = view_dim
        self.epochs_disentangle = epochs_disentangle
        self.epochs_embed = epochs_embed
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta = beta
        self.seed = seed
        self.image_size = image_size
        self.joint_count = joint_count
        self.supervision = supervision
        self.augment_rotation = augment_rotation
        self.augment_flip = augment_flip

    def _config_items(self):
        return {
            "task": self._task,
            "partition": f"cpose:{self.cpose_dim},view:{self.view_dim}",
            "epochs_disentangle": self.epochs_disentangle,
            "epochs_embed": self.epochs_embed,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "dis.beta": self.beta,
            "emb.beta": self.beta,
            "seed": self.seed,
            "image_size": self.image_size,
            "joint_count": self.joint_count,
            "supervision": self.supervision,
            "augment_rotation": self.augment_rotation,
            "augment_flip": "true" if self.augment_flip else "false",
        }

    def fit(self, X, y=None):
        samples = check_samples(X, require=("pose3d", "viewpoint"))
        self.model_, self.log_ = train_pose_estimation(self._config(), samples)
        return self

    def predict(self, X) -> np.ndarray:
        """Absolute poses, shape (n, J, 3), using each sample's gt root/scale."""
        model = self._fitted_model()
        samples = check_samples(X, require=("pose3d",))
        out = []
        for s in samples:
            root, scale = s.root_and_scale()
            _, _, pose, _ = estimate_pose(model, s.image, root, scale)
            out.append(pose.joints)
        return np.stack(out)

    def predict_components(self, images):
        """(canonical poses (n, J, 3), viewpoints (n, 3, 3)) from raw images."""
        model = self._fitted_model()
        arr = check_images(images, self.image_size)
        batch = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
        cpose, view = CheckpointPredictor(model).predict_components(batch)
        viewpoints = np.stack([nearest_rotation(v.numpy().reshape(3, 3)) for v in view])
        return cpose.numpy().reshape(len(arr), -1, 3).astype(np.float64), viewpoints

    def score(self, X, y=None) -> float:
        """Negative mean EPE (higher is better, 0 is perfect)."""
        samples = check_samples(X, require=("pose3d",))
        preds = self.predict(samples)
        errs = [
            float(np.linalg.norm(p - s.pose3d.joints, axis=1).mean())
            for p, s in zip(preds, samples)
            if s.pose3d is not None
        ]
        return -float(np.mean(errs))


class DisentangledSynthesizer(_ConfiguredEstimator):
    """Pose- and content-controllable image synthesizer.

    ``variant='tags'`` learns the content factor from tag images;
    ``variant='zu'`` learns a residual content factor from the images
    themselves and needs no tags.
    """

    def __init__(self, variant="tags", pose_dim=32, content_dim=32, epochs_disentangle=20,
                 epochs_embed=5, epochs_inner=1, batch_size=32, learning_rate=1e-4,
                 beta=1.0, lambda_content=0.01, seed=0, image_size=32, joint_count=5,
                 augment_rotation=0.0, augment_flip=False):
        self.variant = variant
        self.pose_dim = pose_dim
        self.content_dim = content_dim
        self.epochs_disentangle = epochs_disentangle
        self.epochs_embed = epochs_embed
        self.epochs_inner = epochs_inner
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta = beta
        self.lambda_content = lambda_content
        self.seed = seed
        self.image_size = image_size
        self.joint_count = joint_count
        self.augment_rotation = augment_rotation
        self.augment_flip = augment_flip

    @property
    def _task(self):
        if self.variant not in ("tags", "zu"):
            raise ValueError(f"variant must be 'tags' or 'zu', got {self.variant!r}")
        return "synthesis_tags" if self.variant == "tags" else "synthesis_zu"

    def _config_items(self):
        content_name = "content" if self.variant == "tags" else "u"
        items = {
            "task": self._task,
            "partition": f"pose:{self.pose_dim},{content_name}:{self.content_dim}",
            "epochs_disentangle": self.epochs_disentangle,
            "epochs_embed": self.epochs_embed,
            "epochs_inner": self.epochs_inner,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "dis.beta": self.beta,
            "emb.beta": self.beta,
            "seed": self.seed,
            "image_size": self.image_size,
            "joint_count": self.joint_count,
            "augment_rotation": self.augment_rotation,
            "augment_flip": "true" if self.augment_flip else "false",
        }
        if self.variant == "tags":
            items["dis.lambda.content"] = self.lambda_content
            items["emb.lambda.content"] = self.lambda_content
        return items

    def fit(self, X, y=None):
        require = ("pose3d", "content_tag") if self.variant == "tags" else ("pose3d",)
        samples = check_samples(X, require=require)
        trainer = train_fully_specified if self.variant == "tags" else train_with_zu
        self.model_, self.log_ = trainer(self._config(), samples)
        return self

    def synthesize(self, pose, content):
        return synthesize(self._fitted_model(), pose, content)

    def transfer(self, pose_donor: Sample, content_donor: Sample):
        return pose_transfer(self._fitted_model(), pose_donor, content_donor)

    def walk(self, a: Sample, b: Sample, segment: str, steps: int = 8):
        return latent_walk(self._fitted_model(), a, b, segment, steps)

    def score(self, X, y=None) -> float:
        """Negative pose reconstruction EPE through the latent (0 is perfect)."""
        model = self._fitted_model()
        samples = [s for s in check_samples(X) if s.pose3d is not None]
        if not samples:
            raise SupervisionError("scoring needs pose-labelled samples")
        errs = []
        for s in samples:
            content = s.content_tag if self.variant == "tags" else s.image
            _, decoded = synthesize(model, s.pose3d, content)
            errs.append(mean_epe(decoded, s.pose3d))
        return -float(np.mean(errs))
