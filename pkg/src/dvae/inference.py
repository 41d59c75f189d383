"""Task-level inference on trained checkpoints.

Deterministic by construction: every encoder is evaluated at its posterior
mean, nothing is sampled.  Images move through these functions as float
arrays of shape (H, W, 3) in [-1, 1]; poses as geometry types.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import Sample
from .errors import CheckpointError, SupervisionError
from .geometry import (
    CanonicalPose,
    Pose3D,
    Viewpoint,
    canonicalize,
    compose,
    mean_epe,
    mean_rotation,
    metrics_report,
    nearest_rotation,
)
from .latent import LatentCode
from .networks import Checkpoint

_EVAL_BATCH = 256


def _to_chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))


def _to_hwc(tensor: torch.Tensor) -> np.ndarray:
    return np.asarray(tensor.detach().numpy().transpose(1, 2, 0), dtype=np.float32)


def _flat_pose(pose: Pose3D) -> torch.Tensor:
    return torch.from_numpy(pose.joints.ravel().astype(np.float32))


def _require_task(model: Checkpoint, *tasks):
    if model.task not in tasks:
        raise CheckpointError(
            f"checkpoint was trained for task {model.task!r}; this operation needs {tasks}"
        )


def encode_factors(model: Checkpoint, sample: Sample) -> LatentCode:
    """Mean-encode one sample into a full latent code via the task's route.

    Synthesis models encode each factor from its label (pose vector, tag
    image, or the image itself for the residual factor); pose-estimation
    models encode the image.
    """
    p = model.partition
    with torch.no_grad():
        if model.task == "synthesis_tags":
            z_pose = model.nets["enc_pose"](_flat_pose(sample.pose3d)[None]).mean
            z_content = model.nets["enc_content"](_to_chw(sample.content_tag)[None]).mean
            return LatentCode(torch.cat([z_pose, z_content], dim=-1)[0], p)
        if model.task == "synthesis_zu":
            z_pose = model.nets["enc_pose"](_flat_pose(sample.pose3d)[None]).mean
            z_u = model.nets["enc_u"](_to_chw(sample.image)[None]).mean
            return LatentCode(torch.cat([z_pose, z_u], dim=-1)[0], p)
        return LatentCode(model.nets["enc_xhat"](_to_chw(sample.image)[None]).mean[0], p)


def _decode_pose(model: Checkpoint, code: LatentCode) -> Pose3D:
    """Pose decoded from a synthesis-model code (slice or full, per task)."""
    with torch.no_grad():
        if model.task == "synthesis_tags":
            flat = model.nets["dec_pose"](code.get("pose")[None])[0]
        else:
            flat = model.nets["dec_pose"](code.values[None])[0]
    return Pose3D(flat.numpy().astype(np.float64).reshape(-1, 3))


def _decode_image(model: Checkpoint, code: LatentCode) -> np.ndarray:
    with torch.no_grad():
        return _to_hwc(model.nets["dec_x"](code.values[None])[0])


def synthesize(model: Checkpoint, pose: Pose3D, content):
    """Render an image for a given pose and background content.

    ``content`` is a tag image for tag-trained models or a reference RGB
    image for residual-factor models.  Returns (image, decoded pose); the
    decoded pose comes from the pose decoder and serves as the model's own
    estimate of what it drew.
    """
    _require_task(model, "synthesis_tags", "synthesis_zu")
    p = model.partition
    with torch.no_grad():
        z_pose = model.nets["enc_pose"](_flat_pose(pose)[None]).mean
        if model.task == "synthesis_tags":
            z_content = model.nets["enc_content"](_to_chw(content)[None]).mean
        else:
            z_content = model.nets["enc_u"](_to_chw(content)[None]).mean
        code = LatentCode(torch.cat([z_pose, z_content], dim=-1)[0], p)
    return _decode_image(model, code), _decode_pose(model, code)


def pose_transfer(model: Checkpoint, pose_donor: Sample, content_donor: Sample):
    """Combine one sample's pose with another's background content."""
    content = content_donor.content_tag if model.task == "synthesis_tags" else content_donor.image
    return synthesize(model, pose_donor.pose3d, content)


def latent_walk(model: Checkpoint, a: Sample, b: Sample, segment: str, steps: int):
    """Linear interpolation on one latent segment between two samples.

    All other segments stay at a's values: step 0 is a's own code, the last
    step is b's segment spliced into a's code.  Returns (images, poses);
    images is empty for checkpoints without an image decoder.
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    p = model.partition
    sl = p.slice_of(segment)  # unknown segment -> KeyError
    code_a = encode_factors(model, a).values
    code_b = encode_factors(model, b).values
    images, poses = [], []
    for w in np.linspace(0.0, 1.0, steps):
        values = code_a.clone()
        values[sl] = (1.0 - w) * code_a[sl] + w * code_b[sl]
        code = LatentCode(values, p)
        if model.task in ("synthesis_tags", "synthesis_zu"):
            images.append(_decode_image(model, code))
            poses.append(_decode_pose(model, code))
        else:
            with torch.no_grad():
                flat = model.nets["dec_x"](code.values[None])[0]
            poses.append(Pose3D(flat.numpy().astype(np.float64).reshape(-1, 3)))
    return images, poses


class CheckpointPredictor:
    """Batched (canonical pose, raw viewpoint) prediction from images."""

    def __init__(self, model: Checkpoint):
        _require_task(model, "pose_estimation")
        self.model = model

    def predict_components(self, images: torch.Tensor):
        p = self.model.partition
        with torch.no_grad():
            z = self.model.nets["enc_xhat"](images).mean
            cpose = self.model.nets["dec_cpose"](z[..., p.slice_of("cpose")])
            view = self.model.nets["dec_view"](z[..., p.slice_of("view")])
        return cpose, view


class MeanPosePredictor:
    """Baseline: always predict the training set's mean canonical pose and
    mean viewpoint, evaluated through the same composition path."""

    def __init__(self, train_samples):
        cposes = [s.cpose.joints for s in train_samples if s.cpose is not None]
        views = [s.viewpoint.rotation for s in train_samples if s.viewpoint is not None]
        if not cposes or not views:
            raise SupervisionError("baseline needs cpose and viewpoint labels")
        self.cpose = np.mean(cposes, axis=0)
        self.view = mean_rotation(views)

    def predict_components(self, images: torch.Tensor):
        n = images.shape[0]
        cpose = torch.from_numpy(np.tile(self.cpose.ravel(), (n, 1)).astype(np.float32))
        view = torch.from_numpy(np.tile(self.view.ravel(), (n, 1)).astype(np.float32))
        return cpose, view


def estimate_pose(model: Checkpoint, image: np.ndarray, root, scale: float):
    """Predict (CanonicalPose, Viewpoint, Pose3D) from one RGB image.

    The viewpoint decoder emits 9 raw numbers; they are repaired to the
    nearest rotation, and the repair residual (max abs deviation) is
    returned alongside so reports can flag badly conditioned outputs.
    Root and scale are supplied by the caller (given at test time).
    """
    predictor = model if isinstance(model, CheckpointPredictor) else CheckpointPredictor(model)
    cpose_flat, view_flat = predictor.predict_components(_to_chw(image)[None])
    cpose = CanonicalPose(cpose_flat[0].numpy().astype(np.float64).reshape(-1, 3))
    raw = view_flat[0].numpy().astype(np.float64).reshape(3, 3)
    repaired = nearest_rotation(raw)
    residual = float(np.abs(raw - repaired).max())
    viewpoint = Viewpoint(repaired)
    return cpose, viewpoint, compose(cpose, viewpoint, root, scale), residual


def evaluate(model, samples, t_min: float = 20.0, t_max: float = 50.0, steps: int = 31,
             config_hash: str = ""):
    """Run pose estimation over a labelled dataset and build a metrics report.

    ``model`` may be a pose-estimation Checkpoint or any predictor exposing
    ``predict_components``.  Per the evaluation protocol, predictions are
    composed with each sample's ground-truth root and scale.
    """
    predictor = CheckpointPredictor(model) if isinstance(model, Checkpoint) else model
    labelled = [s for s in samples if s.pose3d is not None and s.cpose is not None]
    if not labelled:
        raise SupervisionError("evaluation needs pose-labelled samples")

    preds, gts, preds_c, gts_c, residuals = [], [], [], [], []
    for lo in range(0, len(labelled), _EVAL_BATCH):
        chunk = labelled[lo : lo + _EVAL_BATCH]
        images = torch.stack([_to_chw(s.image) for s in chunk])
        cpose_flat, view_flat = predictor.predict_components(images)
        for s, cp, vw in zip(chunk, cpose_flat, view_flat):
            cpose = CanonicalPose(cp.numpy().astype(np.float64).reshape(-1, 3))
            raw = vw.numpy().astype(np.float64).reshape(3, 3)
            repaired = nearest_rotation(raw)
            residuals.append(float(np.abs(raw - repaired).max()))
            root, scale = s.root_and_scale()
            preds.append(compose(cpose, Viewpoint(repaired), root, scale))
            gts.append(s.pose3d)
            preds_c.append(Pose3D(cpose.joints))
            gts_c.append(Pose3D(s.cpose.joints))

    report = metrics_report(preds, gts, t_min, t_max, steps, config_hash)
    report["mean_epe_cpose"] = float(np.mean([mean_epe(p, g) for p, g in zip(preds_c, gts_c)]))
    report["viewpoint_repair_max_residual"] = float(np.max(residuals))
    report["viewpoint_repair_mean_residual"] = float(np.mean(residuals))
    return report


def save_image(image: np.ndarray, path) -> None:
    """Write a [-1, 1] float image as 8-bit PNG (deterministic bytes)."""
    from PIL import Image

    u8 = np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def montage(images, cols: int, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Tile images (all same shape) into a grid with ``cols`` columns."""
    images = list(images)
    h, w, c = images[0].shape
    rows = (len(images) + cols - 1) // cols
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), fill, dtype=np.float32)
    for i, img in enumerate(images):
        r, cc = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + cc * (w + pad)
        out[y : y + h, x : x + w] = img
    return out


def reconstruction_epe(model: Checkpoint, samples) -> float:
    """Mean EPE between each sample's pose and its own synthesis-model
    reconstruction (pose encoded and decoded through the latent)."""
    _require_task(model, "synthesis_tags", "synthesis_zu")
    errs = []
    for s in samples:
        code = encode_factors(model, s)
        errs.append(mean_epe(_decode_pose(model, code), s.pose3d))
    return float(np.mean(errs))
