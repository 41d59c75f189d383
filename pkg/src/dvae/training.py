"""Multi-phase training: disentangling, embedding, residual-factor variants.

Three entry points, one per task family:

  - train_fully_specified: factor encoders + all decoders first
    (disentangling phase), then the x encoder against frozen decoders
    (embedding phase);
  - train_with_zu: disentangling with a residual image-encoded factor,
    interleaved with batch-local consistency passes that make the label
    decoder insensitive to the residual slice, then an embedding phase;
  - train_second_modality: embeds a second input modality (RGB images)
    into a latent space disentangled in the pose domain, with optional
    weak viewpoint-only supervision routing.

Everything is deterministic given (config, dataset): model initialization,
batch order, augmentation draws and noise draws all derive from config.seed.
"""

from __future__ import annotations

import hashlib
import json
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.ndimage
import torch
from torch import Tensor, nn

from .config import TrainConfig
from .data import Sample
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    SupervisionError,
)
from .geometry import Pose3D, Viewpoint, canonicalize, rotation_z
from .latent import reparameterize
from .networks import (
    Checkpoint,
    build_decoder,
    build_encoder,
    image_decoder_spec,
    image_encoder_spec,
    vector_spec,
)
from .objectives import (
    ReconTerm,
    consistency_loss_zu,
    elbo_dis,
    elbo_dis_u,
    elbo_emb,
    elbo_emb_prime,
    frozen_params,
    kl_standard_normal,
    recon_log_likelihood,
)

PHASE_DISENTANGLE = "disentangle"
PHASE_EMBED = "embed"
PHASE_CONSISTENCY = "consistency"
CHECKPOINT_EVERY = 5


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    step: int
    m: dict[str, Tensor]
    v: dict[str, Tensor]

    @staticmethod
    def init(params: dict[str, Tensor]) -> "AdamState":
        return AdamState(
            0,
            {k: torch.zeros_like(p) for k, p in params.items()},
            {k: torch.zeros_like(p) for k, p in params.items()},
        )


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One adaptive-moment update; returns (new params, new state).

    Pure function: inputs are not mutated.  Missing gradients count as zero.
    """
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        elif not bool(torch.isfinite(g).all()):
            raise DivergenceError(f"non-finite gradient for {name!r}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_p[name] = p - lr * m_hat / (v_hat.sqrt() + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    """In-place Adam over named nn.Parameters; same recursion as optimizer_step."""

    def __init__(self, params: dict[str, nn.Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.init(params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        with torch.no_grad():
            new_p, self.state = optimizer_step(
                {k: p.detach() for k, p in self.params.items()},
                grads, self.state, self.lr, self.beta1, self.beta2, self.eps,
            )
            for k, p in self.params.items():
                p.copy_(new_p[k])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

# The renderer maps +x right, +y up; a world rotation about the camera axis
# by theta matches scipy.ndimage.rotate by theta degrees with axes=(1, 0).
def _rotate_image(img: np.ndarray, theta_deg: float) -> np.ndarray:
    if theta_deg == 0.0:
        return img
    return scipy.ndimage.rotate(
        img, theta_deg, axes=(1, 0), reshape=False, order=1, mode="nearest"
    ).astype(img.dtype)


def augment(sample: Sample, rng: np.random.Generator,
            rotation_range: float = 180.0, flip: bool = True) -> Sample:
    """In-plane rotation plus optional mirror flip, labels kept consistent.

    The rotation acts on the image (and tag) and as a rotation about the
    camera axis on pose and viewpoint labels; the flip mirrors image and
    pose across the y-axis (a handedness change).  The canonical pose is
    recomputed from the transformed absolute pose.  Viewpoint-only records
    are rotated but never flipped: the reflected viewpoint cannot be
    derived without the pose.
    """
    theta_deg = float(rng.uniform(-rotation_range, rotation_range)) if rotation_range > 0 else 0.0
    do_flip = bool(flip and rng.random() < 0.5)
    rot = rotation_z(np.deg2rad(theta_deg))

    image = _rotate_image(sample.image, theta_deg)
    tag = _rotate_image(sample.content_tag, theta_deg) if sample.content_tag is not None else None
    pose, cpose, view = sample.pose3d, sample.cpose, sample.viewpoint

    if pose is not None:
        joints = pose.joints @ rot.T
        if do_flip:
            joints = joints * np.array([-1.0, 1.0, 1.0])
            image = image[:, ::-1].copy()
            if tag is not None:
                tag = tag[:, ::-1].copy()
        pose = Pose3D(joints)
        if cpose is not None or view is not None:
            cpose, view, _, _ = canonicalize(pose)
            if "cpose" not in sample.label_mask:
                cpose = None
            if "viewpoint" not in sample.label_mask:
                view = None
    elif view is not None:
        view = Viewpoint(rot @ view.rotation)

    return Sample(
        image=image,
        pose3d=pose,
        cpose=cpose,
        viewpoint=view,
        content_tag=tag,
        label_mask=sample.label_mask,
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class TensorSet:
    """All samples stacked into float32 tensors plus availability masks."""

    image: Tensor  # (N, 3, H, W)
    pose: Tensor  # (N, 3J)
    cpose: Tensor  # (N, 3J)
    view: Tensor  # (N, 9)
    tag: Tensor  # (N, 3, H, W)
    has_pose: np.ndarray
    has_cpose: np.ndarray
    has_view: np.ndarray
    has_tag: np.ndarray

    def __len__(self):
        return self.image.shape[0]


def tensorize(samples, config: TrainConfig) -> TensorSet:
    n = len(samples)
    if n == 0:
        raise SupervisionError("dataset is empty")
    h = config.image_size
    j3 = 3 * config.joint_count
    if samples[0].image.shape != (h, h, 3):
        raise ConfigError(
            f"config expects {h}x{h}x3 images, dataset has {samples[0].image.shape}"
        )
    image = torch.zeros(n, 3, h, h)
    tag = torch.zeros(n, 3, h, h)
    pose = torch.zeros(n, j3)
    cpose = torch.zeros(n, j3)
    view = torch.zeros(n, 9)
    masks = {k: np.zeros(n, dtype=bool) for k in ("pose", "cpose", "view", "tag")}
    for i, s in enumerate(samples):
        image[i] = torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1)))
        if s.pose3d is not None:
            if s.pose3d.joint_count != config.joint_count:
                raise ConfigError(
                    f"config expects {config.joint_count} joints, sample has {s.pose3d.joint_count}"
                )
            pose[i] = torch.from_numpy(s.pose3d.joints.ravel().astype(np.float32))
            masks["pose"][i] = True
        if s.cpose is not None:
            cpose[i] = torch.from_numpy(s.cpose.joints.ravel().astype(np.float32))
            masks["cpose"][i] = True
        if s.viewpoint is not None:
            view[i] = torch.from_numpy(s.viewpoint.rotation.ravel().astype(np.float32))
            masks["view"][i] = True
        if s.content_tag is not None:
            tag[i] = torch.from_numpy(np.ascontiguousarray(s.content_tag.transpose(2, 0, 1)))
            masks["tag"][i] = True
    return TensorSet(image, pose, cpose, view, tag,
                     masks["pose"], masks["cpose"], masks["view"], masks["tag"])


_TASK_FACTORS = {
    "pose_estimation": {"cpose": "cpose", "view": "view"},
    "synthesis_tags": {"pose": "pose", "content": "tag"},
    "synthesis_zu": {"pose": "pose"},
}
_TASK_X = {"pose_estimation": "pose", "synthesis_tags": "image", "synthesis_zu": "image"}


def _torch_gen(seed: int, *tags) -> torch.Generator:
    digest = hashlib.sha256(f"{seed}|{'|'.join(map(str, tags))}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF)


def _np_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags])


def _role_seed(seed: int, role: str) -> int:
    return (seed * 0x9E3779B1 + zlib.crc32(role.encode())) & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def build_model(config: TrainConfig) -> Checkpoint:
    """Fresh nets for the task, deterministically initialized from the seed."""
    p = config.partition
    d = p.total_dim
    j3 = 3 * config.joint_count
    preset, size, seed = config.scale_preset, config.image_size, config.seed
    nets = {}

    def enc(role, spec):
        nets[role] = build_encoder(spec, _role_seed(seed, role))

    def dec(role, spec):
        nets[role] = build_decoder(spec, _role_seed(seed, role))

    if config.task == "pose_estimation":
        dc, dv = p.dim_of("cpose"), p.dim_of("view")
        enc("enc_cpose", vector_spec("vector_encoder", j3, dc, preset))
        enc("enc_view", vector_spec("vector_encoder", 9, dv, preset))
        dec("dec_cpose", vector_spec("vector_decoder", dc, j3, preset))
        dec("dec_view", vector_spec("vector_decoder", dv, 9, preset))
        dec("dec_x", vector_spec("vector_decoder", d, j3, preset))
        enc("enc_x", vector_spec("vector_encoder", j3, d, preset))
        enc("enc_xhat", image_encoder_spec(size, d, preset))
    elif config.task == "synthesis_tags":
        dp, dc = p.dim_of("pose"), p.dim_of("content")
        enc("enc_pose", vector_spec("vector_encoder", j3, dp, preset))
        enc("enc_content", image_encoder_spec(size, dc, preset))
        dec("dec_pose", vector_spec("vector_decoder", dp, j3, preset))
        dec("dec_content", image_decoder_spec(dc, size, preset))
        dec("dec_x", image_decoder_spec(d, size, preset))
        enc("enc_x", image_encoder_spec(size, d, preset))
    elif config.task == "synthesis_zu":
        dp, du = p.dim_of("pose"), p.dim_of("u")
        enc("enc_pose", vector_spec("vector_encoder", j3, dp, preset))
        enc("enc_u", image_encoder_spec(size, du, preset))
        dec("dec_pose", vector_spec("vector_decoder", d, j3, preset))  # full code
        dec("dec_x", image_decoder_spec(d, size, preset))
        enc("enc_x", image_encoder_spec(size, d, preset))
    else:
        raise ConfigError(f"unknown task {config.task!r}")
    return Checkpoint(config.task, p, nets, config.config_hash)


# ---------------------------------------------------------------------------
# training log and loop scaffolding
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    """Per-step loss records plus run provenance."""

    config_hash: str
    records: list = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, phase, epoch, step, total, terms):
        if not np.isfinite(total):
            raise DivergenceError(f"non-finite loss at {phase} epoch {epoch} step {step}")
        self.records.append(
            {"phase": phase, "epoch": epoch, "step": step, "total": float(total), **terms}
        )

    def totals(self, phase=None):
        return [r["total"] for r in self.records if phase is None or r["phase"] == phase]

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            header = {"config_hash": self.config_hash, "wall_clock": self.wall_clock}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class _Run:
    """Shared loop state: tensors, checkpoints, logging, divergence guard."""

    def __init__(self, config: TrainConfig, model: Checkpoint, samples, run_dir=None):
        self.config = config
        self.model = model
        self.samples = samples
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.log = TrainLog(config.config_hash)
        self.last_ckpt = None
        self.base_ts = tensorize(samples, config)
        self.augmenting = config.augment_rotation > 0 or config.augment_flip
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    def epoch_tensors(self, phase, epoch) -> TensorSet:
        if not self.augmenting:
            return self.base_ts
        rng = _np_rng(self.config.seed, "augment", phase, epoch)
        out = [
            augment(s, rng, rotation_range=self.config.augment_rotation,
                    flip=self.config.augment_flip)
            for s in self.samples
        ]
        return tensorize(out, self.config)

    def save_ckpt(self, phase, epoch):
        if self.run_dir is None:
            return
        path = self.run_dir / f"ckpt-{phase}-{epoch}"
        self.model.save(path)
        self.last_ckpt = path

    def check_finite(self, loss: Tensor, phase, epoch, step):
        if not bool(torch.isfinite(loss)):
            raise DivergenceError(
                f"non-finite loss in phase {phase!r}, epoch {epoch}, step {step}",
                last_checkpoint=self.last_ckpt,
            )

    def phase_loop(self, phase, epochs, indices, loss_fn, opt, after_step=None):
        """Epoch/batch loop; loss_fn(ts, idx, noise, terms) -> loss tensor."""
        cfg = self.config
        d = cfg.latent_dim
        gen = _torch_gen(cfg.seed, "noise", phase)
        step = 0
        for epoch in range(epochs):
            ts = self.epoch_tensors(phase, epoch)
            order = _np_rng(cfg.seed, "order", phase, epoch).permutation(indices)
            for lo in range(0, len(order), cfg.batch_size):
                idx = torch.from_numpy(np.ascontiguousarray(order[lo : lo + cfg.batch_size]))
                noise = torch.randn(len(idx), d, generator=gen)
                terms: dict = {}
                loss = loss_fn(ts, idx, noise, terms)
                self.check_finite(loss, phase, epoch, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                self.log.append(phase, epoch, step, float(loss.detach()), terms)
                if after_step is not None:
                    after_step(ts, idx, epoch, step)
                step += 1
            if (epoch + 1) % CHECKPOINT_EVERY == 0 or epoch + 1 == epochs:
                self.save_ckpt(phase, epoch + 1)

    def finish(self, t0):
        self.log.wall_clock = time.monotonic() - t0
        if self.run_dir is not None:
            self.log.write_jsonl(self.run_dir / "log.jsonl")
        return self.model, self.log


def _named_params(model: Checkpoint, roles) -> dict[str, nn.Parameter]:
    out = {}
    for role in roles:
        for name, p in model.nets[role].named_parameters():
            out[f"{role}.{name}"] = p
    return out


def _labelled_indices(ts: TensorSet, keys) -> np.ndarray:
    ok = np.ones(len(ts), dtype=bool)
    for key in keys:
        if key != "image":
            ok &= getattr(ts, f"has_{key}")
    return np.nonzero(ok)[0]


# ---------------------------------------------------------------------------
# Alg-1-style training: fully specified latent
# ---------------------------------------------------------------------------


def train_fully_specified(config: TrainConfig, samples, run_dir=None):
    """Two-phase training for tasks whose factors all have observed labels.

    Phase 1 fits the factor encoders and all decoders by ascending the
    disentangling bound; phase 2 fits the x encoder against the frozen
    decoders by ascending the embedding bound.  Returns (Checkpoint,
    TrainLog).
    """
    if config.task not in ("synthesis_tags", "pose_estimation"):
        raise ConfigError(f"train_fully_specified does not handle task {config.task!r}")
    t0 = time.monotonic()
    model = build_model(config)
    run = _Run(config, model, samples, run_dir)
    factors = _TASK_FACTORS[config.task]
    x_key = _TASK_X[config.task]

    indices = _labelled_indices(run.base_ts, list(factors.values()) + [x_key])
    if len(indices) == 0:
        raise SupervisionError(
            f"no records carry the labels required for {config.task} disentangling"
        )

    partition = config.partition
    encoders = {name: model.nets[f"enc_{name}"] for name in factors}
    decoders = {name: model.nets[f"dec_{name}"] for name in factors}
    decoders["x"] = model.nets["dec_x"]

    def dis_loss(ts, idx, noise, terms):
        x = getattr(ts, x_key)[idx]
        ys = {name: getattr(ts, key)[idx] for name, key in factors.items()}
        return -elbo_dis(x, ys, encoders, decoders, config.weights_disentangle,
                         partition, noise, term_sink=terms)

    dis_roles = [f"enc_{n}" for n in factors] + [f"dec_{n}" for n in factors] + ["dec_x"]
    opt = Adam(_named_params(model, dis_roles), config.learning_rate)
    run.phase_loop(PHASE_DISENTANGLE, config.epochs_disentangle, indices, dis_loss, opt)

    enc_x = model.nets["enc_x"]

    def emb_loss(ts, idx, noise, terms):
        x = getattr(ts, x_key)[idx]
        ys = {name: getattr(ts, key)[idx] for name, key in factors.items()}
        return -elbo_emb(x, ys, enc_x, decoders, config.weights_embed,
                         partition, noise, term_sink=terms)

    opt2 = Adam(_named_params(model, ["enc_x"]), config.learning_rate)
    run.phase_loop(PHASE_EMBED, config.epochs_embed, indices, emb_loss, opt2)
    return run.finish(t0)


# ---------------------------------------------------------------------------
# Alg-2-style training: additional residual factor
# ---------------------------------------------------------------------------


def train_with_zu(config: TrainConfig, samples, run_dir=None):
    """Training with a residual factor encoded from the image itself.

    Outer epochs ascend the residual-factor disentangling bound; after each
    outer batch, ``epochs_inner`` consistency passes on that same batch
    resample the residual slice from the batch statistics just captured,
    shrinking the label decoder's sensitivity to it.  A final embedding
    phase fits the x encoder against the frozen decoders.
    """
    if config.task != "synthesis_zu":
        raise ConfigError(f"train_with_zu requires task synthesis_zu, got {config.task!r}")
    t0 = time.monotonic()
    model = build_model(config)
    run = _Run(config, model, samples, run_dir)
    indices = _labelled_indices(run.base_ts, ["pose"])
    if len(indices) == 0:
        raise SupervisionError("no pose-labelled records for the residual-factor task")

    partition = config.partition
    y_name = partition.names[0]
    enc_y, enc_u = model.nets[f"enc_{y_name}"], model.nets["enc_u"]
    dec_y, dec_x = model.nets[f"dec_{y_name}"], model.nets["dec_x"]
    encoders = {y_name: enc_y, "u": enc_u}
    decoders = {y_name: dec_y, "x": dec_x}
    weights = config.weights_disentangle

    outer_opt = Adam(
        _named_params(model, [f"enc_{y_name}", "enc_u", f"dec_{y_name}", "dec_x"]),
        config.learning_rate,
    )
    inner_opt = Adam(_named_params(model, [f"enc_{y_name}", f"dec_{y_name}"]), config.learning_rate)
    inner_gen = _torch_gen(config.seed, "noise", PHASE_CONSISTENCY)
    inner_step = [0]

    def outer_loss(ts, idx, noise, terms):
        return -elbo_dis_u(ts.image[idx], ts.pose[idx], encoders, decoders, weights,
                           partition, noise, term_sink=terms)

    def inner_passes(ts, idx, epoch, step):
        if config.epochs_inner == 0:
            return
        with torch.no_grad():
            q_u = enc_u(ts.image[idx])
            mu, sigma = q_u.mean.detach(), q_u.std().detach()
        y1 = ts.pose[idx]
        for _ in range(config.epochs_inner):
            noise = torch.randn(len(idx), partition.total_dim, generator=inner_gen)
            loss = consistency_loss_zu(y1, enc_y, dec_y, (mu, sigma), partition, noise)
            run.check_finite(loss, PHASE_CONSISTENCY, epoch, inner_step[0])
            inner_opt.zero_grad()
            loss.backward()
            inner_opt.step()
            run.log.append(PHASE_CONSISTENCY, epoch, inner_step[0], float(loss.detach()),
                           {"zu_mu_sum": float(mu.sum()), "zu_sigma_sum": float(sigma.sum())})
            inner_step[0] += 1

    run.phase_loop(PHASE_DISENTANGLE, config.epochs_disentangle, indices, outer_loss,
                   outer_opt, after_step=inner_passes)

    enc_x = model.nets["enc_x"]
    w_emb = config.weights_embed

    def emb_loss(ts, idx, noise, terms):
        # Embedding bound in the residual-factor model: same term structure
        # as the fully specified embedding step, except the label decoder
        # consumes the full code.
        x, y1 = ts.image[idx], ts.pose[idx]
        q = enc_x(x)
        z = reparameterize(q, noise)
        with frozen_params(dec_x, dec_y):
            ll_x = recon_log_likelihood(ReconTerm(x, dec_x(z)), batch_dims=1)
            ll_y = recon_log_likelihood(ReconTerm(y1, dec_y(z)), batch_dims=1)
        kl = kl_standard_normal(q)
        terms.update({"ll_x": float(ll_x.detach()), f"ll_{y_name}": float(ll_y.detach()), "kl": float(kl.detach())})
        return -(w_emb.lambda_x * ll_x + w_emb.lambda_for(y_name) * ll_y - w_emb.beta * kl)

    opt2 = Adam(_named_params(model, ["enc_x"]), config.learning_rate)
    run.phase_loop(PHASE_EMBED, config.epochs_embed, indices, emb_loss, opt2)
    return run.finish(t0)


# ---------------------------------------------------------------------------
# second-modality embedding (images into a pose-domain latent space)
# ---------------------------------------------------------------------------


def train_second_modality(config: TrainConfig, samples, checkpoint: Checkpoint, run_dir=None):
    """Embed RGB images into a latent space disentangled in the pose domain.

    Requires a pose-domain disentangling checkpoint.  Fully labelled
    records contribute every reconstruction term; records carrying only a
    viewpoint label contribute the viewpoint term and the KL.  Only the
    image encoder is updated; every decoder parameter stays bit-identical.
    """
    if config.task != "pose_estimation":
        raise ConfigError(
            f"train_second_modality requires task pose_estimation, got {config.task!r}"
        )
    if checkpoint.task != "pose_estimation":
        raise CheckpointError(f"checkpoint task {checkpoint.task!r} is not pose_estimation")
    if checkpoint.partition != config.partition:
        raise CheckpointError(
            f"checkpoint partition {checkpoint.partition.segments} != config "
            f"{config.partition.segments}"
        )
    for role in ("dec_x", "dec_cpose", "dec_view", "enc_xhat"):
        if role not in checkpoint.nets:
            raise CheckpointError(f"checkpoint is missing net {role!r}")

    t0 = time.monotonic()
    model = checkpoint
    run = _Run(config, model, samples, run_dir)
    ts0 = run.base_ts
    full = ts0.has_pose & ts0.has_cpose & ts0.has_view
    weak = ts0.has_view & ~full
    indices = np.nonzero(full | weak)[0]
    if len(indices) == 0:
        raise SupervisionError("no usable records: need pose labels or viewpoint weak labels")

    partition = config.partition
    enc_xhat = model.nets["enc_xhat"]
    decoders = {"cpose": model.nets["dec_cpose"], "view": model.nets["dec_view"],
                "x": model.nets["dec_x"]}
    w = config.weights_embed
    view_slice = partition.slice_of("view")
    full_t = torch.from_numpy(full)

    def emb_loss(ts, idx, noise, terms):
        sel_full = full_t[idx]
        i_full, i_weak = idx[sel_full], idx[~sel_full]
        loss = noise.new_zeros(())
        if len(i_full):
            sub_terms: dict = {}
            elbo = elbo_emb_prime(
                ts.image[i_full], ts.pose[i_full],
                {"cpose": ts.cpose[i_full], "view": ts.view[i_full]},
                enc_xhat, decoders, w, partition, noise[sel_full], term_sink=sub_terms,
            )
            loss = loss - len(i_full) * elbo
            terms.update(sub_terms)
        if len(i_weak):
            q = enc_xhat(ts.image[i_weak])
            z = reparameterize(q, noise[~sel_full])
            with frozen_params(decoders["view"]):
                ll_view = recon_log_likelihood(
                    ReconTerm(ts.view[i_weak], decoders["view"](z[..., view_slice])),
                    batch_dims=1,
                )
            kl = kl_standard_normal(q)
            loss = loss - len(i_weak) * (w.lambda_for("view") * ll_view - w.beta * kl)
            terms.update({"ll_view_weak": float(ll_view.detach()), "kl_weak": float(kl.detach())})
        return loss / len(idx)

    opt = Adam(_named_params(model, ["enc_xhat"]), config.learning_rate)
    run.phase_loop(PHASE_EMBED, config.epochs_embed, indices, emb_loss, opt)
    return run.finish(t0)


def train_pose_estimation(config: TrainConfig, samples, run_dir=None):
    """Pose-estimation pipeline: pose-domain disentangling, then
    second-modality embedding of the images.  Returns (Checkpoint, TrainLog)
    with the two phase logs concatenated."""
    phase1_cfg = replace(config, epochs_embed=0)
    ckpt, log1 = train_fully_specified(phase1_cfg, samples, run_dir)
    ckpt, log2 = train_second_modality(config, samples, ckpt, run_dir)
    log1.records.extend(log2.records)
    log1.wall_clock += log2.wall_clock
    if run_dir is not None:
        log1.write_jsonl(Path(run_dir) / "log.jsonl")
    return ckpt, log1


def train(config: TrainConfig, samples, run_dir=None):
    """Dispatch to the task's training pipeline."""
    if config.task == "pose_estimation":
        return train_pose_estimation(config, samples, run_dir)
    if config.task == "synthesis_tags":
        return train_fully_specified(config, samples, run_dir)
    return train_with_zu(config, samples, run_dir)
