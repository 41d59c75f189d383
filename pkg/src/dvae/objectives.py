"""Differentiable training objectives for the disentangled cross-modal VAE.

Every function here is a pure composition of reconstruction log-likelihoods
and closed-form KL terms over encoder outputs.  Expectations are estimated
with a single reparameterized sample; the caller supplies the noise tensor,
so re-evaluating with the same noise is bit-reproducible.

Conventions:
  - all modality tensors are batched: shape (B, ...);
  - ``noise`` has shape (B, d) where d is the partition's total dimension
    (the per-segment ELBOs slice it);
  - reconstruction terms are summed over feature dimensions and averaged
    over the batch, KL likewise averaged over the batch, so the lambda/beta
    weights transfer across batch sizes.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Mapping

import torch
from torch import Tensor

from .errors import ConfigError, DimensionError
from .latent import GaussianParams, LatentPartition, concat_latent, kl_standard_normal, reparameterize

GAUSSIAN = "gaussian_unit_variance"  # log p up to const == -0.5 * sum squared error
LAPLACE = "laplace_unit_scale"  # log p up to const == -sum absolute error

Encoder = Callable[[Tensor], GaussianParams]
Decoder = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class ElboWeights:
    """Reconstruction weights (lambda) and KL weight (beta) for one objective."""

    lambda_x: float
    lambda_y: Mapping[str, float]
    beta: float

    def __post_init__(self):
        vals = [self.lambda_x, self.beta, *self.lambda_y.values()]
        for v in vals:
            v = float(v)
            if not (v >= 0.0) or v != v or v == float("inf"):
                raise ConfigError(f"weights must be finite and >= 0, got {vals}")

    def lambda_for(self, name: str) -> float:
        try:
            return float(self.lambda_y[name])
        except KeyError:
            raise ConfigError(
                f"no lambda weight for factor {name!r}; have {sorted(self.lambda_y)}"
            ) from None


@dataclass(frozen=True)
class ReconTerm:
    """One reconstruction log-likelihood term: target, model output, family."""

    target: Tensor
    reconstruction: Tensor
    likelihood: str = GAUSSIAN

    def __post_init__(self):
        if self.target.shape != self.reconstruction.shape:
            raise DimensionError(
                f"target shape {tuple(self.target.shape)} != reconstruction "
                f"shape {tuple(self.reconstruction.shape)}"
            )
        if self.likelihood not in (GAUSSIAN, LAPLACE):
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")


def recon_log_likelihood(term: ReconTerm, batch_dims: int = 0) -> Tensor:
    """Log-likelihood of ``target`` under the reconstruction, up to constants.

    Sums over all dimensions except the first ``batch_dims``, which are
    averaged.  With ``batch_dims=0`` this is a plain sum over everything.
    """
    err = term.target - term.reconstruction
    if term.likelihood == GAUSSIAN:
        per = -0.5 * err**2
    else:
        per = -err.abs()
    if batch_dims:
        per = per.reshape(*per.shape[:batch_dims], -1).sum(dim=-1)
        for _ in range(batch_dims):
            per = per.mean(dim=0)
        return per
    return per.sum()


@contextmanager
def frozen_params(*nets):
    """Temporarily mark parameters of the given nets as not requiring grad.

    Autograd records requires_grad at forward time, so a backward pass run
    after this context exits still accumulates nothing into them while
    gradients keep flowing *through* the frozen computation to its inputs.
    Non-module callables pass through untouched.
    """
    saved = []
    for net in nets:
        if isinstance(net, torch.nn.Module):
            for p in net.parameters():
                saved.append((p, p.requires_grad))
                p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _likelihood_of(likelihoods, key):
    if likelihoods is None:
        return GAUSSIAN
    return likelihoods.get(key, GAUSSIAN)


def elbo_cvae(
    x: Tensor,
    y: Tensor,
    encoder_x: Encoder,
    decoder_x: Decoder,
    decoder_y: Decoder,
    weights: ElboWeights,
    noise: Tensor,
    likelihoods: Mapping[str, str] | None = None,
    term_sink: dict | None = None,
) -> Tensor:
    """Cross-modal ELBO: encode x, decode both modalities from one z.

    Returns lambda_x * E[log p(x|z)] + lambda_y * E[log p(y|z)]
    - beta * KL(q(z|x) || N(0, I)).
    """
    if len(weights.lambda_y) != 1:
        raise ConfigError("elbo_cvae expects exactly one y-factor weight")
    (y_name,) = weights.lambda_y
    q = encoder_x(x)
    z = reparameterize(q, noise)
    ll_x = recon_log_likelihood(
        ReconTerm(x, decoder_x(z), _likelihood_of(likelihoods, "x")), batch_dims=1
    )
    ll_y = recon_log_likelihood(
        ReconTerm(y, decoder_y(z), _likelihood_of(likelihoods, y_name)), batch_dims=1
    )
    kl = kl_standard_normal(q)
    if term_sink is not None:
        term_sink.update({"ll_x": float(ll_x.detach()), f"ll_{y_name}": float(ll_y.detach()), "kl": float(kl.detach())})
    return weights.lambda_x * ll_x + weights.lambda_for(y_name) * ll_y - weights.beta * kl


def elbo_dis(
    x: Tensor,
    ys: Mapping[str, Tensor],
    encoders: Mapping[str, Encoder],
    decoders: Mapping[str, Decoder],
    weights: ElboWeights,
    partition: LatentPartition,
    noise: Tensor,
    likelihoods: Mapping[str, str] | None = None,
    term_sink: dict | None = None,
) -> Tensor:
    """Disentangling ELBO: per-factor encoders, shared x decoder.

    z is the concatenation of one reparameterized sample per factor; each
    factor decoder sees only its own slice, the x decoder sees the full code.
    The KL of the concatenated code is the sum of per-segment KLs (the
    segment posteriors are independent diagonal Gaussians).
    """
    parts, total = [], x.new_zeros(())
    kl_sum = x.new_zeros(())
    for name, _ in partition.segments:
        q = encoders[name](ys[name])
        sl = partition.slice_of(name)
        z_i = reparameterize(q, noise[..., sl])
        parts.append(z_i)
        ll = recon_log_likelihood(
            ReconTerm(ys[name], decoders[name](z_i), _likelihood_of(likelihoods, name)),
            batch_dims=1,
        )
        kl_sum = kl_sum + kl_standard_normal(q)
        total = total + weights.lambda_for(name) * ll
        if term_sink is not None:
            term_sink[f"ll_{name}"] = float(ll.detach())
    z = concat_latent(parts, partition).values
    ll_x = recon_log_likelihood(
        ReconTerm(x, decoders["x"](z), _likelihood_of(likelihoods, "x")), batch_dims=1
    )
    if term_sink is not None:
        term_sink.update({"ll_x": float(ll_x.detach()), "kl": float(kl_sum.detach())})
    return total + weights.lambda_x * ll_x - weights.beta * kl_sum


def elbo_emb(
    x: Tensor,
    ys: Mapping[str, Tensor],
    encoder_x: Encoder,
    decoders: Mapping[str, Decoder],
    weights: ElboWeights,
    partition: LatentPartition,
    noise: Tensor,
    likelihoods: Mapping[str, str] | None = None,
    term_sink: dict | None = None,
) -> Tensor:
    """Embedding ELBO: fit q(z|x) against frozen decoders.

    The decoders' parameters receive exactly zero gradient; the gradient
    flows only into the encoder.
    """
    q = encoder_x(x)
    z = reparameterize(q, noise)
    with frozen_params(*decoders.values()):
        ll_x = recon_log_likelihood(
            ReconTerm(x, decoders["x"](z), _likelihood_of(likelihoods, "x")), batch_dims=1
        )
        total = weights.lambda_x * ll_x
        if term_sink is not None:
            term_sink["ll_x"] = float(ll_x.detach())
        for name, _ in partition.segments:
            z_i = z[..., partition.slice_of(name)]
            ll = recon_log_likelihood(
                ReconTerm(ys[name], decoders[name](z_i), _likelihood_of(likelihoods, name)),
                batch_dims=1,
            )
            total = total + weights.lambda_for(name) * ll
            if term_sink is not None:
                term_sink[f"ll_{name}"] = float(ll.detach())
    kl = kl_standard_normal(q)
    if term_sink is not None:
        term_sink["kl"] = float(kl.detach())
    return total - weights.beta * kl


def elbo_dis_u(
    x: Tensor,
    y1: Tensor,
    encoders: Mapping[str, Encoder],
    decoders: Mapping[str, Decoder],
    weights: ElboWeights,
    partition: LatentPartition,
    noise: Tensor,
    likelihoods: Mapping[str, str] | None = None,
    term_sink: dict | None = None,
) -> Tensor:
    """Disentangling ELBO with a residual factor encoded from x itself.

    The partition must be (factor, "u"): the factor segment is encoded from
    the label y1, the "u" segment from x.  Unlike :func:`elbo_dis`, the y1
    decoder consumes the *full* code here; making y1 insensitive to the "u"
    slice is the job of :func:`consistency_loss_zu`.
    """
    names = partition.names
    if len(names) != 2 or names[1] != "u":
        raise ConfigError(f"elbo_dis_u expects a (factor, 'u') partition, got {names}")
    y_name = names[0]
    q_y = encoders[y_name](y1)
    q_u = encoders["u"](x)
    z_y = reparameterize(q_y, noise[..., partition.slice_of(y_name)])
    z_u = reparameterize(q_u, noise[..., partition.slice_of("u")])
    z = concat_latent([z_y, z_u], partition).values
    ll_x = recon_log_likelihood(
        ReconTerm(x, decoders["x"](z), _likelihood_of(likelihoods, "x")), batch_dims=1
    )
    ll_y = recon_log_likelihood(
        ReconTerm(y1, decoders[y_name](z), _likelihood_of(likelihoods, y_name)), batch_dims=1
    )
    kl = kl_standard_normal(q_y) + kl_standard_normal(q_u)
    if term_sink is not None:
        term_sink.update({"ll_x": float(ll_x.detach()), f"ll_{y_name}": float(ll_y.detach()), "kl": float(kl.detach())})
    return weights.lambda_x * ll_x + weights.lambda_for(y_name) * ll_y - weights.beta * kl


def consistency_loss_zu(
    y1: Tensor,
    encoder_y1: Encoder,
    decoder_y1: Decoder,
    stored_stats: tuple[Tensor, Tensor],
    partition: LatentPartition,
    noise: Tensor,
    likelihood: str = GAUSSIAN,
) -> Tensor:
    """Reconstruction of y1 with the residual slice replaced by fresh noise.

    ``stored_stats`` is the (mu, sigma) pair captured from the residual
    encoder on the current batch; a sample mu + sigma * eps is spliced in
    place of the encoded residual and the negative reconstruction
    log-likelihood of y1 under the full-code decoder is returned
    (nonnegative for both supported likelihoods).  The stats are detached:
    this loss trains only the y1 encoder/decoder.
    """
    names = partition.names
    if len(names) != 2 or names[1] != "u":
        raise ConfigError(f"consistency_loss_zu expects a (factor, 'u') partition, got {names}")
    y_name = names[0]
    mu, sigma = stored_stats
    q_y = encoder_y1(y1)
    z_y = reparameterize(q_y, noise[..., partition.slice_of(y_name)])
    z_noise = mu.detach() + sigma.detach() * noise[..., partition.slice_of("u")]
    z = concat_latent([z_y, z_noise], partition).values
    ll = recon_log_likelihood(ReconTerm(y1, decoder_y1(z), likelihood), batch_dims=1)
    return -ll


def elbo_emb_prime(
    x_hat: Tensor,
    x: Tensor,
    ys: Mapping[str, Tensor],
    encoder_xhat: Encoder,
    decoders: Mapping[str, Decoder],
    weights: ElboWeights,
    partition: LatentPartition,
    noise: Tensor,
    likelihoods: Mapping[str, str] | None = None,
    term_sink: dict | None = None,
) -> Tensor:
    """Second-modality embedding ELBO: encode x_hat, reconstruct x and the ys.

    Identical term structure to :func:`elbo_emb` except the code comes from
    the x_hat encoder while the reconstruction targets stay (x, ys).
    Decoders are frozen; only the x_hat encoder receives gradient.
    """
    q = encoder_xhat(x_hat)
    z = reparameterize(q, noise)
    with frozen_params(*decoders.values()):
        ll_x = recon_log_likelihood(
            ReconTerm(x, decoders["x"](z), _likelihood_of(likelihoods, "x")), batch_dims=1
        )
        total = weights.lambda_x * ll_x
        if term_sink is not None:
            term_sink["ll_x"] = float(ll_x.detach())
        for name, _ in partition.segments:
            z_i = z[..., partition.slice_of(name)]
            ll = recon_log_likelihood(
                ReconTerm(ys[name], decoders[name](z_i), _likelihood_of(likelihoods, name)),
                batch_dims=1,
            )
            total = total + weights.lambda_for(name) * ll
            if term_sink is not None:
                term_sink[f"ll_{name}"] = float(ll.detach())
    kl = kl_standard_normal(q)
    if term_sink is not None:
        term_sink["kl"] = float(kl.detach())
    return total - weights.beta * kl
