"""Diagonal-Gaussian latent primitives and named latent-code partitioning.

All operations are pure functions of their inputs and differentiable where
that makes sense; no module-level state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor

from .errors import DimensionError, NumericError

# Bound applied to log-variances before exponentiation.  exp(10) ~ 2.2e4
# variance is already absurd for a unit-prior latent; the clamp only guards
# against overflow, it never binds in healthy training.
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian over the last tensor dimension.

    ``mean`` and ``log_var`` share shape ``(..., d)``; leading dimensions are
    treated as batch dimensions by every consumer.
    """

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape "
                f"{tuple(self.log_var.shape)}"
            )
        if not bool(torch.isfinite(self.log_var).all()):
            raise NumericError("log_var contains non-finite values")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def std(self) -> Tensor:
        return torch.exp(0.5 * self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    def narrow(self, start: int, length: int) -> "GaussianParams":
        """Sub-Gaussian over a contiguous slice of the last dimension."""
        return GaussianParams(
            self.mean[..., start : start + length],
            self.log_var[..., start : start + length],
        )


def reparameterize(params: GaussianParams, noise: Tensor) -> Tensor:
    """mean + exp(0.5 * log_var) * noise, elementwise.

    Deterministic given inputs; the caller owns the noise draw.
    """
    if noise.shape[-1] != params.dim:
        raise DimensionError(
            f"noise dim {noise.shape[-1]} != params dim {params.dim}"
        )
    return params.mean + params.std() * noise


def kl_standard_normal(params: GaussianParams) -> Tensor:
    """Closed-form KL(N(mean, diag exp(log_var)) || N(0, I)).

    Sums over the last dimension and averages over any leading batch
    dimensions.  Returns a 0-dim tensor, differentiable in both parameters.
    """
    if not bool(torch.isfinite(params.mean).all()):
        raise NumericError("mean contains non-finite values")
    lv = params.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
    # expm1 keeps exp(lv) - 1 - lv nonnegative for tiny |lv|, where the
    # naive form cancels catastrophically and can dip below zero
    per_dim = torch.expm1(lv) - lv + params.mean**2
    return 0.5 * per_dim.sum(dim=-1).mean()


@dataclass(frozen=True)
class LatentPartition:
    """Ordered, named decomposition of a latent vector into factors.

    ``segments`` is a tuple of (name, dim) pairs; the latent code is the
    concatenation of the segments in this order.
    """

    segments: tuple[tuple[str, int], ...]

    def __post_init__(self):
        segs = tuple((str(n), int(d)) for n, d in self.segments)
        object.__setattr__(self, "segments", segs)
        names = [n for n, _ in segs]
        if len(set(names)) != len(names):
            raise DimensionError(f"duplicate segment names in {names}")
        if any(d <= 0 for _, d in segs):
            raise DimensionError(f"segment dims must be positive: {segs}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.segments)

    @property
    def total_dim(self) -> int:
        return sum(d for _, d in self.segments)

    def dim_of(self, name: str) -> int:
        for n, d in self.segments:
            if n == name:
                return d
        raise KeyError(f"unknown segment {name!r}; have {self.names}")

    def slice_of(self, name: str) -> slice:
        start = 0
        for n, d in self.segments:
            if n == name:
                return slice(start, start + d)
            start += d
        raise KeyError(f"unknown segment {name!r}; have {self.names}")

    def to_dict(self) -> list[list]:
        return [[n, d] for n, d in self.segments]

    @staticmethod
    def from_dict(data) -> "LatentPartition":
        return LatentPartition(tuple((n, d) for n, d in data))


@dataclass(frozen=True)
class LatentCode:
    """A concrete latent vector (or batch of them) plus its partition."""

    values: Tensor
    partition: LatentPartition = field(compare=False)

    def __post_init__(self):
        if self.values.shape[-1] != self.partition.total_dim:
            raise DimensionError(
                f"code dim {self.values.shape[-1]} != partition total "
                f"{self.partition.total_dim}"
            )

    def get(self, name: str) -> Tensor:
        return self.values[..., self.partition.slice_of(name)]


def concat_latent(parts: Sequence[Tensor], partition: LatentPartition) -> LatentCode:
    """Lay out per-segment vectors into one code, in partition order."""
    if len(parts) != len(partition.segments):
        raise DimensionError(
            f"{len(parts)} parts for {len(partition.segments)} segments"
        )
    for part, (name, dim) in zip(parts, partition.segments):
        if part.shape[-1] != dim:
            raise DimensionError(
                f"segment {name!r} expects dim {dim}, got {part.shape[-1]}"
            )
    return LatentCode(torch.cat(list(parts), dim=-1), partition)


def split_latent(code: LatentCode, name: str) -> Tensor:
    """Contiguous slice of the code for one named segment (a view)."""
    return code.get(name)
