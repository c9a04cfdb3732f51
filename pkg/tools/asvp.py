"""Adaptive singular value perturbation of feature maps.

The clean feature map continues through the model untouched while a
protected copy, whose top-k singular values are scaled by ``h``, is the only
thing exposed to a distilling student.
"""
import logging
import math
from dataclasses import dataclass
from typing import Literal

import torch

from .errors import ConfigurationError, NumericError
from .tensor import (
    DTYPE,
    Matricized,
    SVDFactors,
    check_finite,
    dematricize,
    matricize,
    svd,
)

logger = logging.getLogger(__name__)

Mode = Literal["full", "truncated"]

# Smallest amplification the defense was characterised with.
STUDIED_MIN_H = 1e2

# LAPACK allows 30 implicit QL/QR sweeps per eigenvalue.
EIGH_SWEEPS_PER_VALUE = 30


@dataclass(frozen=True)
class ASVPConfig:
    """Amplification factor ``h`` and fraction ``k_ratio`` of amplified values."""

    h: float
    k_ratio: float
    mode: Mode = "full"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.h) and self.h > 0):
            raise ConfigurationError(
                "Amplification factor h must be a positive real.", {"h": self.h}
            )

        if not 0.0 <= self.k_ratio <= 1.0:
            raise ConfigurationError(
                "k_ratio must lie in [0, 1].", {"k_ratio": self.k_ratio}
            )

        if self.mode not in ("full", "truncated"):
            raise ConfigurationError(
                f"Unknown ASVP mode '{self.mode}'.", {"mode": self.mode}
            )

    def k_for(self, r: int) -> int:
        """Number of amplified singular values for a spectrum of length r."""
        k = math.ceil(self.k_ratio * r - 1e-9)
        return min(max(k, 0), r)

    @property
    def in_studied_regime(self) -> bool:
        return self.h >= STUDIED_MIN_H


@dataclass(frozen=True)
class DualPathOutput:
    """Clean feature for the model, protected feature for the student."""

    clean: torch.Tensor
    protected: torch.Tensor
    energy: float


def amplify_spectrum(f: SVDFactors, cfg: ASVPConfig) -> SVDFactors:
    """Scale the first k singular values by h, leaving U and V alone.

    The spectrum is not re-sorted, so with h < 1 it follows the original
    ordering.
    """
    k = cfg.k_for(f.rank)

    sigma = f.sigma.clone()
    sigma[..., :k] = sigma[..., :k] * cfg.h

    return SVDFactors(U=f.U, sigma=sigma, V=f.V)


def reconstruct(f: SVDFactors) -> torch.Tensor:
    """Return U diag(sigma) V^T."""
    return (f.U * f.sigma.unsqueeze(-2)) @ f.V.transpose(-2, -1)


def perturbation_energy(sigma: torch.Tensor, k: int, h: float) -> float:
    """Injected energy (h - 1)^2 * sum of the first k squared singular values.

    ``sigma`` may be batched; the energies of all batch elements are summed.
    """
    if k > sigma.shape[-1]:
        raise ConfigurationError(
            "k exceeds the spectrum length.", {"k": k, "r": sigma.shape[-1]}
        )

    top = sigma[..., :k].to(DTYPE)
    return float((h - 1.0) ** 2 * torch.sum(top**2))


def _warn_regime(cfg: ASVPConfig) -> None:
    if cfg.h < 1.0:
        logger.warning("asvp h=%g below 1 is outside the studied regime", cfg.h)


def perturb_feature(x: torch.Tensor, cfg: ASVPConfig) -> DualPathOutput:
    """Dual-path ASVP with a full SVD per batch element.

    Args:
        x (torch.Tensor): Feature map of rank 3 or 4.
        cfg (ASVPConfig): Amplification settings.

    Returns:
        DualPathOutput: ``clean`` is ``x`` itself; ``protected`` is rebuilt
        from the amplified spectrum; ``energy`` sums the injected energy
        over the batch.
    """
    if cfg.mode == "truncated":
        return perturb_feature_truncated(x, cfg)

    _warn_regime(cfg)

    mat = matricize(x)
    factors = svd(mat.matrices)
    amplified = amplify_spectrum(factors, cfg)

    protected = dematricize(Matricized(reconstruct(amplified), mat.origin))
    energy = perturbation_energy(factors.sigma, cfg.k_for(factors.rank), cfg.h)

    return DualPathOutput(clean=x, protected=protected.to(x.dtype), energy=energy)


def perturb_feature_truncated(x: torch.Tensor, cfg: ASVPConfig) -> DualPathOutput:
    """Dual-path ASVP that only resolves the leading k singular directions.

    The leading directions come from the eigendecomposition of the smaller
    Gram matrix. The low-rank delta (h - 1) U_k Sigma_k V_k^T is then added to
    the clean copy, so the residual spectrum is carried over exactly.
    """
    _warn_regime(cfg)

    mat = matricize(x)
    X = mat.matrices.to(DTYPE)
    check_finite(X, "feature map")

    r = min(mat.m, mat.n)
    k = cfg.k_for(r)

    if k == 0 or cfg.h == 1.0:
        return DualPathOutput(clean=x, protected=x.clone(), energy=0.0)

    tall = mat.m >= mat.n
    Xt = X.transpose(-2, -1)
    gram = Xt @ X if tall else X @ Xt

    try:
        eigvals, eigvecs = torch.linalg.eigh(gram)
    except RuntimeError as e:
        raise NumericError(
            "Symmetric eigensolver did not converge within its iteration budget.",
            {
                "solver": "torch.linalg.eigh",
                "gram_size": gram.shape[-1],
                "iteration_budget": EIGH_SWEEPS_PER_VALUE * gram.shape[-1],
            },
        ) from e

    # eigh returns ascending order; keep the largest k.
    basis = eigvecs[..., -k:]
    top_sq = torch.clamp(eigvals[..., -k:], min=0.0)

    projector = basis @ basis.transpose(-2, -1)
    low_rank = X @ projector if tall else projector @ X

    delta = (cfg.h - 1.0) * low_rank
    protected = x + dematricize(Matricized(delta, mat.origin)).to(x.dtype)
    energy = float((cfg.h - 1.0) ** 2 * torch.sum(top_sq))

    return DualPathOutput(clean=x, protected=protected, energy=energy)


def subspace_energy_fraction(delta: torch.Tensor, reference: torch.Tensor, k: int) -> float:
    """Share of a feature delta lying in the top-k singular subspaces.

    Both maps are matricized; the delta is projected onto the span of the
    reference's leading k left and right singular vectors (U_k U_k^T D V_k
    V_k^T) and the ratio of squared norms is returned.
    """
    D = matricize(delta).matrices.to(DTYPE)
    factors = svd(matricize(reference).matrices)

    Uk = factors.U[..., :k]
    Vk = factors.V[..., :k]
    projected = Uk @ (Uk.transpose(-2, -1) @ D @ Vk) @ Vk.transpose(-2, -1)

    total = float(torch.sum(D**2))
    if total == 0.0:
        return 0.0

    return float(torch.sum(projected**2)) / total
