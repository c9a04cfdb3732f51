"""Matricization, SVD and norms of feature maps.

Feature maps are float64 ``torch.Tensor`` values of shape (B, C, H, W) or
(C, H, W). A batch element is matricized into an (H*W) x C matrix whose rows
are pixels and whose columns are channels.
"""
from typing import NamedTuple, Tuple

import torch

from .errors import NumericError, ShapeError

DTYPE = torch.float64


class Matricized(NamedTuple):
    """Per batch element (H*W) x C matrices plus the dims they came from."""

    matrices: torch.Tensor
    origin: Tuple[int, ...]

    @property
    def m(self) -> int:
        return self.matrices.shape[-2]

    @property
    def n(self) -> int:
        return self.matrices.shape[-1]


class SVDFactors(NamedTuple):
    """Thin SVD factors, batched over leading dimensions.

    ``U`` is (..., m, r), ``sigma`` is (..., r) in descending order and ``V``
    is (..., n, r), with r = min(m, n).
    """

    U: torch.Tensor
    sigma: torch.Tensor
    V: torch.Tensor

    @property
    def rank(self) -> int:
        return self.sigma.shape[-1]


def check_finite(x: torch.Tensor, what: str = "tensor") -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"Non-finite values in {what}.")


def matricize(t: torch.Tensor) -> Matricized:
    """Reshape a feature map into one (H*W) x C matrix per batch element.

    Args:
        t (torch.Tensor): Feature map of rank 4 (B, C, H, W) or rank 3
        (C, H, W), the latter treated as a batch of one.

    Raises:
        ShapeError: If the rank is not 3 or 4.

    Returns:
        Matricized: Matrices of shape (B, H*W, C) and the original dims.
    """
    if t.dim() not in (3, 4):
        raise ShapeError(
            f"Feature map must have rank 3 or 4, got rank {t.dim()}.",
            list(t.shape),
        )

    origin = tuple(t.shape)
    batched = t if t.dim() == 4 else t.unsqueeze(0)
    b, c, h, w = batched.shape

    matrices = batched.permute(0, 2, 3, 1).reshape(b, h * w, c)

    return Matricized(matrices=matrices, origin=origin)


def dematricize(m: Matricized) -> torch.Tensor:
    """Exact inverse of :func:`matricize`."""
    origin = m.origin

    if len(origin) not in (3, 4):
        raise ShapeError("Origin dims must have rank 3 or 4.", list(origin))

    b, c, h, w = origin if len(origin) == 4 else (1, *origin)

    if tuple(m.matrices.shape) != (b, h * w, c):
        raise ShapeError(
            "Matrix shape does not match origin dims.",
            {"matrices": list(m.matrices.shape), "origin": list(origin)},
        )

    t = m.matrices.reshape(b, h, w, c).permute(0, 3, 1, 2).contiguous()

    return t if len(origin) == 4 else t.squeeze(0)


def _fix_signs(U: torch.Tensor, V: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    # First nonzero entry of every U column is made nonnegative.
    nonzero = U != 0
    first = torch.argmax(nonzero.to(torch.int8), dim=-2, keepdim=True)
    lead = torch.gather(U, -2, first)
    signs = 1.0 - 2.0 * (lead < 0).to(U.dtype)

    return U * signs, V * signs


def svd(x: torch.Tensor) -> SVDFactors:
    """Thin SVD with a deterministic sign convention.

    Args:
        x (torch.Tensor): Matrix (m, n) or batch of matrices (..., m, n).

    Raises:
        NumericError: If the input holds NaN or Inf.

    Returns:
        SVDFactors: U, descending sigma and V such that x = U diag(sigma) V^T.
    """
    if x.dim() < 2:
        raise ShapeError("SVD needs at least a 2-D input.", list(x.shape))

    check_finite(x, "SVD input")

    U, sigma, Vh = torch.linalg.svd(x.to(DTYPE), full_matrices=False)
    U, V = _fix_signs(U, Vh.transpose(-2, -1))

    return SVDFactors(U=U, sigma=sigma, V=V)


def frobenius_norm_sq(x: torch.Tensor) -> float:
    """Sum of squared entries of a matrix or tensor."""
    check_finite(x)
    return float(torch.sum(x.to(DTYPE) ** 2))
