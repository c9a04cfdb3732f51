"""Encoder / residual / decoder restoration networks with feature taps.

A tap is the output of one residual block. Taps are indexed from 0 and are
where defenses intercept features for distillation.
"""
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from . import data, parse, validate
from .errors import ConfigurationError, FormatError, NumericError, ShapeError
from .tensor import DTYPE

logger = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

TapTransform = Callable[[int, torch.Tensor], torch.Tensor]


class Tap(NamedTuple):
    index: int
    feature: torch.Tensor


TapBundle = List[Tap]


@dataclass(frozen=True)
class NetworkArch:
    """Shape of a restoration network."""

    in_channels: int = 1
    channels: int = 16
    num_res_blocks: int = 4
    kernel_size: int = 3
    nonlinearity: str = "relu"

    def __post_init__(self) -> None:
        if self.num_res_blocks < 1:
            raise ConfigurationError("A network needs at least one residual block.")

        if self.in_channels < 1 or self.channels < 1:
            raise ConfigurationError("Channel counts must be positive.", asdict(self))

        if self.kernel_size % 2 != 1:
            raise ConfigurationError("Kernel size must be odd.", asdict(self))

        if self.nonlinearity not in ("relu", "identity"):
            raise ConfigurationError(
                f"Unknown nonlinearity '{self.nonlinearity}'.", asdict(self)
            )

    def parameter_count(self) -> int:
        kk = self.kernel_size**2
        c, i = self.channels, self.in_channels

        head = i * c * kk + c
        block = 2 * (c * c * kk + c)
        tail = c * i * kk + i

        return head + self.num_res_blocks * block + tail

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "NetworkArch":
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int, act: nn.Module) -> None:
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.act = act

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class RestorationNet(nn.Module):
    """Head conv, residual blocks and a tail conv with a global skip."""

    def __init__(self, arch: NetworkArch) -> None:
        super().__init__()
        self.arch = arch

        pad = arch.kernel_size // 2
        act = nn.ReLU() if arch.nonlinearity == "relu" else nn.Identity()

        self.head = nn.Conv2d(arch.in_channels, arch.channels, arch.kernel_size, padding=pad)
        self.blocks = nn.ModuleList(
            ResidualBlock(arch.channels, arch.kernel_size, act)
            for _ in range(arch.num_res_blocks)
        )
        self.tail = nn.Conv2d(arch.channels, arch.in_channels, arch.kernel_size, padding=pad)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.arch.in_channels:
            raise ShapeError(
                f"Expected input of shape (B, {self.arch.in_channels}, H, W).",
                list(x.shape),
            )

    def forward(
        self, x: torch.Tensor, tap_transform: Optional[TapTransform] = None
    ) -> Tuple[torch.Tensor, TapBundle]:
        """Restore ``x`` and capture every residual block output.

        Args:
            x (torch.Tensor): Image batch (B, in_channels, H, W).
            tap_transform (Optional[TapTransform]): Replaces the feature that
            continues through the network after each tap. Captured taps are
            always the features before the transform.

        Returns:
            Tuple[torch.Tensor, TapBundle]: Restored image and taps.
        """
        self._check_input(x)

        taps: TapBundle = []
        feature = self.head(x)

        for index, block in enumerate(self.blocks):
            feature = block(feature)
            taps.append(Tap(index, feature))

            if tap_transform is not None:
                feature = tap_transform(index, feature)

        return x + self.tail(feature), taps

    def forward_from(self, index: int, feature: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Run the network from tap ``index`` onwards; ``x`` feeds the global skip."""
        if not 0 <= index < len(self.blocks):
            raise ConfigurationError(
                f"Tap index {index} out of range.", {"taps": len(self.blocks)}
            )

        for block in list(self.blocks)[index + 1:]:
            feature = block(feature)

        return x + self.tail(feature)


def init_network(arch: NetworkArch, seed: int) -> RestorationNet:
    """Build a float64 network with fan-in scaled uniform weights.

    The tail conv starts at zero so a fresh network is the identity map.
    """
    net = RestorationNet(arch).to(DTYPE)
    gen = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        for module in net.modules():
            if not isinstance(module, nn.Conv2d):
                continue

            if module is net.tail:
                module.weight.zero_()
                module.bias.zero_()
                continue

            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)

            module.weight.copy_(
                (torch.rand(module.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound
            )
            module.bias.copy_(
                (torch.rand(module.bias.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound
            )

    return net


def flat_params(net: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(net.parameters()).detach()


def parameter_hash(net: nn.Module) -> str:
    """SHA-256 of the float64 little-endian parameter vector."""
    vec = flat_params(net).to(DTYPE).numpy().astype("<f8")
    return hashlib.sha256(vec.tobytes()).hexdigest()


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            "Loss operands must have the same shape.",
            {"a": list(a.shape), "b": list(b.shape)},
        )


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b)
    return F.l1_loss(a, b)


def l2_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b)
    return F.mse_loss(a, b)


def _check_grads(grads: List[torch.Tensor]) -> None:
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NumericError("Non-finite gradient.")


def grad(net: nn.Module, loss_closure: Callable[[], torch.Tensor]) -> torch.Tensor:
    """Exact gradient of a scalar loss with respect to all parameters.

    Returns:
        torch.Tensor: Flat gradient ordered like ``net.parameters()``.
    """
    params = list(net.parameters())

    with torch.enable_grad():
        loss = loss_closure()

        if not bool(torch.isfinite(loss)):
            raise NumericError("Non-finite loss.", {"loss": float(loss)})

        if not loss.requires_grad:
            return torch.zeros_like(flat_params(net))

        grads = torch.autograd.grad(loss, params, allow_unused=True)

    filled = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    _check_grads(filled)

    return torch.cat([g.reshape(-1) for g in filled])


def input_grad(loss_tail: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar loss with respect to a feature map."""
    point = x.detach().clone().requires_grad_(True)

    with torch.enable_grad():
        (g,) = torch.autograd.grad(loss_tail(point), point)

    _check_grads([g])
    return g


def make_optimizer(net: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=lr, betas=BETAS, eps=ADAM_EPS)


def adam_step(optimizer: torch.optim.Adam, net: nn.Module, grads: torch.Tensor) -> torch.Tensor:
    """Apply one Adam update from a flat gradient vector.

    Returns:
        torch.Tensor: The updated flat parameter vector.
    """
    offset = 0
    for p in net.parameters():
        size = p.numel()
        p.grad = grads[offset: offset + size].view_as(p).clone()
        offset += size

    optimizer.step()
    optimizer.zero_grad(set_to_none=True)

    return flat_params(net)


def to_file_precision(net: nn.Module) -> str:
    """Round parameters to float32 in place; returns the new parameter hash."""
    rounded = flat_params(net).to(torch.float32).to(DTYPE)

    with torch.no_grad():
        nn.utils.vector_to_parameters(rounded, net.parameters())

    return parameter_hash(net)


def save_checkpoint(net: RestorationNet, path: str, seed: int) -> str:
    """Write parameters as a TensorFile plus a JSON manifest.

    The file stores float32, so the parameters are rounded to float32 in
    place first; the network in memory then equals the one on disk.

    Returns:
        str: The parameter hash recorded in the manifest.
    """
    digest = to_file_precision(net)
    data.save_tensor(path + ".tensor", flat_params(net))

    manifest = {
        "arch": net.arch.to_dict(),
        "seed": seed,
        "parameters": [
            {"name": name, "shape": list(p.shape)} for name, p in net.named_parameters()
        ],
        "sha256": digest,
    }

    validate.document(manifest, validate.OutputValidators.CHECKPOINT)

    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    logger.info("checkpoint written path=%s sha256=%s", path, digest[:12])
    return digest


def load_checkpoint(path: str) -> Tuple[RestorationNet, Dict[str, Any]]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    base = path[: -len(".json")] if path.endswith(".json") else path

    if not os.path.isfile(base + ".json"):
        raise ConfigurationError(f"Checkpoint manifest {base}.json not found.")

    with open(base + ".json", "r") as f:
        manifest = parse.document(f.read())

    validate.document(manifest, validate.OutputValidators.CHECKPOINT)
    net = RestorationNet(NetworkArch.from_dict(manifest["arch"])).to(DTYPE)
    vec = data.load_tensor(base + ".tensor")

    if vec.numel() != net.arch.parameter_count():
        raise ConfigurationError(
            "Checkpoint size does not match its architecture.",
            {"expected": net.arch.parameter_count(), "actual": vec.numel()},
        )

    nn.utils.vector_to_parameters(vec.to(DTYPE), net.parameters())

    if parameter_hash(net) != manifest["sha256"]:
        raise FormatError("Checkpoint parameters do not match their recorded hash.", base)

    return net, manifest
