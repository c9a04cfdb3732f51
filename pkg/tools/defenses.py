"""Baseline feature-space defenses behind one dual-path interface.

Every defense returns a :class:`DualPathOutput` whose clean field is the
untouched input; only the protected field is perturbed.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Literal, Optional, Tuple

import torch

from . import asvp
from .asvp import ASVPConfig, DualPathOutput
from .errors import ConfigurationError, NumericError
from .tensor import frobenius_norm_sq

logger = logging.getLogger(__name__)

Kind = Literal["none", "asvp", "noise", "drop_channel", "adversarial"]
Intensity = Literal["low", "high", "custom"]
LossTail = Callable[[torch.Tensor], torch.Tensor]

KINDS = ("none", "asvp", "noise", "drop_channel", "adversarial")
INTENSITIES = ("low", "high", "custom")

# Presets for the low/high rows. Noise stddev and PGD radius are relative
# to the standard deviation of the feature map being defended.
PRESETS: Dict[str, Dict[str, Dict[str, float]]] = {
    "noise": {"low": {"rel_std": 0.1}, "high": {"rel_std": 1.0}},
    "drop_channel": {"low": {"p": 0.1}, "high": {"p": 0.5}},
    "adversarial": {
        "low": {"steps": 3, "rel_eps": 0.05},
        "high": {"steps": 3, "rel_eps": 0.5},
    },
    "asvp": {"low": {"h": 1e2, "k_ratio": 0.4}, "high": {"h": 1e3, "k_ratio": 0.6}},
}

# Each kind needs one parameter out of every group, from a preset or from
# ``params``.
REQUIRED: Dict[str, Tuple[Tuple[str, ...], ...]] = {
    "noise": (("std", "rel_std"),),
    "drop_channel": (("p",),),
    "adversarial": (("eps", "rel_eps"),),
    "asvp": (("h",), ("k_ratio",)),
}

LABELS = {
    "none": "none",
    "asvp": "asvp",
    "noise": "noise",
    "drop_channel": "dropC",
    "adversarial": "adv",
}


@dataclass(frozen=True)
class DefenseSpec:
    """One defense row: its kind, intensity preset, parameters and seed.

    Parameters not given explicitly come from :data:`PRESETS` for the
    intensity. ``legacy`` routes the perturbed feature into the defended
    model's own forward path as well.
    """

    kind: Kind = "none"
    intensity: Intensity = "custom"
    params: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    legacy: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"Unknown defense kind '{self.kind}'.")

        if self.intensity not in INTENSITIES:
            raise ConfigurationError(
                f"Unknown defense intensity '{self.intensity}'."
            )

        resolved = self.resolved()
        self._check_required(resolved)

        if self.kind == "noise":
            std = resolved.get("std", resolved.get("rel_std"))
            if std < 0:
                raise ConfigurationError("Noise stddev must be nonnegative.", resolved)

        elif self.kind == "drop_channel":
            if not 0.0 <= resolved["p"] <= 1.0:
                raise ConfigurationError("Drop rate p must lie in [0, 1].", resolved)

        elif self.kind == "adversarial":
            eps = resolved.get("eps", resolved.get("rel_eps"))
            if resolved.get("steps", 0) < 0 or eps < 0:
                raise ConfigurationError(
                    "Adversarial steps and radius must be nonnegative.", resolved
                )

        elif self.kind == "asvp":
            self.asvp_config()

    def _check_required(self, resolved: Dict[str, Any]) -> None:
        for group in REQUIRED.get(self.kind, ()):
            if any(name in resolved for name in group):
                continue

            if self.kind == "asvp":
                raise ConfigurationError(
                    "ASVP defense needs 'h' and 'k_ratio'.", dict(resolved)
                )

            raise ConfigurationError(
                f"Defense '{self.kind}' needs one of {list(group)} or a low/high intensity.",
                dict(resolved),
            )

    def resolved(self) -> Dict[str, Any]:
        """Preset parameters for the intensity, overridden by ``params``."""
        preset = PRESETS.get(self.kind, {}).get(self.intensity, {})
        return {**preset, **self.params}

    def asvp_config(self) -> ASVPConfig:
        resolved = self.resolved()

        if "h" not in resolved or "k_ratio" not in resolved:
            raise ConfigurationError(
                "ASVP defense needs 'h' and 'k_ratio'.", dict(resolved)
            )

        return ASVPConfig(
            h=float(resolved["h"]),
            k_ratio=float(resolved["k_ratio"]),
            mode=resolved.get("mode", "full"),
        )

    @property
    def label(self) -> str:
        """Short row name such as ``noise-L``, ``dropC-H`` or ``asvp``."""
        base = LABELS[self.kind]

        if self.kind == "asvp":
            mode = self.resolved().get("mode", "full")
            base = "asvp-trunc" if mode == "truncated" else base

        if self.kind not in ("none", "asvp") and self.intensity != "custom":
            base = f"{base}-{self.intensity[0].upper()}"

        return f"{base}-legacy" if self.legacy else base

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DefenseSpec":
        return cls(
            kind=data.get("kind", "none"),
            intensity=data.get("intensity", "custom"),
            params=dict(data.get("params", {})),
            seed=int(data.get("seed", 0)),
            legacy=bool(data.get("legacy", False)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "intensity": self.intensity,
            "params": dict(self.params),
            "seed": self.seed,
            "legacy": self.legacy,
        }


@dataclass
class DefenseContext:
    """Call-site information some defenses need.

    Attributes:
        loss_tail: Differentiable map from a feature map to a scalar that
        PGD ascends.
        seed_offset: Mixed into the defense's own seed so successive calls within a
        run draw fresh but reproducible randomness.
    """

    loss_tail: Optional[LossTail] = None
    seed_offset: int = 0


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def gaussian_noise(x: torch.Tensor, std: float, seed: int) -> torch.Tensor:
    """Add iid Normal(0, std^2) noise drawn from a generator seeded by ``seed``."""
    if std < 0:
        raise ConfigurationError("Noise stddev must be nonnegative.", {"std": std})

    if std == 0:
        return x.clone()

    z = torch.randn(x.shape, generator=_generator(seed), dtype=x.dtype)
    return x + std * z


def channel_dropout(x: torch.Tensor, p: float, seed: int) -> torch.Tensor:
    """Zero each channel of each batch element with probability ``p``.

    Surviving channels are not rescaled.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError("Drop rate p must lie in [0, 1].", {"p": p})

    batched = x if x.dim() == 4 else x.unsqueeze(0)
    b, c = batched.shape[:2]

    draws = torch.rand((b, c, 1, 1), generator=_generator(seed), dtype=x.dtype)
    keep = (draws >= p).to(x.dtype)

    out = batched * keep
    return out if x.dim() == 4 else out.squeeze(0)


def adversarial_perturb(
    x: torch.Tensor,
    loss_tail: LossTail,
    steps: int,
    step_size: float,
    eps: float,
) -> torch.Tensor:
    """Signed-gradient ascent of ``loss_tail`` projected onto the l-inf ball.

    Args:
        x (torch.Tensor): Feature map to perturb.
        loss_tail (LossTail): Differentiable scalar objective.
        steps (int): Number of PGD iterations.
        step_size (float): Step size of each signed-gradient move.
        eps (float): Radius of the l-inf ball around ``x``.

    Raises:
        NumericError: If a gradient holds NaN or Inf.

    Returns:
        torch.Tensor: Perturbed feature map within ``eps`` of ``x``.
    """
    origin = x.detach()
    adv = origin.clone()

    if steps == 0 or eps == 0:
        return adv

    lower, upper = origin - eps, origin + eps

    for step in range(steps):
        adv.requires_grad_(True)

        with torch.enable_grad():
            loss = loss_tail(adv)
            (grad,) = torch.autograd.grad(loss, adv)

        if not bool(torch.isfinite(grad).all()):
            raise NumericError(
                "Non-finite gradient during PGD.", {"step": step}
            )

        adv = adv.detach() + step_size * torch.sign(grad)
        adv = torch.max(torch.min(adv, upper), lower)

    return adv


def alignment_loss_tail(student_feature: torch.Tensor) -> LossTail:
    """Loss tail maximising the student's feature-alignment error."""
    target = student_feature.detach()

    def loss(feature: torch.Tensor) -> torch.Tensor:
        return torch.mean((feature - target) ** 2)

    return loss


def _feature_std(x: torch.Tensor) -> float:
    return float(torch.std(x.detach(), unbiased=False))


def apply_defense(
    spec: DefenseSpec,
    x: torch.Tensor,
    ctx: Optional[DefenseContext] = None,
) -> DualPathOutput:
    """Apply a defense to the protected path of a feature map.

    Args:
        spec (DefenseSpec): The defense to apply.
        x (torch.Tensor): The clean feature map; returned untouched.
        ctx (Optional[DefenseContext]): Loss tail for PGD and seed offset.

    Raises:
        ConfigurationError: If an adversarial defense has no loss tail.

    Returns:
        DualPathOutput: The clean map, the defended copy and its distance
        energy from the clean map.
    """
    ctx = ctx or DefenseContext()
    params = spec.resolved()
    seed = spec.seed + ctx.seed_offset

    if spec.kind == "none":
        return DualPathOutput(clean=x, protected=x, energy=0.0)

    if spec.kind == "asvp":
        return asvp.perturb_feature(x, spec.asvp_config())

    if spec.kind == "noise":
        std = params["std"] if "std" in params else params["rel_std"] * _feature_std(x)
        protected = gaussian_noise(x, std, seed)

    elif spec.kind == "drop_channel":
        protected = channel_dropout(x, float(params["p"]), seed)

    else:
        if ctx.loss_tail is None:
            raise ConfigurationError(
                "Adversarial defense needs a loss tail in its context."
            )

        steps = int(params.get("steps", 3))
        eps = params["eps"] if "eps" in params else params["rel_eps"] * _feature_std(x)
        step_size = params.get("step_size", eps / steps if steps else 0.0)
        protected = adversarial_perturb(x, ctx.loss_tail, steps, step_size, eps)

    energy = frobenius_norm_sq(protected - x)

    return DualPathOutput(clean=x, protected=protected, energy=energy)
