"""Teacher training, defended knowledge distillation and stage ablation."""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import analysis, nn
from .analysis import Metrics
from .data import Dataset, DegradationSpec, Splits
from .defenses import (
    DefenseContext,
    DefenseSpec,
    LossTail,
    alignment_loss_tail,
    apply_defense,
)
from .asvp import DualPathOutput
from .errors import ConfigurationError, NumericError, TrainingError
from .nn import NetworkArch, RestorationNet, TapBundle

logger = logging.getLogger(__name__)

STAGES = ("none", "early", "mid", "late", "all")

# A defense counts as effective when the student loses this much.
EFFECTIVE_PSNR_DROP_DB = 1.5
EFFECTIVE_SSIM_DROP = 0.1

TapSelection = Union[str, Tuple[int, ...]]

# Samples per no-grad forward when scoring whole datasets.
CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training or distillation run."""

    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    lambda_align: float = 1.0
    taps: TapSelection = "all"
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    task: DegradationSpec = field(default_factory=DegradationSpec)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1.", {"epochs": self.epochs})

        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1.")

        if not self.lr > 0:
            raise ConfigurationError("lr must be positive.", {"lr": self.lr})

        if self.lambda_align < 0:
            raise ConfigurationError("lambda_align must be nonnegative.")

        if isinstance(self.taps, str) and self.taps not in STAGES:
            raise ConfigurationError(f"Unknown tap selection '{self.taps}'.")

    @classmethod
    def from_dict(cls, d: Dict[str, Any], **overrides: Any) -> "TrainConfig":
        taps = d.get("taps", "all")
        values = dict(
            epochs=int(d.get("epochs", 40)),
            batch_size=int(d.get("batch_size", 16)),
            lr=float(d.get("lr", 1e-4)),
            seed=int(d.get("seed", 0)),
            lambda_align=float(d.get("lambda_align", 1.0)),
            taps=taps if isinstance(taps, str) else tuple(int(i) for i in taps),
            defense=DefenseSpec.from_dict(d.get("defense", {})),
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
            "lambda_align": self.lambda_align,
            "taps": self.taps if isinstance(self.taps, str) else list(self.taps),
            "defense": self.defense.to_dict(),
            "task": self.task.to_dict(),
        }


@dataclass
class RunRecord:
    """Everything reported about one run."""

    label: str
    config: Dict[str, Any]
    initial_loss: float
    epoch_losses: List[float]
    metrics: Metrics
    wall_seconds: float
    network_hash: str
    teacher_hash: Optional[str] = None
    teacher_metrics: Optional[Metrics] = None
    energy_per_tap: Dict[int, float] = field(default_factory=dict)
    in_studied_regime: Optional[bool] = None

    @property
    def mean_energy(self) -> float:
        if not self.energy_per_tap:
            return 0.0
        return float(np.mean(list(self.energy_per_tap.values())))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["energy_per_tap"] = {str(k): v for k, v in self.energy_per_tap.items()}
        return d


class DefendedPass(NamedTuple):
    output: torch.Tensor
    taps: TapBundle
    defended: Dict[int, DualPathOutput]


def pair_taps(student_taps: int, teacher_taps: int) -> List[Tuple[int, int]]:
    """Map student tap i to teacher tap round(i (T - 1) / (S - 1))."""
    if student_taps == 1:
        return [(0, teacher_taps - 1)]

    scale = (teacher_taps - 1) / (student_taps - 1)
    return [(i, int(math.floor(i * scale + 0.5))) for i in range(student_taps)]


def select_pairs(pairs: Sequence[Tuple[int, int]], selection: TapSelection) -> List[Tuple[int, int]]:
    """Restrict tap pairs to a stage or an explicit set of student taps.

    Early, mid and late are the first, middle and last of three contiguous
    groups of the pairs.
    """
    if isinstance(selection, str):
        if selection == "none":
            return []
        if selection == "all":
            return list(pairs)

        groups = np.array_split(np.arange(len(pairs)), 3)
        chosen = groups[("early", "mid", "late").index(selection)]
        return [pairs[i] for i in chosen]

    valid = {s for s, _ in pairs}
    unknown = sorted(set(selection) - valid)

    if unknown:
        raise ConfigurationError(
            "Tap indices out of range for the student.", {"indices": unknown}
        )

    return [p for p in pairs if p[0] in set(selection)]


def defended_forward(
    net: RestorationNet,
    x: torch.Tensor,
    spec: DefenseSpec,
    tap_indices: Sequence[int],
    contexts: Optional[Dict[int, DefenseContext]] = None,
    target: Optional[torch.Tensor] = None,
) -> DefendedPass:
    """Forward pass with a defense on the listed taps.

    Without ``spec.legacy`` the network continues on the clean features, so
    its output is exactly the undefended output. With it, every tap is
    defended and the protected features continue through the network.
    Taps without a context get the task loss tail as PGD objective, measured
    against ``target`` or else the undefended output.
    """
    contexts = contexts or {}
    defended: Dict[int, DualPathOutput] = {}
    reference: Dict[str, torch.Tensor] = {}

    if target is not None:
        reference["output"] = target

    def context(index: int) -> DefenseContext:
        if index in contexts:
            return contexts[index]

        if spec.kind != "adversarial":
            return DefenseContext(seed_offset=index)

        if "output" not in reference:
            with torch.no_grad():
                reference["output"] = net(x)[0]

        return DefenseContext(
            loss_tail=task_loss_tail(net, index, x, reference["output"]),
            seed_offset=index,
        )

    if not spec.legacy or spec.kind == "none":
        output, taps = net(x)
        reference.setdefault("output", output.detach())

        for i in tap_indices:
            defended[i] = apply_defense(spec, taps[i].feature, context(i))

        return DefendedPass(output, taps, defended)

    def transform(index: int, feature: torch.Tensor) -> torch.Tensor:
        defended[index] = apply_defense(spec, feature, context(index))
        return defended[index].protected

    output, taps = net(x, tap_transform=transform)
    return DefendedPass(output, taps, defended)


def task_loss_tail(
    net: RestorationNet, index: int, x: torch.Tensor, reference: torch.Tensor
) -> LossTail:
    """Loss tail running the rest of the network from tap ``index``.

    It is the L1 distance between the resulting output and ``reference``,
    the undefended output or a clean target.
    """
    target = reference.detach()

    def loss(feature: torch.Tensor) -> torch.Tensor:
        return nn.l1_loss(net.forward_from(index, feature, x), target)

    return loss


def _batches(n: int, batch_size: int, gen: torch.Generator) -> List[torch.Tensor]:
    order = torch.randperm(n, generator=gen)
    return list(torch.split(order, batch_size))


def evaluate(
    net: RestorationNet,
    dataset: Dataset,
    defense: Optional[DefenseSpec] = None,
    batch_size: int = 16,
) -> Metrics:
    """Mean PSNR/SSIM of the network's restorations on a dataset.

    With a defense the network runs through :func:`defended_forward`; only
    legacy defenses can change the result.
    """
    if len(dataset) == 0:
        raise ConfigurationError("Cannot evaluate on an empty dataset.")

    spec = defense or DefenseSpec()
    taps = range(net.arch.num_res_blocks)
    psnrs: List[float] = []
    ssims: List[float] = []
    fallback = False

    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            degraded = dataset.degraded[start: start + batch_size]
            clean = dataset.clean[start: start + batch_size]

            indices = taps if spec.kind != "none" else []
            output = defended_forward(net, degraded, spec, indices, target=clean).output

            for restored, truth in zip(output, clean):
                psnrs.append(analysis.psnr(restored, truth))
                result = analysis.structural_similarity(restored, truth)
                ssims.append(result.value)
                fallback = fallback or result.global_window

    return Metrics(
        psnr_db=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        per_sample_psnr=psnrs,
        per_sample_ssim=ssims,
        ssim_global_fallback=fallback,
    )


def _check_loss(loss: float, epoch: int, label: str) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"Training of {label} diverged at epoch {epoch}.", epoch)


def _mean_l1(net: RestorationNet, inputs: torch.Tensor, target_fn, chunk: int = CHUNK) -> float:
    """Mean L1 between ``net(x)`` and ``target_fn(x, start)`` over chunks of inputs."""
    total = 0.0

    with torch.no_grad():
        for start in range(0, inputs.shape[0], chunk):
            x = inputs[start: start + chunk]
            output, _ = net(x)
            total += float(torch.sum(torch.abs(output - target_fn(x, start))))

    return total / inputs.numel()


def train_teacher(
    cfg: TrainConfig, arch: NetworkArch, splits: Splits
) -> Tuple[RestorationNet, RunRecord]:
    """Train a teacher with L1 loss on (degraded, clean) pairs.

    Raises:
        ConfigurationError: If the config carries a defense.
        TrainingError: If the loss becomes non-finite.
    """
    if cfg.defense.kind != "none":
        raise ConfigurationError("Teachers are trained without a defense.")

    started = time.perf_counter()
    net = nn.init_network(arch, cfg.seed)
    optimizer = nn.make_optimizer(net, cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    train = splits.train

    initial = _mean_l1(net, train.degraded, lambda _, start: train.clean[start: start + CHUNK])
    epoch_losses: List[float] = []

    for epoch in range(cfg.epochs):
        losses = []

        for idx in _batches(len(train), cfg.batch_size, gen):
            x, y = train.degraded[idx], train.clean[idx]
            step_loss = {}

            def closure() -> torch.Tensor:
                output, _ = net(x)
                step_loss["value"] = nn.l1_loss(output, y)
                return step_loss["value"]

            try:
                grads = nn.grad(net, closure)
            except NumericError as e:
                raise TrainingError(f"Teacher training diverged at epoch {epoch}.", epoch) from e

            nn.adam_step(optimizer, net, grads)
            losses.append(step_loss["value"].detach().item())

        epoch_losses.append(float(np.mean(losses)))
        _check_loss(epoch_losses[-1], epoch, "teacher")
        logger.info("teacher epoch=%d loss=%.6f", epoch, epoch_losses[-1])

    digest = nn.to_file_precision(net)
    metrics = evaluate(net, splits.test)

    record = RunRecord(
        label="teacher",
        config={"train": cfg.to_dict(), "arch": arch.to_dict()},
        initial_loss=initial,
        epoch_losses=epoch_losses,
        metrics=metrics,
        wall_seconds=time.perf_counter() - started,
        network_hash=digest,
        teacher_hash=digest,
    )

    logger.info(
        "teacher trained psnr=%.4f ssim=%.4f hash=%s", metrics.psnr_db, metrics.ssim, digest[:12]
    )
    return net, record


def _step_offset(epoch: int, batch: int, tap: int) -> int:
    return (epoch * 1_000_003 + batch) * 131 + tap


def distill_student(
    teacher: RestorationNet,
    cfg: TrainConfig,
    arch: NetworkArch,
    splits: Splits,
    label: Optional[str] = None,
) -> Tuple[RestorationNet, RunRecord]:
    """Distil a student from a frozen teacher whose taps are defended.

    The student loss is L1 to the teacher output plus ``lambda_align`` times
    the mean L2 distance between selected student taps and the defended
    teacher taps they are paired with.

    Raises:
        ConfigurationError: If paired taps differ in shape.
        TrainingError: If the loss becomes non-finite.
    """
    started = time.perf_counter()
    label = label or cfg.defense.label
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)

    student = nn.init_network(arch, cfg.seed)
    optimizer = nn.make_optimizer(student, cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    train = splits.train

    pairs = select_pairs(
        pair_taps(arch.num_res_blocks, teacher.arch.num_res_blocks), cfg.taps
    )
    if pairs and arch.channels != teacher.arch.channels:
        raise ConfigurationError(
            "Paired student and teacher taps must have the same shape.",
            {"student_channels": arch.channels, "teacher_channels": teacher.arch.channels},
        )

    teacher_indices = sorted({t for _, t in pairs})
    defended_indices = teacher_indices if cfg.lambda_align > 0 else []
    energy_sum = {t: 0.0 for t in defended_indices}
    samples = 0

    initial = _mean_l1(student, train.degraded, lambda x, _: teacher(x)[0])

    epoch_losses: List[float] = []

    for epoch in range(cfg.epochs):
        losses = []

        for b, idx in enumerate(_batches(len(train), cfg.batch_size, gen)):
            x = train.degraded[idx]
            step_loss = {}

            def closure() -> torch.Tensor:
                s_out, s_taps = student(x)

                contexts = {
                    t: DefenseContext(
                        loss_tail=alignment_loss_tail(s_taps[s].feature),
                        seed_offset=_step_offset(epoch, b, t),
                    )
                    for s, t in pairs
                }

                with torch.no_grad():
                    passed = defended_forward(teacher, x, cfg.defense, defended_indices, contexts)

                loss = nn.l1_loss(s_out, passed.output)

                if defended_indices:
                    align = [
                        nn.l2_loss(s_taps[s].feature, passed.defended[t].protected.detach())
                        for s, t in pairs
                    ]
                    loss = loss + cfg.lambda_align * torch.stack(align).mean()

                    for t in defended_indices:
                        energy_sum[t] += passed.defended[t].energy

                step_loss["value"] = loss
                return loss

            try:
                grads = nn.grad(student, closure)
            except NumericError as e:
                raise TrainingError(f"Distillation diverged at epoch {epoch}.", epoch) from e

            nn.adam_step(optimizer, student, grads)
            losses.append(step_loss["value"].detach().item())
            samples += len(idx)

        epoch_losses.append(float(np.mean(losses)))
        _check_loss(epoch_losses[-1], epoch, label)
        logger.info("distill label=%s epoch=%d loss=%.6f", label, epoch, epoch_losses[-1])

    nn.to_file_precision(student)
    metrics = evaluate(student, splits.test)
    teacher_metrics = evaluate(teacher, splits.test, defense=cfg.defense)

    in_regime = None
    if cfg.defense.kind == "asvp":
        in_regime = cfg.defense.asvp_config().in_studied_regime

    record = RunRecord(
        label=label,
        config={"train": cfg.to_dict(), "arch": arch.to_dict()},
        initial_loss=initial,
        epoch_losses=epoch_losses,
        metrics=metrics,
        wall_seconds=time.perf_counter() - started,
        network_hash=nn.parameter_hash(student),
        teacher_hash=nn.parameter_hash(teacher),
        teacher_metrics=teacher_metrics,
        energy_per_tap={t: s / max(samples, 1) for t, s in energy_sum.items()},
        in_studied_regime=in_regime,
    )

    logger.info(
        "student distilled label=%s psnr=%.4f ssim=%.4f", label, metrics.psnr_db, metrics.ssim
    )
    return student, record


def stage_ablation(
    teacher: RestorationNet,
    base: TrainConfig,
    arch: NetworkArch,
    splits: Splits,
    stages: Sequence[str] = STAGES,
) -> List[RunRecord]:
    """Distil one student per feature stage from a teacher with ASVP on every tap.

    Stage ``none`` is plain output KD without any defense.
    """
    if teacher.arch.num_res_blocks < 3:
        raise ConfigurationError("Stage ablation needs a teacher with at least 3 taps.")

    if base.defense.kind != "asvp":
        raise ConfigurationError("Stage ablation runs under an ASVP defense.")

    records = []

    for stage in stages:
        if stage == "none":
            cfg = replace(base, taps="none", defense=DefenseSpec())
        else:
            cfg = replace(base, taps=stage)

        _, record = distill_student(teacher, cfg, arch, splits, label=f"stage-{stage}")
        records.append(record)

    return records


def is_effective(clean_kd: Metrics, defended: Metrics) -> bool:
    """Whether a defended student dropped enough below the clean-KD student."""
    return (
        clean_kd.psnr_db - defended.psnr_db >= EFFECTIVE_PSNR_DROP_DB
        or clean_kd.ssim - defended.ssim >= EFFECTIVE_SSIM_DROP
    )
