"""Experiment configuration: JSON document, schema check and CLI overrides."""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

from . import parse, validate
from .data import DegradationSpec
from .defenses import DefenseSpec
from .distill import TrainConfig
from .errors import ConfigurationError
from .nn import NetworkArch
from .utils import CommandOptions, JsonType

logger = logging.getLogger(__name__)

DEFAULT_TEACHER_ARCH = {"channels": 16, "num_res_blocks": 8}
DEFAULT_STUDENT_ARCH = {"channels": 16, "num_res_blocks": 4}
DEFAULT_STAGE_DEFENSE = {"kind": "asvp", "params": {"h": 1e2, "k_ratio": 0.6}}


@dataclass(frozen=True)
class DataConfig:
    train_count: int = 512
    test_count: int = 64
    size: int = 32
    channels: int = 1
    dir: Optional[str] = None


@dataclass(frozen=True)
class SweepConfig:
    """ASVP cells over the product of ``h`` and ``k_ratio``."""

    h: Tuple[float, ...] = ()
    k_ratio: Tuple[float, ...] = ()
    mode: str = "full"

    def defenses(self, seed: int) -> List[DefenseSpec]:
        return [
            DefenseSpec(
                kind="asvp",
                params={"h": h, "k_ratio": k, "mode": self.mode},
                seed=seed,
            )
            for k in self.k_ratio
            for h in self.h
        ]


@dataclass(frozen=True)
class BenchConfig:
    sizes: Tuple[int, ...] = (32, 64, 128)
    channels: int = 64
    repeats: int = 20
    h: float = 1e2
    k_ratio: float = 0.4


@dataclass(frozen=True)
class AnalysisConfig:
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    taps: Optional[Tuple[int, ...]] = None
    channel: int = 0
    sample: int = 0
    checkpoint: Optional[str] = None
    input: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Every setting one CLI invocation runs with, after overrides."""

    seed: int
    output_dir: str
    workers: int
    task: DegradationSpec
    data: DataConfig
    teacher_arch: NetworkArch
    teacher_train: TrainConfig
    teacher_checkpoint: Optional[str]
    student_arch: NetworkArch
    student_train: TrainConfig
    defenses: Tuple[DefenseSpec, ...]
    sweep: Optional[SweepConfig]
    bench: BenchConfig
    analysis: AnalysisConfig
    train_inline: bool = False

    @classmethod
    def from_dict(cls, doc: JsonType, options: CommandOptions = CommandOptions()) -> "ExperimentConfig":
        seed = options.seed if options.seed is not None else int(doc.get("seed", 0))
        task = DegradationSpec.from_dict(doc.get("task", {}))
        data = DataConfig(**doc.get("data", {}))

        teacher = doc.get("teacher", {})
        student = doc.get("student", {})

        def arch(section: JsonType, default: JsonType) -> NetworkArch:
            return NetworkArch.from_dict(
                {"in_channels": data.channels, **default, **section.get("arch", {})}
            )

        def train(section: JsonType) -> TrainConfig:
            return TrainConfig.from_dict(section.get("train", {}), seed=seed, task=task)

        sweep = None
        if "sweep" in doc:
            s = doc["sweep"]
            sweep = SweepConfig(
                h=tuple(float(h) for h in s.get("h", ())),
                k_ratio=tuple(float(k) for k in s.get("k_ratio", ())),
                mode=s.get("mode", "full"),
            )

        bench = doc.get("bench", {})
        bench_cfg = BenchConfig(
            **{k: tuple(v) if k == "sizes" else v for k, v in bench.items()}
        )

        an = doc.get("analysis", {})
        analysis_cfg = AnalysisConfig(
            defense=DefenseSpec.from_dict(an.get("defense", {})),
            taps=tuple(an["taps"]) if "taps" in an else None,
            channel=int(an.get("channel", 0)),
            sample=int(an.get("sample", 0)),
            checkpoint=options.checkpoint or an.get("checkpoint"),
            input=options.input or an.get("input"),
        )

        workers = options.workers if options.workers is not None else int(doc.get("workers", 1))
        if workers < 1:
            raise ConfigurationError("workers must be at least 1.", {"workers": workers})

        return cls(
            seed=seed,
            output_dir=options.out or doc.get("output_dir", "out"),
            workers=workers,
            task=task,
            data=data,
            teacher_arch=arch(teacher, DEFAULT_TEACHER_ARCH),
            teacher_train=train(teacher),
            teacher_checkpoint=options.checkpoint or teacher.get("checkpoint"),
            student_arch=arch(student, DEFAULT_STUDENT_ARCH),
            student_train=train(student),
            defenses=tuple(DefenseSpec.from_dict(d) for d in doc.get("defenses", [])),
            sweep=sweep,
            bench=bench_cfg,
            analysis=analysis_cfg,
            train_inline=options.train_inline,
        )

    def stage_train(self) -> TrainConfig:
        """Student config for stage ablation; ASVP unless another ASVP is given."""
        if self.student_train.defense.kind == "asvp":
            return self.student_train

        spec = DefenseSpec.from_dict({**DEFAULT_STAGE_DEFENSE, "seed": self.seed})
        return replace(self.student_train, defense=spec)

    def to_dict(self) -> JsonType:
        """Effective config, echoed into every output directory."""
        d: JsonType = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "workers": self.workers,
            "task": self.task.to_dict(),
            "data": {
                "train_count": self.data.train_count,
                "test_count": self.data.test_count,
                "size": self.data.size,
                "channels": self.data.channels,
                "dir": self.data.dir,
            },
            "teacher": {
                "arch": self.teacher_arch.to_dict(),
                "train": _train_section(self.teacher_train),
                "checkpoint": self.teacher_checkpoint,
            },
            "student": {
                "arch": self.student_arch.to_dict(),
                "train": _train_section(self.student_train),
            },
            "defenses": [spec.to_dict() for spec in self.defenses],
            "bench": {
                "sizes": list(self.bench.sizes),
                "channels": self.bench.channels,
                "repeats": self.bench.repeats,
                "h": self.bench.h,
                "k_ratio": self.bench.k_ratio,
            },
            "analysis": {
                "defense": self.analysis.defense.to_dict(),
                "channel": self.analysis.channel,
                "sample": self.analysis.sample,
                "checkpoint": self.analysis.checkpoint,
                "input": self.analysis.input,
            },
        }

        if self.analysis.taps is not None:
            d["analysis"]["taps"] = list(self.analysis.taps)

        if self.sweep is not None:
            d["sweep"] = {
                "h": list(self.sweep.h),
                "k_ratio": list(self.sweep.k_ratio),
                "mode": self.sweep.mode,
            }

        return d


def _train_section(cfg: TrainConfig) -> JsonType:
    d = cfg.to_dict()
    # Seed and task live at the top level of the document.
    del d["seed"], d["task"]
    return d


def load(options: CommandOptions) -> ExperimentConfig:
    """Read, validate and resolve the config named by ``--config``.

    Raises:
        ConfigurationError: If no config path was given or a value is out of
        range.
        ParseError: If the file is not a JSON object.
        ValidationError: If the document breaks the config schema.
    """
    if not options.config:
        raise ConfigurationError("--config is required for this command.")

    doc = parse.config_file(options.config)
    validate.document(doc, validate.ConfigValidators.EXPERIMENT)

    cfg = ExperimentConfig.from_dict(doc, options)
    logger.debug("config loaded path=%s seed=%d", options.config, cfg.seed)
    return cfg
