import concurrent.futures
import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch

from . import analysis, config, data, distill, imageio, nn, parse, report, validate
from . import healthcheck as health
from .config import ExperimentConfig
from .data import Dataset, Splits
from .defenses import DefenseContext, DefenseSpec, apply_defense
from .distill import RunRecord
from .errors import ConfigurationError, GridCellError
from .nn import NetworkArch, RestorationNet
from .tensor import DTYPE
from .utils import CommandOptions, JsonType, Response
from .validate import OutputValidators

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
BYTES_PER_VALUE = 8
BENCH_BLOCKS = 2


class GridCell(NamedTuple):
    """One student to distil in a defense grid."""

    id: str
    train: distill.TrainConfig
    sweep: bool = False


class CellOutcome(NamedTuple):
    id: str
    record: Optional[RunRecord] = None
    error: Optional[Exception] = None


def _write_json(path: str, doc: JsonType) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")

    return path


def _sha256(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _echo_config(cfg: ExperimentConfig, directory: str) -> str:
    return _write_json(os.path.join(directory, "config.json"), cfg.to_dict())


def _write_record(path: str, record: RunRecord) -> str:
    doc = record.to_dict()
    validate.document(doc, OutputValidators.RUN_RECORD)
    return _write_json(path, doc)


def _float32(dataset: Dataset) -> Dataset:
    """Round to the TensorFile precision so memory and disk agree."""
    return Dataset(
        clean=dataset.clean.to(torch.float32).to(DTYPE),
        degraded=dataset.degraded.to(torch.float32).to(DTYPE),
    )


def _generate(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    splits = data.make_splits(
        cfg.task, d.train_count, d.test_count, d.size, cfg.seed, d.channels
    )
    return Splits(_float32(splits.train), _float32(splits.test))


def _splits(cfg: ExperimentConfig) -> Splits:
    """Dataset written by gen-data when ``data.dir`` is set, else regenerated."""
    if cfg.data.dir is None:
        return _generate(cfg)

    with open(os.path.join(cfg.data.dir, MANIFEST), "r") as f:
        manifest = parse.document(f.read())

    validate.document(manifest, OutputValidators.MANIFEST)

    return Splits(
        train=data.read_dataset(cfg.data.dir, "train"),
        test=data.read_dataset(cfg.data.dir, "test"),
    )


def _teacher(cfg: ExperimentConfig, splits: Splits, directory: str) -> RestorationNet:
    """Load the configured teacher checkpoint or train one inline.

    Raises:
        ConfigurationError: If there is neither a checkpoint nor the
        train-inline flag.
    """
    if cfg.teacher_checkpoint and not cfg.train_inline:
        net, manifest = nn.load_checkpoint(cfg.teacher_checkpoint)
        logger.info(
            "teacher loaded path=%s sha256=%s", cfg.teacher_checkpoint, manifest["sha256"][:12]
        )
        return net

    if not cfg.train_inline:
        raise ConfigurationError(
            "A teacher checkpoint or the --train-inline flag is required."
        )

    net, record = distill.train_teacher(cfg.teacher_train, cfg.teacher_arch, splits)
    nn.save_checkpoint(net, os.path.join(directory, "teacher"), cfg.seed)
    _write_record(os.path.join(directory, "teacher_record.json"), record)
    return net


def _metrics_summary(record: RunRecord) -> JsonType:
    return {
        "label": record.label,
        "psnr_db": record.metrics.psnr_db,
        "ssim": record.metrics.ssim,
        "network_hash": record.network_hash,
    }


def healthcheck() -> Response:
    """Run the healthcheck command.

    Returns:
        Response: The body of the response returned by the handler.
    """
    result = health.healthcheck()
    validate.document(result, OutputValidators.HEALTHCHECK)
    return Response(command="healthcheck", result=result)


def gen_data(options: CommandOptions) -> Response:
    """Generate the train and test datasets and their manifest.

    Note:
        Files are written to ``data.dir`` when set, otherwise to ``data``
        under the output directory. Generation depends only on the task, the
        data section and the seed, so reruns are byte-identical.

    Args:
        options (CommandOptions): Command-line flags.

    Returns:
        Response: Directory, manifest path and sample counts.
    """
    cfg = config.load(options)
    directory = cfg.data.dir or os.path.join(cfg.output_dir, "data")
    _echo_config(cfg, directory)
    splits = _generate(cfg)

    entries = {}
    for name, dataset, start in (
        ("train", splits.train, 0),
        ("test", splits.test, data.TEST_INDEX_OFFSET),
    ):
        paths = data.write_dataset(directory, name, dataset)
        entries[name] = {
            "count": len(dataset),
            "index_start": start,
            "files": {k: os.path.basename(p) for k, p in paths.items()},
            "sha256": {k: _sha256(p) for k, p in paths.items()},
        }

    manifest = {
        "format": {"magic": data.MAGIC.decode("ascii"), "version": data.VERSION},
        "task": cfg.task.to_dict(),
        "seed": cfg.seed,
        "size": cfg.data.size,
        "channels": cfg.data.channels,
        "splits": entries,
    }
    validate.document(manifest, OutputValidators.MANIFEST)
    manifest_path = _write_json(os.path.join(directory, MANIFEST), manifest)

    result = {
        "directory": directory,
        "manifest": manifest_path,
        "train_count": entries["train"]["count"],
        "test_count": entries["test"]["count"],
    }
    return Response(command="gen-data", result=result)


def train_teacher(options: CommandOptions) -> Response:
    """Train a teacher and write its checkpoint and run record."""
    cfg = config.load(options)
    directory = os.path.join(cfg.output_dir, "teacher")
    _echo_config(cfg, directory)
    splits = _splits(cfg)

    net, record = distill.train_teacher(cfg.teacher_train, cfg.teacher_arch, splits)

    checkpoint = os.path.join(directory, "teacher")
    digest = nn.save_checkpoint(net, checkpoint, cfg.seed)
    _write_record(os.path.join(directory, "teacher_record.json"), record)

    result = {**_metrics_summary(record), "checkpoint": checkpoint, "sha256": digest}
    return Response(command="train-teacher", result=result)


def distill_student(options: CommandOptions) -> Response:
    """Distil one student under the student section's defense."""
    cfg = config.load(options)
    directory = os.path.join(cfg.output_dir, "distill")
    _echo_config(cfg, directory)
    splits = _splits(cfg)
    teacher = _teacher(cfg, splits, directory)

    student, record = distill.distill_student(
        teacher, cfg.student_train, cfg.student_arch, splits
    )

    checkpoint = os.path.join(directory, "student")
    nn.save_checkpoint(student, checkpoint, cfg.seed)
    _write_record(os.path.join(directory, "student_record.json"), record)

    result = {
        **_metrics_summary(record),
        "checkpoint": checkpoint,
        "mean_energy": record.mean_energy,
    }
    return Response(command="distill", result=result)


def _grid_cells(cfg: ExperimentConfig) -> List[GridCell]:
    """Configured defenses, then sweep cells; a clean-KD cell comes first
    unless one is configured."""
    specs = [(spec, False) for spec in cfg.defenses]

    if cfg.sweep is not None:
        specs += [(spec, True) for spec in cfg.sweep.defenses(cfg.seed)]

    if not specs:
        raise ConfigurationError("The defense grid is empty.")

    if not any(spec.kind == "none" for spec, _ in specs):
        specs.insert(0, (DefenseSpec(), False))

    return [
        GridCell(
            id=f"{i:03d}-{spec.label}",
            train=replace(cfg.student_train, defense=spec),
            sweep=sweep,
        )
        for i, (spec, sweep) in enumerate(specs)
    ]


def _run_cell(
    cell: GridCell, teacher: RestorationNet, arch: NetworkArch, splits: Splits
) -> CellOutcome:
    """Distil one grid cell; failures are returned rather than raised."""
    logger.info("grid cell started id=%s", cell.id)

    try:
        _, record = distill.distill_student(teacher, cell.train, arch, splits)
    except Exception as e:
        logger.error("grid cell failed id=%s error=%s", cell.id, e)
        return CellOutcome(cell.id, error=e)

    logger.info("grid cell finished id=%s psnr=%.4f", cell.id, record.metrics.psnr_db)
    return CellOutcome(cell.id, record=record)


def _run_cells(
    cells: Sequence[GridCell],
    teacher: RestorationNet,
    arch: NetworkArch,
    splits: Splits,
    workers: int,
) -> Dict[str, CellOutcome]:
    if workers == 1:
        return {c.id: _run_cell(c, teacher, arch, splits) for c in cells}

    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_cell, c, teacher, arch, splits) for c in cells]
        outcomes = [f.result() for f in futures]

    return {o.id: o for o in outcomes}


def defense_grid(options: CommandOptions) -> Response:
    """Distil one student per defense and write the comparison tables.

    Note:
        Cells are independent: each uses the student seed and its own
        defense seed, so rows do not depend on execution order or worker
        count. Rows of completed cells are written even when another cell
        fails.

    Args:
        options (CommandOptions): Command-line flags.

    Raises:
        GridCellError: After writing the completed rows, for the first cell
        that failed.

    Returns:
        Response: Paths of the written tables and the row count.
    """
    cfg = config.load(options)
    directory = os.path.join(cfg.output_dir, "grid")
    _echo_config(cfg, directory)
    splits = _splits(cfg)
    teacher = _teacher(cfg, splits, directory)
    cells = _grid_cells(cfg)

    outcomes = _run_cells(cells, teacher, cfg.student_arch, splits, cfg.workers)

    baseline = next(c for c in cells if c.train.defense.kind == "none")
    clean_kd = outcomes[baseline.id].record

    if clean_kd is None:
        raise GridCellError(baseline.id, outcomes[baseline.id].error)

    images_seen = cfg.data.train_count * cfg.student_train.epochs
    rows, sweep_records = [], []
    failed: Optional[CellOutcome] = None

    for cell in cells:
        outcome = outcomes[cell.id]

        if outcome.record is None:
            failed = failed or outcome
            continue

        _write_record(os.path.join(directory, "records", f"{cell.id}.json"), outcome.record)
        rows.append(report.grid_row(outcome.record, clean_kd, images_seen))

        if cell.sweep:
            sweep_records.append(outcome.record)

    result: JsonType = {
        "report": report.write_csv(
            os.path.join(directory, "report.csv"), report.REPORT_COLUMNS, rows
        ),
        "rows": len(rows),
    }

    if sweep_records:
        result["sweep"] = report.write_csv(
            os.path.join(directory, "sweep.csv"),
            report.SWEEP_COLUMNS,
            report.sweep_rows(sweep_records, clean_kd),
        )
        result["sweep_ssim"] = report.write_sweep_pivot(
            os.path.join(directory, "sweep_ssim.csv"), sweep_records
        )
        result["min_effective"] = report.write_csv(
            os.path.join(directory, "min_effective.csv"),
            report.MIN_EFFECTIVE_COLUMNS,
            [report.min_effective_row(sweep_records, clean_kd, cfg.task.task)],
        )

    if failed is not None:
        raise GridCellError(failed.id, failed.error)

    return Response(command="defense-grid", result=result)


def stage_ablation(options: CommandOptions) -> Response:
    """Distil one student per feature stage under ASVP on the teacher."""
    cfg = config.load(options)
    directory = os.path.join(cfg.output_dir, "stage_ablation")
    _echo_config(cfg, directory)
    splits = _splits(cfg)
    teacher = _teacher(cfg, splits, directory)

    records = distill.stage_ablation(teacher, cfg.stage_train(), cfg.student_arch, splits)

    for record in records:
        _write_record(os.path.join(directory, "records", f"{record.label}.json"), record)

    path = report.write_csv(
        os.path.join(directory, "stage_ablation.csv"),
        report.STAGE_COLUMNS,
        report.stage_rows(records),
    )

    result = {"report": path, "stages": [_metrics_summary(r) for r in records]}
    return Response(command="stage-ablation", result=result)


def bench_defenses(cfg: ExperimentConfig) -> List[DefenseSpec]:
    b = cfg.bench
    asvp_params = {"h": b.h, "k_ratio": b.k_ratio}

    return [
        DefenseSpec(),
        DefenseSpec(kind="noise", intensity="high", seed=cfg.seed),
        DefenseSpec(kind="drop_channel", intensity="high", seed=cfg.seed),
        DefenseSpec(kind="asvp", params={**asvp_params, "mode": "full"}),
        DefenseSpec(kind="asvp", params={**asvp_params, "mode": "truncated"}),
        DefenseSpec(kind="adversarial", intensity="low", seed=cfg.seed),
    ]


def transient_bytes(spec: DefenseSpec, m: int, n: int) -> int:
    """Analytic size of the temporary buffers one defense call allocates.

    ASVP counts the stored SVD outputs U, V and the amplified spectrum; the
    truncated variant counts the Gram matrix, its eigenvalues and the kept
    basis.
    """
    r = min(m, n)

    if spec.kind == "none":
        values = 0
    elif spec.kind == "noise":
        values = m * n
    elif spec.kind == "drop_channel":
        values = n
    elif spec.kind == "adversarial":
        # Working copy, gradient and its sign.
        values = 3 * m * n
    elif spec.resolved().get("mode", "full") == "truncated":
        k = spec.asvp_config().k_for(r)
        values = r * r + r + r * k
    else:
        values = m * r + r + n * r

    return values * BYTES_PER_VALUE


def _time_defense(
    spec: DefenseSpec, feature: torch.Tensor, ctx: DefenseContext, repeats: int
) -> float:
    apply_defense(spec, feature, ctx)
    times = []

    for _ in range(repeats):
        started = time.perf_counter()
        apply_defense(spec, feature, ctx)
        times.append(1000.0 * (time.perf_counter() - started))

    return statistics.median(times)


def bench_overhead(options: CommandOptions) -> Response:
    """Median per-call time and transient memory of every defense.

    Note:
        Feature maps are (1, channels, size, size) draws seeded by the config
        seed. PGD ascends the task loss through the rest of an untrained
        network built for the benchmark.
    """
    cfg = config.load(options)
    directory = os.path.join(cfg.output_dir, "bench")
    _echo_config(cfg, directory)
    b = cfg.bench

    arch = NetworkArch(
        in_channels=cfg.data.channels, channels=b.channels, num_res_blocks=BENCH_BLOCKS
    )
    net = nn.init_network(arch, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rows = []

    for size in b.sizes:
        feature = torch.randn((1, b.channels, size, size), generator=gen, dtype=DTYPE)
        x = torch.rand((1, arch.in_channels, size, size), generator=gen, dtype=DTYPE)

        with torch.no_grad():
            reference = net(x)[0]

        ctx = DefenseContext(loss_tail=distill.task_loss_tail(net, 0, x, reference))

        for spec in bench_defenses(cfg):
            median_ms = _time_defense(spec, feature, ctx, b.repeats)
            rows.append(
                {
                    "defense": spec.label,
                    "size": size,
                    "median_ms": median_ms,
                    "transient_bytes": transient_bytes(spec, size * size, b.channels),
                }
            )
            logger.info("bench defense=%s size=%d median_ms=%.4f", spec.label, size, median_ms)

    path = report.write_csv(os.path.join(directory, "bench.csv"), report.BENCH_COLUMNS, rows)
    return Response(command="bench-overhead", result={"report": path, "rows": rows})


def _analysis_input(cfg: ExperimentConfig) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Degraded input batch of one image and its clean target, if known."""
    a = cfg.analysis

    if a.input is None:
        sample = data.make_dataset(
            cfg.task,
            1,
            cfg.data.size,
            cfg.seed,
            cfg.data.channels,
            start=data.TEST_INDEX_OFFSET + a.sample,
        )
        return sample.degraded, sample.clean

    if a.input.lower().endswith((".pgm", ".ppm", ".pnm")):
        return imageio.read_pnm(a.input)[None], None

    t = data.load_tensor(a.input)

    if t.dim() == 3:
        return t[None], None

    if t.dim() == 4 and 0 <= a.sample < t.shape[0]:
        return t[a.sample: a.sample + 1], None

    raise ConfigurationError(
        "Input must be a (C, H, W) image or hold the requested sample.",
        {"shape": list(t.shape), "sample": a.sample},
    )


def analyze_features(options: CommandOptions) -> Response:
    """Clean and defended feature reports for every selected teacher tap.

    Raises:
        ConfigurationError: If no checkpoint is configured or a tap index is
        out of range.
    """
    cfg = config.load(options)
    directory = os.path.join(cfg.output_dir, "analysis")
    _echo_config(cfg, directory)
    a = cfg.analysis

    checkpoint = a.checkpoint or cfg.teacher_checkpoint
    if checkpoint is None:
        raise ConfigurationError("analyze-features needs a checkpoint.")

    net, _ = nn.load_checkpoint(checkpoint)
    count = net.arch.num_res_blocks
    taps = list(a.taps) if a.taps is not None else list(range(count))

    out_of_range = [t for t in taps if not 0 <= t < count]
    if out_of_range:
        raise ConfigurationError(
            "Tap index out of range.", {"indices": out_of_range, "taps": count}
        )

    x, target = _analysis_input(cfg)
    if target is None and a.defense.kind == "adversarial":
        logger.warning("no clean target; PGD ascends against the undefended output")

    with torch.no_grad():
        passed = distill.defended_forward(net, x, a.defense, taps, target=target)
    summary, high_frequency = [], {}

    for t in taps:
        clean = analysis.feature_report(passed.taps[t].feature, a.channel)
        defended = clean
        if t in passed.defended:
            defended = analysis.feature_report(passed.defended[t].protected, a.channel)

        for path, rep in (("clean", clean), ("defended", defended)):
            summary.append(report.feature_row(t, path, rep))
            prefix = os.path.join(directory, f"tap{t}_{path}")
            report.write_histogram(prefix + "_histogram.csv", rep)
            data.save_tensor(prefix + "_grid.tensor", rep.grid)
            data.save_tensor(prefix + "_energy.tensor", rep.energy_map)

        report.write_radial(os.path.join(directory, f"tap{t}_radial.csv"), clean, defended)
        high_frequency[str(t)] = {
            "clean": clean.high_frequency_fraction,
            "defended": defended.high_frequency_fraction,
        }

    path = report.write_csv(
        os.path.join(directory, "summary.csv"), report.FEATURE_COLUMNS, summary
    )

    result = {"summary": path, "defense": a.defense.label, "high_frequency_fraction": high_frequency}
    return Response(command="analyze-features", result=result)
