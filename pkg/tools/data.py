"""Synthetic restoration datasets and the binary tensor file format.

Clean images are procedural (gradients, shapes, sinusoidal textures) and are
paired with degraded versions produced by simple physical models: additive
noise, down/up-sampling, gamma darkening, haze compositing and rain streaks.

TensorFile layout (little endian)::

    magic   8 bytes  b"ASVPTNSR"
    version u16      1
    rank    u16      1..4
    dims    u32 * rank
    payload f32 * product(dims), row-major
"""
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, FormatError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"ASVPTNSR"
VERSION = 1
HEADER = struct.Struct("<8sHH")

# Test samples are drawn from this index range onwards so they never share a
# seed with training samples.
TEST_INDEX_OFFSET = 1_000_000

Task = Literal["denoise", "super_resolution", "low_light", "haze", "rain"]
TASKS = ("denoise", "super_resolution", "low_light", "haze", "rain")

DEFAULT_PARAMS: Dict[str, Dict[str, Any]] = {
    "denoise": {"sigma": 0.1},
    "super_resolution": {"factor": 2, "upsample": "bicubic"},
    "low_light": {"gamma": 2.0, "gain": 1.0},
    "haze": {"transmission": 0.6, "airlight": 0.9, "cast": None},
    "rain": {"count": 24, "angle": 75.0, "length": 8, "intensity": 0.5},
}


@dataclass(frozen=True)
class DegradationSpec:
    """A restoration task and its degradation parameters."""

    task: Task = "denoise"
    params: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"Unknown task '{self.task}'.")

        p = self.resolved()

        if self.task == "denoise" and p["sigma"] < 0:
            raise ConfigurationError("Noise sigma must be nonnegative.", p)

        elif self.task == "super_resolution":
            if int(p["factor"]) < 1 or p["upsample"] not in ("nearest", "bicubic"):
                raise ConfigurationError(
                    "Super-resolution needs factor >= 1 and upsample "
                    "'nearest' or 'bicubic'.",
                    p,
                )

        elif self.task == "low_light" and (p["gamma"] <= 0 or p["gain"] < 0):
            raise ConfigurationError("Low-light needs gamma > 0 and gain >= 0.", p)

        elif self.task == "haze":
            if not 0.0 < p["transmission"] <= 1.0 or not 0.0 <= p["airlight"] <= 1.0:
                raise ConfigurationError(
                    "Haze needs transmission in (0, 1] and airlight in [0, 1].", p
                )

        elif self.task == "rain":
            if p["count"] < 0 or p["length"] < 1 or p["intensity"] < 0:
                raise ConfigurationError(
                    "Rain needs count >= 0, length >= 1 and intensity >= 0.", p
                )

    def resolved(self) -> Dict[str, Any]:
        return {**DEFAULT_PARAMS[self.task], **self.params}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "DegradationSpec":
        return cls(
            task=d.get("task", "denoise"),
            params=dict(d.get("params", {})),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"task": self.task, "params": self.resolved(), "seed": self.seed}


class Pair(NamedTuple):
    clean: torch.Tensor
    degraded: torch.Tensor


class Dataset(NamedTuple):
    """Stacked pairs, each tensor of shape (N, C, H, W)."""

    clean: torch.Tensor
    degraded: torch.Tensor

    def __len__(self) -> int:
        return self.clean.shape[0]

    def pairs(self) -> List[Pair]:
        return [Pair(c, d) for c, d in zip(self.clean, self.degraded)]


class Splits(NamedTuple):
    train: Dataset
    test: Dataset


def _as_numpy(image: Any) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        return image.detach().to(torch.float64).numpy()
    return np.asarray(image, dtype=np.float64)


def _rain_layer(shape: Tuple[int, int, int], p: Dict[str, Any], rng: np.random.Generator) -> np.ndarray:
    _, h, w = shape
    layer = np.zeros((h, w))

    theta = math.radians(float(p["angle"]))
    dy, dx = math.sin(theta), math.cos(theta)
    steps = np.arange(int(p["length"]))

    for _ in range(int(p["count"])):
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        ys = np.rint(y0 + steps * dy).astype(int) % h
        xs = np.rint(x0 + steps * dx).astype(int) % w
        layer[ys, xs] = 1.0

    return layer[None] * float(p["intensity"])


def degrade(
    clean: Any,
    spec: DegradationSpec,
    rng: Optional[np.random.Generator] = None,
) -> torch.Tensor:
    """Apply a task's degradation to a clean (C, H, W) image in [0, 1].

    Args:
        clean (Any): Clean image, tensor or array of shape (C, H, W).
        spec (DegradationSpec): Task and parameters.
        rng (Optional[np.random.Generator]): Random source; defaults to one
        seeded from ``spec.seed``.

    Raises:
        ShapeError: If the image is not (C, H, W) or cannot be downscaled.

    Returns:
        torch.Tensor: Degraded float64 image of the same shape, in [0, 1].
    """
    img = _as_numpy(clean)

    if img.ndim != 3:
        raise ShapeError("Images must have shape (C, H, W).", list(img.shape))

    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    p = spec.resolved()

    if spec.task == "denoise":
        out = img + rng.normal(0.0, float(p["sigma"]), size=img.shape) if p["sigma"] > 0 else img.copy()

    elif spec.task == "super_resolution":
        s = int(p["factor"])
        c, h, w = img.shape

        if h % s or w % s:
            raise ShapeError(
                f"Image size {h}x{w} is not divisible by factor {s}.", list(img.shape)
            )

        low = img.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))

        if p["upsample"] == "nearest":
            out = low.repeat(s, axis=1).repeat(s, axis=2)
        else:
            up = F.interpolate(
                torch.from_numpy(low)[None], scale_factor=s, mode="bicubic", align_corners=False
            )
            out = up[0].numpy()

    elif spec.task == "low_light":
        out = float(p["gain"]) * np.power(img, float(p["gamma"]))

    elif spec.task == "haze":
        out = img
        if p.get("cast") is not None:
            cast = np.asarray(p["cast"], dtype=np.float64)
            if cast.shape != (img.shape[0],):
                raise ShapeError("Colour cast needs one factor per channel.", list(cast.shape))
            out = out * cast[:, None, None]

        t = float(p["transmission"])
        out = out * t + float(p["airlight"]) * (1.0 - t)

    else:
        out = img + _rain_layer(img.shape, p, rng)

    return torch.from_numpy(np.clip(out, 0.0, 1.0))


def make_clean_image(size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural clean image of shape (channels, size, size) in [0.2, 0.8]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)

    def colour() -> np.ndarray:
        return rng.uniform(0.0, 1.0, size=(channels, 1, 1))

    gx, gy = rng.uniform(-0.5, 0.5, size=2)
    img = colour() * 0.5 + (gx * xx + gy * yy)[None]

    for _ in range(rng.integers(1, 4)):
        y0, x0 = rng.uniform(0, 1, size=2)
        hh, ww = rng.uniform(0.1, 0.5, size=2)
        mask = (np.abs(yy - y0) < hh / 2) & (np.abs(xx - x0) < ww / 2)
        img = np.where(mask[None], colour(), img)

    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        ry, rx = rng.uniform(0.05, 0.3, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = np.where(mask[None], colour(), img)

    freq = rng.uniform(2.0, 8.0)
    phi = rng.uniform(0.0, math.pi)
    texture = np.sin(2 * math.pi * freq * (math.cos(phi) * xx + math.sin(phi) * yy))
    img = img + rng.uniform(0.05, 0.15) * texture[None]

    return 0.2 + 0.6 * np.clip(img, 0.0, 1.0)


def _sample(index: int, spec: DegradationSpec, size: int, channels: int, seed: int) -> Pair:
    rng = np.random.default_rng([seed, index])
    clean = make_clean_image(size, channels, rng)
    degraded = degrade(clean, spec, np.random.default_rng([seed, index, spec.seed]))

    return Pair(torch.from_numpy(clean), degraded)


def _stack(pairs: Sequence[Pair]) -> Dataset:
    return Dataset(
        clean=torch.stack([p.clean for p in pairs]),
        degraded=torch.stack([p.degraded for p in pairs]),
    )


def make_dataset(
    task: DegradationSpec,
    count: int,
    size: int,
    seed: int,
    channels: int = 1,
    start: int = 0,
) -> Dataset:
    """Generate ``count`` (clean, degraded) pairs deterministically.

    Sample i is generated from the seed sequence ``[seed, start + i]`` alone,
    so any slice of indices can be regenerated independently.
    """
    if count < 1:
        raise ConfigurationError("A dataset needs at least one sample.", {"count": count})

    pairs = [_sample(start + i, task, size, channels, seed) for i in range(count)]
    return _stack(pairs)


def make_splits(
    task: DegradationSpec,
    train_count: int,
    test_count: int,
    size: int,
    seed: int,
    channels: int = 1,
) -> Splits:
    """Train and test datasets drawn from disjoint index ranges."""
    if train_count >= TEST_INDEX_OFFSET:
        raise ConfigurationError("Training set too large for the index partition.")

    return Splits(
        train=make_dataset(task, train_count, size, seed, channels, start=0),
        test=make_dataset(task, test_count, size, seed, channels, start=TEST_INDEX_OFFSET),
    )


def save_tensor(path: str, t: Any) -> None:
    """Write a rank 1-4 tensor as a TensorFile (float32 payload)."""
    arr = _as_numpy(t)

    if not 1 <= arr.ndim <= 4:
        raise ShapeError("TensorFile supports ranks 1 to 4.", list(arr.shape))

    header = HEADER.pack(MAGIC, VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path: str) -> torch.Tensor:
    """Read a TensorFile into a float64 tensor.

    Raises:
        FormatError: On a bad magic, version or rank, or when the payload
        length does not match the dims.
    """
    with open(path, "rb") as f:
        raw = f.read()

    if len(raw) < HEADER.size:
        raise FormatError(
            "TensorFile header truncated.",
            {"expected_bytes": HEADER.size, "actual_bytes": len(raw)},
        )

    magic, version, rank = HEADER.unpack_from(raw)

    if magic != MAGIC:
        raise FormatError("Bad TensorFile magic.", {"magic": magic.hex()})

    if version != VERSION:
        raise FormatError(f"Unsupported TensorFile version {version}.")

    if not 1 <= rank <= 4:
        raise FormatError(f"Unsupported TensorFile rank {rank}.")

    dims_end = HEADER.size + 4 * rank
    if len(raw) < dims_end:
        raise FormatError(
            "TensorFile dims truncated.",
            {"expected_bytes": dims_end, "actual_bytes": len(raw)},
        )

    dims = struct.unpack_from(f"<{rank}I", raw, HEADER.size)
    expected = dims_end + 4 * int(np.prod(dims))

    if len(raw) != expected:
        raise FormatError(
            f"TensorFile payload size mismatch: expected {expected} bytes, "
            f"got {len(raw)}.",
            {"expected_bytes": expected, "actual_bytes": len(raw)},
        )

    payload = np.frombuffer(raw, dtype="<f4", offset=dims_end).reshape(dims)
    return torch.from_numpy(payload.astype(np.float64))


def write_dataset(directory: str, name: str, dataset: Dataset) -> Dict[str, str]:
    """Write a dataset as two TensorFiles; returns the written paths."""
    os.makedirs(directory, exist_ok=True)

    paths = {
        "clean": os.path.join(directory, f"{name}_clean.tensor"),
        "degraded": os.path.join(directory, f"{name}_degraded.tensor"),
    }
    save_tensor(paths["clean"], dataset.clean)
    save_tensor(paths["degraded"], dataset.degraded)

    logger.info("dataset written name=%s samples=%d dir=%s", name, len(dataset), directory)
    return paths


def read_dataset(directory: str, name: str) -> Dataset:
    return Dataset(
        clean=load_tensor(os.path.join(directory, f"{name}_clean.tensor")),
        degraded=load_tensor(os.path.join(directory, f"{name}_degraded.tensor")),
    )
