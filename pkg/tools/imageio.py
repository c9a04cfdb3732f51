"""8-bit PGM/PPM files for inspecting restored images."""
from typing import Any

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, ShapeError


def _to_uint8(image: Any) -> np.ndarray:
    arr = image.detach().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.asarray(arr, dtype=np.float64)

    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError("Netpbm images must be (1|3, H, W).", list(arr.shape))

    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path: str, image: Any) -> None:
    """Write a (1, H, W) image as binary PGM or a (3, H, W) one as PPM."""
    q = _to_uint8(image)

    if q.shape[0] == 1:
        pil = Image.fromarray(q[0], mode="L")
    else:
        pil = Image.fromarray(np.transpose(q, (1, 2, 0)), mode="RGB")

    pil.save(path, format="PPM")


write_pgm = write_pnm
write_ppm = write_pnm


def read_pnm(path: str) -> torch.Tensor:
    """Read a binary PGM/PPM file as a float64 (C, H, W) image in [0, 1]."""
    try:
        with Image.open(path) as pil:
            pil.load()
            mode = pil.mode
            arr = np.asarray(pil)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, SyntaxError, ValueError, OSError) as e:
        raise FormatError("Malformed netpbm file.", str(e)) from e

    if mode not in ("L", "RGB"):
        raise FormatError(f"Unsupported netpbm mode '{mode}'.")

    arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
    return torch.from_numpy(arr.astype(np.float64) / 255.0)


read_pgm = read_pnm
read_ppm = read_pnm
