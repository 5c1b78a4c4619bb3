"""Post-processing degradations: JPEG compression, Gaussian blur, downsampling.

Images are H x W x 3 float arrays in [0, 1]. Every op is deterministic and
shape-preserving.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import correlate1d

JPEG_QUALITIES = (75, 80, 90)
BLUR_KERNELS = (3, 5)
DOWNSAMPLE_FACTORS = (0.5, 0.67)

GRID: dict[str, tuple] = {
    "jpeg": JPEG_QUALITIES,
    "blur": BLUR_KERNELS,
    "downsample": DOWNSAMPLE_FACTORS,
}
# flat list of (op, param) cells; random_degrade picks uniformly over it
CELLS: list[tuple[str, float | int]] = [(op, p) for op, params in GRID.items() for p in params]


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationRecord:
    op: str  # jpeg | blur | downsample | none
    param: float | int | None
    seed: int

    def __post_init__(self):
        if self.op == "none":
            return
        if self.op not in GRID:
            raise DegradationError(f"unknown degradation op {self.op!r}")
        if self.param not in GRID[self.op]:
            raise DegradationError(f"{self.op} param {self.param!r} not in grid {GRID[self.op]}")

    def serialize(self) -> str:
        param = "-" if self.param is None else str(self.param)
        return f"{self.op}:{param}:{self.seed}"

    @classmethod
    def parse(cls, text: str) -> "DegradationRecord":
        op, param, seed = text.split(":")
        if op == "none" or param == "-":
            value = None
        elif op == "downsample":
            value = float(param)
        else:
            value = int(param)
        return cls(op, value, int(seed))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def jpeg_encode(image: np.ndarray, quality: int) -> bytes:
    """Baseline JPEG bytes of ``image`` (PIL/libjpeg, default 4:2:0 chroma subsampling)."""
    if not 1 <= int(quality) <= 100:
        raise DegradationError(f"JPEG quality must be in [1, 100], got {quality}")
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="JPEG", quality=int(quality))
    return buf.getvalue()


def jpeg_compress(image: np.ndarray, quality: int) -> np.ndarray:
    data = jpeg_encode(image, quality)
    with Image.open(io.BytesIO(data)) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return out


def gaussian_sigma(kernel_size: int) -> float:
    # conventional sigma-from-size rule (OpenCV getGaussianKernel)
    return 0.3 * ((kernel_size - 1) / 2 - 1) + 0.8


def gaussian_kernel(kernel_size: int) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise DegradationError(f"blur kernel size must be odd and >= 1, got {kernel_size}")
    if kernel_size == 1:
        return np.ones(1)
    sigma = gaussian_sigma(kernel_size)
    x = np.arange(kernel_size) - (kernel_size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, kernel_size: int) -> np.ndarray:
    k = gaussian_kernel(kernel_size)
    out = np.asarray(image, dtype=np.float64)
    if kernel_size == 1:
        return out.copy()
    # mode="nearest" is replicate padding
    out = correlate1d(out, k, axis=0, mode="nearest")
    out = correlate1d(out, k, axis=1, mode="nearest")
    return out


def _bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def downsample_size(height: int, width: int, factor: float) -> tuple[int, int]:
    return max(1, int(np.floor(factor * height))), max(1, int(np.floor(factor * width)))


def downsample(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear down-resize by ``factor`` then back up to the original size."""
    if not 0 < factor <= 1:
        raise DegradationError(f"downsample factor must be in (0, 1], got {factor}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    small = downsample_size(h, w, factor)
    if small == (h, w):
        return image.copy()
    return np.clip(_bilinear(_bilinear(image, small), (h, w)), 0.0, 1.0)


def apply_degradation(image: np.ndarray, op: str, param) -> np.ndarray:
    if op == "none":
        return np.asarray(image, dtype=np.float64).copy()
    if op == "jpeg":
        return jpeg_compress(image, int(param))
    if op == "blur":
        return gaussian_blur(image, int(param))
    if op == "downsample":
        return downsample(image, float(param))
    raise DegradationError(f"unknown degradation op {op!r}")


def pick_degradation(rng_seed: int) -> DegradationRecord:
    rng = np.random.default_rng(rng_seed)
    op, param = CELLS[int(rng.integers(len(CELLS)))]
    return DegradationRecord(op, param, int(rng_seed))


def random_degrade(image: np.ndarray, rng_seed: int) -> tuple[np.ndarray, DegradationRecord]:
    record = pick_degradation(rng_seed)
    return apply_degradation(image, record.op, record.param), record
