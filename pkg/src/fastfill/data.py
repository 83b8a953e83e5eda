"""Procedural synthetic inpainting data and the rough-mask benchmark pipeline.

Samples are 32x32x3 images in [-1, 1]: a soft two-color vertical gradient
background plus one saturated filled shape (circle, square or triangle) in one
of six colors. The hole mask is the shape's pixel support dilated once with
the 8x8 all-ones kernel, so the hole always contains the object. The label
encodes (shape, color) and stands in for a text prompt.

Benchmark masks run the segmentation support through erosion x2 then
dilation x2 with the same 8x8 kernel, falling back to plain dilation x2 when
erosion annihilates the support.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .utils import atomic_write_bytes, atomic_write_text, derive_seed

IMAGE_SIZE = 32
KERNEL_SIZE = 8

SHAPE_NAMES = ("circle", "square", "triangle")
COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan")
COLOR_PROTOTYPES = np.array(
    [
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [-1.0, 1.0, 1.0],
    ],
    dtype=np.float32,
)
NUM_LABELS = len(SHAPE_NAMES) * len(COLOR_PROTOTYPES)

# Background channels stay within +-0.55 so object pixels (+-1) are separable.
BG_COLOR_RANGE = 0.5
BG_NOISE_RANGE = 0.05

MIN_HOLE_FRACTION = 0.02
MAX_HOLE_FRACTION = 0.60


@dataclass(frozen=True)
class DataConfig:
    dataset_size: int = 64
    seed: int = 1


@dataclass
class InpaintSample:
    """One training/eval record: image, hole mask, condition label, seed."""

    x0: np.ndarray  # (3, H, W) float32 in [-1, 1]
    hole_mask: np.ndarray  # (H, W) uint8, 1 = region to inpaint
    label: int
    seed: int

    def __post_init__(self):
        if self.x0.ndim != 3 or self.x0.shape[0] != 3:
            raise ValueError(f"x0 must be (3, H, W), got {self.x0.shape}")
        if self.hole_mask.shape != self.x0.shape[1:]:
            raise ValueError("hole_mask spatial shape must match x0")
        _check_binary(self.hole_mask)
        if not (0 <= self.label < NUM_LABELS):
            raise ValueError(f"label {self.label} outside [0, {NUM_LABELS - 1}]")


def label_of(shape_idx: int, color_idx: int) -> int:
    return shape_idx * len(COLOR_PROTOTYPES) + color_idx


def decode_label(label: int) -> tuple[int, int]:
    return label // len(COLOR_PROTOTYPES), label % len(COLOR_PROTOTYPES)


def _check_binary(mask: np.ndarray) -> None:
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("mask must be binary (values in {0, 1})")


def _shifted(mask: np.ndarray, di: int, dj: int) -> np.ndarray:
    """mask shifted so out[i, j] = mask[i + di, j + dj], zeros out of bounds."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_i = slice(max(di, 0), h + min(di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[dst_i, dst_j] = mask[src_i, src_j]
    return out


def dilate(mask: np.ndarray, kernel_size: int = KERNEL_SIZE, iterations: int = 1) -> np.ndarray:
    """Binary dilation with an all-ones kernel anchored at (k//2, k//2).

    A seed pixel at (i, j) spawns the block rows i-k//2 .. i+k-1-k//2 (for
    k=8: i-4 .. i+3), columns likewise. Out-of-bounds reads count as 0.
    """
    _check_binary(mask)
    anchor = kernel_size // 2
    out = mask.astype(np.uint8)
    for _ in range(iterations):
        acc = np.zeros_like(out)
        for ki in range(kernel_size):
            for kj in range(kernel_size):
                acc |= _shifted(out, anchor - ki, anchor - kj)
        out = acc
    return out


def erode(mask: np.ndarray, kernel_size: int = KERNEL_SIZE, iterations: int = 1) -> np.ndarray:
    """Binary erosion: a pixel survives iff the full anchored kernel footprint
    lies inside the mask. Out-of-bounds counts as 0, so border pixels die."""
    _check_binary(mask)
    anchor = kernel_size // 2
    out = mask.astype(np.uint8)
    for _ in range(iterations):
        acc = np.ones_like(out)
        for ki in range(kernel_size):
            for kj in range(kernel_size):
                acc &= _shifted(out, ki - anchor, kj - anchor)
        out = acc
    return out


def make_bench_mask(seg_mask: np.ndarray) -> np.ndarray:
    """Roughen a segmentation mask: erode x2 then dilate x2 (8x8 ones kernel).

    Small or thin supports are annihilated by the erosion; those fall back to
    plain dilation x2 of the input.
    """
    out = dilate(erode(seg_mask, KERNEL_SIZE, 2), KERNEL_SIZE, 2)
    if out.sum() == 0:
        out = dilate(seg_mask, KERNEL_SIZE, 2)
    return out


def _round_div(num: int, den: int) -> int:
    return num // den if den else 0


def _render_object(rng: np.random.Generator, size: int) -> tuple[np.ndarray, int]:
    """Rasterize one filled shape fully inside the canvas; returns (support, shape_idx)."""
    shape_idx = int(rng.integers(len(SHAPE_NAMES)))
    support = np.zeros((size, size), dtype=np.uint8)
    if shape_idx == 0:  # circle
        r = int(rng.integers(4, 9))
        cy = int(rng.integers(r, size - r))
        cx = int(rng.integers(r, size - r))
        yy, xx = np.ogrid[:size, :size]
        support[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    elif shape_idx == 1:  # axis-aligned square
        half = int(rng.integers(3, 8))
        cy = int(rng.integers(half, size - half))
        cx = int(rng.integers(half, size - half))
        support[cy - half : cy + half + 1, cx - half : cx + half + 1] = 1
    else:  # isoceles triangle, apex up; row widths floor-interpolated
        height = int(rng.integers(7, 14))
        base_half = int(rng.integers(height // 2, height))
        top = int(rng.integers(0, size - height + 1))
        left = int(rng.integers(0, size - (2 * base_half + 1) + 1))
        ccol = left + base_half
        for r in range(height):
            hw = _round_div(base_half * r, height - 1)
            support[top + r, ccol - hw : ccol + hw + 1] = 1
    return support, shape_idx


def _render(seed: int, size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray, int]:
    """Deterministic renderer; returns (x0, object support, label)."""
    rng = np.random.default_rng(seed)
    c_top = rng.uniform(-BG_COLOR_RANGE, BG_COLOR_RANGE, 3)
    c_bot = rng.uniform(-BG_COLOR_RANGE, BG_COLOR_RANGE, 3)
    rows = np.linspace(0.0, 1.0, size)[None, :, None]
    x0 = (1.0 - rows) * c_top[:, None, None] + rows * c_bot[:, None, None]
    x0 = x0 + rng.uniform(-BG_NOISE_RANGE, BG_NOISE_RANGE, (3, size, size))
    x0 = np.clip(x0, -1.0, 1.0)
    support, shape_idx = _render_object(rng, size)
    color_idx = int(rng.integers(len(COLOR_PROTOTYPES)))
    x0 = np.where(support[None, :, :] == 1, COLOR_PROTOTYPES[color_idx][:, None, None], x0)
    return x0.astype(np.float32), support, label_of(shape_idx, color_idx)


def synth_sample(seed: int) -> InpaintSample:
    """Render one training sample. Pure function of the seed."""
    x0, support, label = _render(seed)
    hole = dilate(support, KERNEL_SIZE, 1)
    return InpaintSample(x0=x0, hole_mask=hole, label=label, seed=int(seed))


def make_dataset(cfg: DataConfig) -> list[InpaintSample]:
    return [synth_sample(derive_seed(cfg.seed, "sample", i)) for i in range(cfg.dataset_size)]


def bench_sample(seed: int) -> InpaintSample | None:
    """Benchmark sample with a roughened hole mask.

    Returns None when the bench mask misses the coverage window or no longer
    contains the object, so callers can skip to the next candidate seed.
    """
    x0, support, label = _render(seed)
    mask = make_bench_mask(support)
    frac = mask.mean()
    if mask.sum() == 0 or frac < MIN_HOLE_FRACTION or frac > MAX_HOLE_FRACTION:
        return None
    if np.any(support & (1 - mask)):
        return None
    return InpaintSample(x0=x0, hole_mask=mask, label=label, seed=int(seed))


def build_benchset(n: int, seed: int) -> list[InpaintSample]:
    """First n candidate seeds (in deterministic order) with valid bench masks."""
    if n < 1:
        raise ValueError("benchset size must be >= 1")
    samples: list[InpaintSample] = []
    k = 0
    while len(samples) < n:
        cand = bench_sample(derive_seed(seed, "bench", k))
        k += 1
        if cand is not None:
            samples.append(cand)
        if k > 100 * n + 1000:
            raise RuntimeError("benchset rejection loop failed to converge")
    return samples


def bench_manifest(samples: list[InpaintSample], seed: int) -> dict:
    return {"version": 1, "seed": int(seed), "n": len(samples), "sample_seeds": [s.seed for s in samples]}


def load_benchset(manifest: dict) -> list[InpaintSample]:
    samples = []
    for s in manifest["sample_seeds"]:
        smp = bench_sample(int(s))
        if smp is None:
            raise ValueError(f"manifest seed {s} no longer yields a valid bench sample")
        samples.append(smp)
    return samples


def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating values starting with a run of zeros."""
    flat = mask.reshape(-1).astype(np.uint8)
    runs: list[int] = []
    current, count = 0, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = int(v), 1
    runs.append(count)
    return runs


def rle_to_mask(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=np.uint8)
    pos, value = 0, 0
    for run in runs:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    if pos != flat.size:
        raise ValueError("run lengths do not cover the mask")
    return flat.reshape(shape)


def save_sample(sample: InpaintSample, directory: str, stem: str) -> str:
    """Flat-file export: raw little-endian float32 image + JSON sidecar."""
    os.makedirs(directory, exist_ok=True)
    raw = sample.x0.astype("<f4").tobytes()
    atomic_write_bytes(os.path.join(directory, f"{stem}.f32"), raw)
    sidecar = {
        "image_shape": list(sample.x0.shape),
        "dtype": "<f4",
        "label": int(sample.label),
        "seed": int(sample.seed),
        "mask_shape": list(sample.hole_mask.shape),
        "mask_rle": mask_to_rle(sample.hole_mask),
    }
    path = os.path.join(directory, f"{stem}.json")
    atomic_write_text(path, json.dumps(sidecar, indent=1))
    return path


def load_sample(sidecar_path: str) -> InpaintSample:
    with open(sidecar_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    raw_path = os.path.splitext(sidecar_path)[0] + ".f32"
    x0 = np.fromfile(raw_path, dtype=meta["dtype"]).reshape(meta["image_shape"])
    mask = rle_to_mask(meta["mask_rle"], tuple(meta["mask_shape"]))
    return InpaintSample(x0=x0.astype(np.float32), hole_mask=mask, label=meta["label"], seed=meta["seed"])
