"""Synthetic and ingested binary image datasets and their supervision targets."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .morphology import (
    BinarySet,
    StructuringElement,
    apply_op,
    dilate,
    encode_pbm,
)

GENERATOR_VERSION = "1"
DATASET_KINDS = ("diskorect", "mnist", "inverted_mnist", "axspa_synthetic")
TARGET_KINDS = ("dilation", "erosion", "opening", "closing", "white_tophat", "black_tophat",
                "axspa_joint")
SE_SHAPES = ("disk", "hstick", "dcross")
AXSPA_RADIUS = 20

_OP_NAMES = {
    "dilation": "dilate",
    "erosion": "erode",
    "opening": "open",
    "closing": "close",
    "white_tophat": "white_tophat",
    "black_tophat": "black_tophat",
}


def make_se(shape: str, side: int) -> StructuringElement:
    if side < 3 or side % 2 == 0:
        raise ValueError(f"side must be odd and >= 3, got {side}")
    r = side // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    if shape == "disk":
        mask = yy * yy + xx * xx <= r * r
    elif shape == "hstick":
        mask = yy == 0
    elif shape == "dcross":
        mask = (yy == xx) | (yy == -xx)
    else:
        raise ValueError(f"shape must be one of {SE_SHAPES}, got {shape!r}")
    return StructuringElement(mask)


def axspa_se() -> StructuringElement:
    """The 41-pixel horizontal segment used by the joint-region target."""
    mask = np.zeros((2 * AXSPA_RADIUS + 1,) * 2, dtype=bool)
    mask[AXSPA_RADIUS, :] = True
    return StructuringElement(mask)


MIN_SIZE = {"diskorect": 50, "axspa_synthetic": 128}


def _check_size(spec) -> None:
    least = MIN_SIZE.get(spec.kind, 1)
    if spec.size < least:
        raise ValueError(f"{spec.kind} images must be at least {least} pixels wide")


@dataclass
class DatasetSpec:
    kind: str = "diskorect"
    size: int = 70
    count: int = 1000
    seed: int = 0
    source_path: str | None = None
    max_rectangles: int = 6
    max_ellipses: int = 6
    complement_prob: float = 0.5
    # per-pixel flip probability applied to diskorect shapes before complementation
    noise_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.noise_prob < 0.5:
            raise ValueError(f"noise_prob must lie in [0, 0.5), got {self.noise_prob}")
        if self.count < 1:
            raise ValueError("count must be positive")
        _check_size(self)


@dataclass
class TargetOp:
    kind: str
    se: StructuringElement | None = None

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"target kind must be one of {TARGET_KINDS}, got {self.kind!r}")
        if self.kind == "axspa_joint":
            self.se = self.se or axspa_se()
        elif self.se is None:
            raise ValueError(f"target {self.kind!r} needs a structuring element")

    @property
    def in_channels(self) -> int:
        return 2 if self.kind == "axspa_joint" else 1

    def __call__(self, channels: list[BinarySet]) -> BinarySet:
        if self.kind == "axspa_joint":
            a, b = channels
            return dilate(a, self.se) & dilate(b, self.se)
        (x,) = channels
        return apply_op(_OP_NAMES[self.kind], x, self.se)


# --- Diskorect ----------------------------------------------------------------

def _draw_rectangle(canvas: np.ndarray, rng: np.random.Generator) -> None:
    size = canvas.shape[0]
    hi = max(4, size // 2 + 1)
    h, w = rng.integers(3, hi, size=2)
    cy, cx = rng.integers(0, size, size=2)
    y0, x0 = max(0, cy - h // 2), max(0, cx - w // 2)
    canvas[y0:cy - h // 2 + h, x0:cx - w // 2 + w] = True


def _draw_ellipse(canvas: np.ndarray, rng: np.random.Generator, yy, xx) -> None:
    size = canvas.shape[0]
    hi = max(3, size // 4 + 1)
    a, b = rng.integers(2, hi, size=2)
    cy, cx = rng.uniform(0, size, size=2)
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    canvas |= (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _diskorect_image(rng: np.random.Generator, spec: DatasetSpec, yy, xx) -> np.ndarray:
    size = spec.size
    while True:
        canvas = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(1, spec.max_rectangles + 1)):
            _draw_rectangle(canvas, rng)
        for _ in range(rng.integers(1, spec.max_ellipses + 1)):
            _draw_ellipse(canvas, rng, yy, xx)
        if spec.noise_prob > 0:
            canvas ^= rng.random(canvas.shape) < spec.noise_prob
        if rng.random() < spec.complement_prob:
            canvas = ~canvas
        if canvas.any() and not canvas.all():
            return canvas


def gen_diskorect(spec: DatasetSpec) -> Iterator[BinarySet]:
    """Random filled rectangles and ellipses; each image is complemented with probability 1/2."""
    _check_size(spec)
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:spec.size, 0:spec.size]
    for _ in range(spec.count):
        yield BinarySet.from_array(_diskorect_image(rng, spec, yy, xx))


# --- MNIST ---------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
MNIST_SIZE = 50


class IDXFormatError(ValueError):
    pass


def read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise IDXFormatError("truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IDXFormatError(f"bad IDX magic 0x{magic:08x}")
    expected = count * rows * cols
    if len(data) - 16 < expected:
        raise IDXFormatError(f"truncated IDX body: need {expected} bytes, got {len(data) - 16}")
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=16).reshape(count, rows, cols)


def upsize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return image[rows[:, None], cols[None, :]]


def load_mnist(path, invert: bool = False, size: int = MNIST_SIZE) -> Iterator[BinarySet]:
    """Threshold digits at > 127, upsize to ``size`` by nearest neighbour, optionally invert."""
    for digit in read_idx_images(path):
        mask = upsize_nearest(digit > 127, size)
        yield BinarySet.from_array(~mask if invert else mask)


# --- axSpA stand-in -------------------------------------------------------------

def _blob(rng: np.random.Generator, size: int, yy, xx) -> np.ndarray:
    canvas = np.zeros((size, size), dtype=bool)
    center = size / 2
    for _ in range(rng.integers(2, 5)):
        cy, cx = center + rng.normal(0, size / 10, size=2)
        a, b = rng.uniform(size / 8, size / 3.5, size=2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        dy, dx = yy - cy, xx - cx
        canvas |= ((c * dx + s * dy) / a) ** 2 + ((-s * dx + c * dy) / b) ** 2 <= 1.0
    return canvas


def axspa_pair(rng: np.random.Generator, size: int, gap: int, angle: float
               ) -> tuple[BinarySet, BinarySet]:
    """Split a random blob by a slab of ``gap`` pixels whose normal makes ``angle`` with x."""
    yy, xx = np.mgrid[0:size, 0:size]
    blob = _blob(rng, size, yy, xx)
    c = size // 2
    t = np.cos(angle) * (xx - c) + np.sin(angle) * (yy - c)
    first = blob & (t < 0)
    second = blob & (t >= gap)
    return BinarySet.from_array(first), BinarySet.from_array(second)


def gen_axspa_synthetic(spec: DatasetSpec) -> Iterator[tuple[BinarySet, BinarySet]]:
    """Two-channel pairs: blob halves separated by a randomly oriented 5-45 pixel gap."""
    _check_size(spec)
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.count):
        gap = int(rng.integers(5, 46))
        angle = float(rng.uniform(-np.pi / 3, np.pi / 3))
        yield axspa_pair(rng, spec.size, gap, angle)


# --- supervision ----------------------------------------------------------------

def images(spec: DatasetSpec) -> Iterator[list[BinarySet]]:
    """Input channel lists for any dataset kind."""
    if spec.kind == "diskorect":
        for img in gen_diskorect(spec):
            yield [img]
    elif spec.kind in ("mnist", "inverted_mnist"):
        if not spec.source_path:
            raise ValueError("MNIST datasets need source_path")
        stream = load_mnist(spec.source_path, invert=spec.kind == "inverted_mnist",
                            size=spec.size)
        for i, img in enumerate(stream):
            if i >= spec.count:
                break
            yield [img]
    else:
        for a, b in gen_axspa_synthetic(spec):
            yield [a, b]


def supervision_pairs(channel_lists, target: TargetOp) -> Iterator[tuple[list[BinarySet], BinarySet]]:
    for channels in channel_lists:
        if isinstance(channels, BinarySet):
            channels = [channels]
        channels = list(channels)
        if len(channels) != target.in_channels:
            raise ValueError(f"target {target.kind!r} expects {target.in_channels} channels")
        yield channels, target(channels)


def to_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Stack supervision pairs into boolean ``(M, N, H, W)`` and ``(M, 1, H, W)`` arrays."""
    xs, ys = [], []
    for channels, tgt in pairs:
        xs.append(np.stack([c.to_array() for c in channels]))
        ys.append(tgt.to_array()[None])
    return np.stack(xs), np.stack(ys)


def build_arrays(spec: DatasetSpec, target: TargetOp) -> tuple[np.ndarray, np.ndarray]:
    return to_arrays(supervision_pairs(images(spec), target))


def export_snapshot(spec: DatasetSpec, target: TargetOp | None, out_dir) -> Path:
    """Write every input channel (and target) as PBM files plus ``manifest.json``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, channels in enumerate(images(spec)):
        names = []
        for c, img in enumerate(channels):
            name = f"{i:06d}_in{c}.pbm"
            (root / name).write_bytes(encode_pbm(img))
            names.append(name)
        entry = {"inputs": names}
        if target is not None:
            name = f"{i:06d}_target.pbm"
            (root / name).write_bytes(encode_pbm(target(channels)))
            entry["target"] = name
        entries.append(entry)
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "dataset": asdict(spec),
        "target": None if target is None else {
            "kind": target.kind, "se": target.se.array.astype(int).tolist()},
        "images": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
