"""Binary morphology on bit-packed images.

Images are stored row-major, 64 pixels per ``uint64`` word, least significant
bit first. Pixels outside the grid are background: dilation drops shifted
points that leave the grid and erosion treats missing neighbours as 0.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WORD_BITS = 64
_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


class DimensionError(ValueError):
    """Raised when image or structuring element shapes are invalid or disagree."""


def _n_words(width: int) -> int:
    return (width + WORD_BITS - 1) // WORD_BITS


def _tail_mask(width: int) -> np.uint64:
    rem = width % WORD_BITS
    if rem == 0:
        return _ONES
    return np.uint64((1 << rem) - 1)


class BinarySet:
    """A set of pixels on a ``height x width`` grid, packed into 64-bit words.

    Instances are immutable; every operation returns a new set.
    """

    __slots__ = ("width", "height", "words")

    def __init__(self, width: int, height: int, words: np.ndarray):
        if width <= 0 or height <= 0:
            raise DimensionError(f"grid must be nonempty, got {height}x{width}")
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if words.shape != (height, _n_words(width)):
            raise DimensionError(
                f"expected words of shape {(height, _n_words(width))}, got {words.shape}"
            )
        words = words.copy() if words.flags.writeable else words
        words[:, -1] &= _tail_mask(width)
        words.flags.writeable = False
        self.width = int(width)
        self.height = int(height)
        self.words = words

    @classmethod
    def from_array(cls, array) -> BinarySet:
        arr = np.asarray(array)
        if arr.ndim != 2:
            raise DimensionError(f"expected a 2D array, got shape {arr.shape}")
        height, width = arr.shape
        if height == 0 or width == 0:
            raise DimensionError("grid must be nonempty")
        nw = _n_words(width)
        padded = np.zeros((height, nw * WORD_BITS), dtype=bool)
        padded[:, :width] = arr.astype(bool)
        packed = np.packbits(padded, axis=1, bitorder="little")
        words = packed.view("<u8").astype(np.uint64)
        return cls(width, height, words)

    @classmethod
    def empty(cls, height: int, width: int) -> BinarySet:
        return cls(width, height, np.zeros((height, _n_words(width)), dtype=np.uint64))

    @classmethod
    def full(cls, height: int, width: int) -> BinarySet:
        return cls(width, height, np.full((height, _n_words(width)), _ONES, dtype=np.uint64))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_array(self) -> np.ndarray:
        as_bytes = self.words.astype("<u8").view(np.uint8)
        bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
        return bits[:, : self.width].astype(bool)

    def __contains__(self, point) -> bool:
        x, y = point
        if not (0 <= x < self.width and 0 <= y < self.height):
            return False
        word = int(self.words[y, x // WORD_BITS])
        return bool((word >> (x % WORD_BITS)) & 1)

    def count(self) -> int:
        return int(np.bitwise_count(self.words).sum())

    def is_empty(self) -> bool:
        return not self.words.any()

    def _check_same(self, other: BinarySet) -> None:
        if not isinstance(other, BinarySet):
            raise TypeError(f"expected BinarySet, got {type(other).__name__}")
        if self.shape != other.shape:
            raise DimensionError(f"shape mismatch: {self.shape} vs {other.shape}")

    def __and__(self, other: BinarySet) -> BinarySet:
        self._check_same(other)
        return BinarySet(self.width, self.height, self.words & other.words)

    def __or__(self, other: BinarySet) -> BinarySet:
        self._check_same(other)
        return BinarySet(self.width, self.height, self.words | other.words)

    def __sub__(self, other: BinarySet) -> BinarySet:
        self._check_same(other)
        return BinarySet(self.width, self.height, self.words & ~other.words)

    def __invert__(self) -> BinarySet:
        return complement(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinarySet):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    def __hash__(self) -> int:
        return hash((self.shape, self.words.tobytes()))

    def issubset(self, other: BinarySet) -> bool:
        self._check_same(other)
        return not (self.words & ~other.words).any()

    def tail_bits_clear(self) -> bool:
        return not (self.words[:, -1] & ~_tail_mask(self.width)).any()

    def __repr__(self) -> str:
        return f"BinarySet({self.height}x{self.width}, count={self.count()})"


class StructuringElement:
    """A binary structuring element on an odd ``side x side`` support, origin at center."""

    __slots__ = ("mask",)

    def __init__(self, mask):
        if not isinstance(mask, BinarySet):
            mask = BinarySet.from_array(mask)
        if mask.width != mask.height or mask.width % 2 == 0:
            raise DimensionError(f"structuring element must be odd and square, got {mask.shape}")
        self.mask = mask

    @classmethod
    def origin(cls, side: int = 1) -> StructuringElement:
        arr = np.zeros((side, side), dtype=bool)
        arr[side // 2, side // 2] = True
        return cls(arr)

    @classmethod
    def square(cls, side: int) -> StructuringElement:
        return cls(np.ones((side, side), dtype=bool))

    @property
    def side(self) -> int:
        return self.mask.width

    @property
    def radius(self) -> int:
        return self.side // 2

    @property
    def array(self) -> np.ndarray:
        return self.mask.to_array()

    def offsets(self) -> list[tuple[int, int]]:
        """``(dy, dx)`` offsets of the member pixels relative to the origin."""
        r = self.radius
        ys, xs = np.nonzero(self.array)
        return [(int(y) - r, int(x) - r) for y, x in zip(ys, xs)]

    def __len__(self) -> int:
        return self.mask.count()

    def reflect(self) -> StructuringElement:
        return StructuringElement(self.array[::-1, ::-1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, StructuringElement):
            return NotImplemented
        return self.mask == other.mask

    def __hash__(self) -> int:
        return hash(self.mask)

    def __repr__(self) -> str:
        return f"StructuringElement(side={self.side}, card={len(self)})"


def _as_se(se) -> StructuringElement:
    return se if isinstance(se, StructuringElement) else StructuringElement(se)


def _shift_columns(words: np.ndarray, dx: int, fill: int = 0) -> np.ndarray:
    """Move every pixel from column ``x`` to ``x + dx`` within each row."""
    if dx == 0:
        return words.copy()
    nw = words.shape[1]
    q, r = divmod(abs(dx), WORD_BITS)
    fill_word = _ONES if fill else np.uint64(0)
    out = np.full_like(words, fill_word)
    if q >= nw:
        return out
    if dx > 0:
        src = words[:, : nw - q]
        if r:
            shifted = src << np.uint64(r)
            carry = np.empty_like(src)
            carry[:, 1:] = src[:, :-1] >> np.uint64(WORD_BITS - r)
            carry[:, 0] = (fill_word >> np.uint64(WORD_BITS - r))
            shifted |= carry
        else:
            shifted = src
        out[:, q:] = shifted
    else:
        src = words[:, q:]
        if r:
            shifted = src >> np.uint64(r)
            carry = np.empty_like(src)
            carry[:, :-1] = src[:, 1:] << np.uint64(WORD_BITS - r)
            # bits pulled in past the last stored word are padding (or fill)
            # bits pulled in from beyond the last word are outside the grid
            carry[:, -1] = fill_word << np.uint64(WORD_BITS - r)
            shifted |= carry
        else:
            shifted = src
        out[:, : nw - q] = shifted
    return out


def _shift_rows(words: np.ndarray, dy: int, fill: int) -> np.ndarray:
    if dy == 0:
        return words
    h = words.shape[0]
    out = np.full_like(words, _ONES if fill else np.uint64(0))
    if abs(dy) >= h:
        return out
    if dy > 0:
        out[dy:] = words[: h - dy]
    else:
        out[: h + dy] = words[-dy:]
    return out


def _combine_shifts(image: BinarySet, offsets: Iterable[tuple[int, int]], sign: int,
                    reduce, fill: int = 0) -> np.ndarray:
    by_dx: dict[int, list[int]] = {}
    for dy, dx in offsets:
        by_dx.setdefault(sign * dx, []).append(sign * dy)
    acc = None
    base = image.words
    if fill and image.width % WORD_BITS:
        base = base.copy()
        base[:, -1] |= ~_tail_mask(image.width)
    for dx in sorted(by_dx):
        cols = _shift_columns(base, dx, fill)
        for dy in sorted(by_dx[dx]):
            moved = _shift_rows(cols, dy, fill)
            if acc is None:
                acc = moved.copy()
            else:
                reduce(acc, moved, out=acc)
    return acc


def _check_image(image) -> BinarySet:
    if not isinstance(image, BinarySet):
        raise TypeError(f"expected BinarySet, got {type(image).__name__}")
    return image


def dilate(image: BinarySet, se) -> BinarySet:
    """Union of the translates ``image + s`` for ``s`` in ``se``, clipped to the grid."""
    image = _check_image(image)
    se = _as_se(se)
    offsets = se.offsets()
    if not offsets:
        return BinarySet.empty(image.height, image.width)
    words = _combine_shifts(image, offsets, +1, np.bitwise_or)
    return BinarySet(image.width, image.height, words)


def erode(image: BinarySet, se) -> BinarySet:
    """Intersection of the translates ``image - s`` for ``s`` in ``se``.

    A pixel survives iff every ``k + s`` is a foreground pixel of the grid.
    """
    image = _check_image(image)
    se = _as_se(se)
    offsets = se.offsets()
    if not offsets:
        return BinarySet.full(image.height, image.width)
    words = _combine_shifts(image, offsets, -1, np.bitwise_and)
    return BinarySet(image.width, image.height, words)


def _erode_by_duality(image: BinarySet, se) -> BinarySet:
    # complement with the outside of the grid set to foreground, dilate by the
    # reflected element, complement back
    se = _as_se(se)
    flipped = BinarySet(image.width, image.height, ~image.words)
    offsets = se.reflect().offsets()
    words = _combine_shifts(flipped, offsets, +1, np.bitwise_or, fill=1)
    return BinarySet(image.width, image.height, ~words)


def opening(image: BinarySet, se) -> BinarySet:
    return dilate(erode(image, se), se)


def closing(image: BinarySet, se) -> BinarySet:
    return erode(dilate(image, se), se)


def white_tophat(image: BinarySet, se) -> BinarySet:
    return image & complement(opening(image, se))


def black_tophat(image: BinarySet, se) -> BinarySet:
    return closing(image, se) & complement(image)


def complement(image: BinarySet) -> BinarySet:
    image = _check_image(image)
    return BinarySet(image.width, image.height, ~image.words)


def reflect(se) -> StructuringElement:
    return _as_se(se).reflect()


def union_all(images: Sequence[BinarySet]) -> BinarySet:
    images = list(images)
    if not images:
        raise ValueError("union_all needs at least one image")
    out = images[0]
    for img in images[1:]:
        out = out | img
    return out


def intersect_all(images: Sequence[BinarySet]) -> BinarySet:
    images = list(images)
    if not images:
        raise ValueError("intersect_all needs at least one image")
    out = images[0]
    for img in images[1:]:
        out = out & img
    return out


def thresholded_correlation(image, kernel, threshold: float) -> BinarySet:
    """Dense reference: pixel ``k`` is set iff ``sum_i image(k-i) * kernel(i) >= threshold``.

    The sum runs over kernel offsets ``i`` (origin at the kernel center) with
    ``k - i`` inside the grid.
    """
    img = image.to_array() if isinstance(image, BinarySet) else np.asarray(image)
    img = img.astype(np.float64)
    ker = kernel.array if isinstance(kernel, StructuringElement) else np.asarray(kernel)
    ker = ker.astype(np.float64)
    if img.ndim != 2 or ker.ndim != 2:
        raise DimensionError("image and kernel must be 2D")
    kh, kw = ker.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel sides must be odd, got {ker.shape}")
    h, w = img.shape
    ry, rx = kh // 2, kw // 2
    padded = np.zeros((h + 2 * ry, w + 2 * rx))
    padded[ry:ry + h, rx:rx + w] = img
    acc = np.zeros((h, w))
    for a in range(kh):
        for b in range(kw):
            weight = ker[a, b]
            if weight == 0.0:
                continue
            dy, dx = a - ry, b - rx
            # image(k - i) lives at padded[k - i + r]
            acc += weight * padded[ry - dy:ry - dy + h, rx - dx:rx - dx + w]
    return BinarySet.from_array(acc >= threshold)


_OPS = {
    "dilate": dilate,
    "erode": erode,
    "open": opening,
    "close": closing,
    "white_tophat": white_tophat,
    "black_tophat": black_tophat,
}


def apply_op(kind: str, image: BinarySet, se) -> BinarySet:
    try:
        return _OPS[kind](image, se)
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}; expected one of {sorted(_OPS)}") from None


def bench_throughput(image_size: int, se, op_kind: str = "dilate", repetitions: int = 100,
                     backend: str = "bitpacked", seed: int = 0) -> float:
    """Megapixels per second for ``op_kind`` (``dilate`` or ``erode``) on a random image.

    ``backend="dense"`` times :func:`thresholded_correlation` on the same workload.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if op_kind not in ("dilate", "erode"):
        raise ValueError(f"op_kind must be 'dilate' or 'erode', got {op_kind!r}")
    se = _as_se(se)
    rng = np.random.default_rng(seed)
    arr = rng.random((image_size, image_size)) < 0.5
    if backend == "bitpacked":
        image = BinarySet.from_array(arr)
        fn = dilate if op_kind == "dilate" else erode
        run = lambda: fn(image, se)  # noqa: E731
    elif backend == "dense":
        kernel = se.array if op_kind == "dilate" else se.array[::-1, ::-1]
        thr = 1.0 if op_kind == "dilate" else float(len(se))
        run = lambda: thresholded_correlation(arr, kernel, thr)  # noqa: E731
    else:
        raise ValueError(f"unknown backend {backend!r}")
    start = time.perf_counter()
    for _ in range(repetitions):
        run()
    elapsed = time.perf_counter() - start
    return image_size * image_size * repetitions / elapsed / 1e6


# --- PBM / PGM ---------------------------------------------------------------

def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def encode_pbm(image: BinarySet) -> bytes:
    arr = image.to_array()
    packed = np.packbits(arr, axis=1, bitorder="big")
    return f"P4\n{image.width} {image.height}\n".encode() + packed.tobytes()


def decode_pbm(data: bytes) -> BinarySet:
    tokens, pos = _read_header_tokens(data, 3)
    if tokens[0] != b"P4":
        raise ValueError(f"not a binary PBM (magic {tokens[0]!r})")
    width, height = int(tokens[1]), int(tokens[2])
    row_bytes = (width + 7) // 8
    body = data[pos:pos + row_bytes * height]
    if len(body) != row_bytes * height:
        raise ValueError("truncated PBM body")
    rows = np.frombuffer(body, dtype=np.uint8).reshape(height, row_bytes)
    bits = np.unpackbits(rows, axis=1, bitorder="big")[:, :width]
    return BinarySet.from_array(bits.astype(bool))


def write_pbm(path, image: BinarySet) -> None:
    Path(path).write_bytes(encode_pbm(image))


def read_pbm(path) -> BinarySet:
    return decode_pbm(Path(path).read_bytes())


def write_pgm(path, values, vmin: float | None = None, vmax: float | None = None) -> None:
    """Write a real grid as an 8-bit P5 image, linearly rescaled to [0, 255]."""
    arr = values.to_array() if isinstance(values, BinarySet) else np.asarray(values, dtype=np.float64)
    arr = arr.astype(np.float64)
    lo = arr.min() if vmin is None else vmin
    hi = arr.max() if vmax is None else vmax
    scale = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    pixels = np.clip(np.round(scale * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
