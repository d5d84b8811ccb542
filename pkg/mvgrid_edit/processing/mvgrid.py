"""
Multi-view grid and view-image types.

A grid is a single ``(GRID_ROWS * s, GRID_COLS * s, 3)`` float array holding six ``s x s`` tiles; tile ``k`` sits
at block ``(k // GRID_COLS, k % GRID_COLS)``. Values live in [-1, +1] and are stored on disk as 8-bit RGB PNG.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from mvgrid_edit.definitions import (
    BACKGROUND_VALUE,
    GRID_COLS,
    GRID_ROWS,
    LOGGER_NAME,
    MIN_TILE_SIZE,
    N_CHANNELS,
    N_VIEWS,
    ROLE_SUFFIXES,
    VALUE_MAX,
    VALUE_MIN,
)
from mvgrid_edit.errors import DataError, ShapeError

logger = logging.getLogger(LOGGER_NAME)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def _check_values(array: np.ndarray, what: str):
    if not np.all(np.isfinite(array)):
        raise ShapeError(f"{what} contains non-finite values")
    if array.size and (array.min() < VALUE_MIN or array.max() > VALUE_MAX):
        raise ShapeError(f"{what} values must lie in [{VALUE_MIN}, {VALUE_MAX}]")


def _clip(array: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    clipped = np.clip(array, VALUE_MIN, VALUE_MAX)
    fraction = float(np.mean(clipped != array)) if array.size else 0.0
    if fraction > 0:
        logger.warning(f"{what}: clipped {fraction:.2%} of values to [{VALUE_MIN}, {VALUE_MAX}]")
    return clipped, fraction


@dataclass(frozen=True, eq=False)
class ViewImage:
    """A single square RGB view (a grid tile or a condition view)."""

    pixels: np.ndarray
    clipped_fraction: float = field(default=0.0, compare=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], N_CHANNELS, axis=2)
        if pixels.ndim != 3 or pixels.shape[2] != N_CHANNELS:
            raise ShapeError(f"a view must have shape (s, s, {N_CHANNELS}), got {pixels.shape}")
        if pixels.shape[0] != pixels.shape[1]:
            raise ShapeError(f"views are square tiles, got {pixels.shape[0]}x{pixels.shape[1]}")
        if pixels.shape[0] < MIN_TILE_SIZE:
            raise ShapeError(f"tile size must be at least {MIN_TILE_SIZE}, got {pixels.shape[0]}")
        _check_values(pixels, "view")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @classmethod
    def from_array(cls, array, clip: bool = False) -> ViewImage:
        array = np.asarray(array, dtype=np.float64)
        if not clip:
            return cls(array)
        clipped, fraction = _clip(array, "view")
        return cls(clipped, clipped_fraction=fraction)

    @classmethod
    def null(cls, tile_size: int) -> ViewImage:
        """The all-zero view used as the unconditional input."""
        return cls(np.zeros((tile_size, tile_size, N_CHANNELS)))

    @property
    def tile_size(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class MvGrid:
    """Six views tiled ``GRID_ROWS`` x ``GRID_COLS``, stored as one row-major pixel buffer."""

    pixels: np.ndarray
    clipped_fraction: float = field(default=0.0, compare=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], N_CHANNELS, axis=2)
        if pixels.ndim != 3 or pixels.shape[2] != N_CHANNELS:
            raise ShapeError(f"a grid must have shape (3s, 2s, {N_CHANNELS}), got {pixels.shape}")
        height, width = pixels.shape[:2]
        if height % GRID_ROWS or width % GRID_COLS or height // GRID_ROWS != width // GRID_COLS:
            raise ShapeError(f"grid of {height}x{width} does not split into {GRID_ROWS}x{GRID_COLS} square tiles")
        if height // GRID_ROWS < MIN_TILE_SIZE:
            raise ShapeError(f"tile size must be at least {MIN_TILE_SIZE}, got {height // GRID_ROWS}")
        _check_values(pixels, "grid")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @classmethod
    def from_array(cls, array, clip: bool = False) -> MvGrid:
        array = np.asarray(array, dtype=np.float64)
        if not clip:
            return cls(array)
        clipped, fraction = _clip(array, "grid")
        return cls(clipped, clipped_fraction=fraction)

    @property
    def tile_size(self) -> int:
        return self.pixels.shape[0] // GRID_ROWS

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape

    @property
    def tiles(self) -> list[ViewImage]:
        return split(self)


def grid_shape(tile_size: int) -> tuple[int, int, int]:
    return (GRID_ROWS * tile_size, GRID_COLS * tile_size, N_CHANNELS)


def tile_of(grid_row: int, grid_col: int, tile_size: int) -> tuple[int, int, int]:
    """
    Map a global grid pixel to ``(tile index, local row, local col)``.

    >>> tile_of(20, 5, 16)
    (2, 4, 5)
    >>> tile_of(47, 31, 16)
    (5, 15, 15)
    """
    return (grid_row // tile_size) * GRID_COLS + grid_col // tile_size, grid_row % tile_size, grid_col % tile_size


def assemble(tiles: Sequence[ViewImage]) -> MvGrid:
    """Concatenate six views into a grid; tile ``k`` lands in block ``(k // 2, k % 2)``."""
    tiles = list(tiles)
    if len(tiles) != N_VIEWS:
        raise ShapeError(f"a grid needs exactly {N_VIEWS} tiles, got {len(tiles)}")
    shapes = {tile.shape for tile in tiles}
    if len(shapes) != 1:
        raise ShapeError(f"all tiles must share one shape, got {sorted(shapes)}")
    rows = [
        np.concatenate([tiles[row * GRID_COLS + col].pixels for col in range(GRID_COLS)], axis=1)
        for row in range(GRID_ROWS)
    ]
    return MvGrid(np.concatenate(rows, axis=0))


def split(grid: MvGrid) -> list[ViewImage]:
    s = grid.tile_size
    return [
        ViewImage(grid.pixels[row * s : (row + 1) * s, col * s : (col + 1) * s])
        for row in range(GRID_ROWS)
        for col in range(GRID_COLS)
    ]


def broadcast_view(view: np.ndarray) -> np.ndarray:
    """Repeat a view array ``(..., s, s, C)`` into every tile slot of a grid array ``(..., 3s, 2s, C)``."""
    view = np.asarray(view)
    reps = (1,) * (view.ndim - 3) + (GRID_ROWS, GRID_COLS, 1)
    return np.tile(view, reps)


def draw_noise(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Grid or condition noise: i.i.d. standard normal entries of the given shape."""
    return rng.standard_normal(shape)


def quantize(values: np.ndarray) -> np.ndarray:
    """
    Map [-1, +1] values to bytes with round-half-up, ``round((v + 1) * 127.5)``.

    >>> quantize(np.array([-1.0, 0.0, 1.0])).tolist()
    [0, 128, 255]
    """
    return np.clip(np.floor((np.asarray(values, dtype=np.float64) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def dequantize(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) / 127.5 - 1.0


ImageLike = Union[ViewImage, MvGrid, np.ndarray]


def write_image(image: ImageLike, path: Path | str) -> Path:
    path = Path(path)
    pixels = image if isinstance(image, np.ndarray) else image.pixels
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(pixels)).save(path, format="PNG")
    return path


def read_image(path: Path | str, tile_size: Optional[int] = None, kind: Optional[str] = None) -> ViewImage | MvGrid:
    """
    Read a PNG written by :func:`write_image`.

    Square images come back as :class:`ViewImage`, 3x2-tiled ones as :class:`MvGrid`. ``kind`` ("view" or "grid")
    and ``tile_size`` restrict what is accepted.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as err:
        raise DataError(f"could not read image {path}: {err}") from err
    values = dequantize(pixels)
    height, width = values.shape[:2]
    if kind is None:
        kind = "view" if height == width else "grid"
    if kind == "view":
        image = ViewImage(values)
    elif kind == "grid":
        image = MvGrid(values)
    else:
        raise ValueError(f"kind must be 'view' or 'grid', got {kind!r}")
    if tile_size is not None and image.tile_size != tile_size:
        raise ShapeError(f"{path} has tile size {image.tile_size}, expected {tile_size}")
    return image


def role_path(stem: Path | str, role: str) -> Path:
    """
    File name for an image with a role suffix; a trailing ``.png`` on ``stem`` is dropped first.

    >>> role_path("out/chair", "edit").as_posix()
    'out/chair_edit.png'
    >>> role_path("out/chair.png", "tar").as_posix()
    'out/chair_tar.png'
    """
    if role not in ROLE_SUFFIXES:
        raise ValueError(f"unknown role {role!r}, expected one of {list(ROLE_SUFFIXES)}")
    stem = Path(stem)
    if stem.suffix.lower() == ".png":
        stem = stem.with_suffix("")
    return stem.with_name(f"{stem.name}{ROLE_SUFFIXES[role]}.png")


def side_by_side(images: Sequence[ImageLike], gap: int = 2) -> np.ndarray:
    """Lay images out left to right, top aligned, separated by ``gap`` background columns."""
    arrays = [image if isinstance(image, np.ndarray) else image.pixels for image in images]
    if not arrays:
        raise ShapeError("nothing to lay out")
    height = max(a.shape[0] for a in arrays)
    parts = []
    for i, array in enumerate(arrays):
        if i:
            parts.append(np.full((height, gap, N_CHANNELS), BACKGROUND_VALUE))
        padded = np.full((height, array.shape[1], N_CHANNELS), BACKGROUND_VALUE)
        padded[: array.shape[0]] = array
        parts.append(padded)
    return np.concatenate(parts, axis=1)
