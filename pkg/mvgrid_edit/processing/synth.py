"""
Procedural scenes of spheres and boxes, rendered by orthographic ray casting into an mv-grid plus a frontal
condition view, with scripted edits that give ground-truth (source, edited) pairs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from mvgrid_edit.definitions import (
    AMBIENT,
    BACKGROUND_VALUE,
    CAMERA_DISTANCE,
    COND_AZIMUTH_DEG,
    COND_ELEVATION_DEG,
    DEFAULT_TILE_SIZE,
    EDIT_KINDS,
    GRID_AZIMUTHS_DEG,
    GRID_ELEVATIONS_DEG,
    LIGHT_DIRECTION,
    LOGGER_NAME,
    MANIFEST_NAME,
    MANIFEST_VERSION,
    MAX_PRIMITIVE_SIZE,
    MAX_PRIMITIVES,
    MIN_PRIMITIVE_SIZE,
    MIN_PRIMITIVES,
    MIN_TILE_SIZE,
    N_CHANNELS,
    N_VIEWS,
    PRIMITIVE_KINDS,
    SCENE_FILES,
    SCENES_DIR,
    VIEW_HALF_EXTENT,
)
from mvgrid_edit.errors import ConfigError, DataError
from mvgrid_edit.processing.mvgrid import MvGrid, ViewImage, assemble, quantize, read_image, write_image

logger = logging.getLogger(LOGGER_NAME)

MAX_EDIT_ATTEMPTS = 32


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple[float, float, float]
    size: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ConfigError(f"unknown primitive kind {self.kind!r}")
        if not self.size > 0:
            raise ConfigError(f"primitive size must be positive, got {self.size}")
        if len(self.center) != 3 or any(abs(c) + self.size > 1.0 + 1e-12 for c in self.center):
            raise ConfigError(f"{self.kind} at {self.center} with size {self.size} does not fit in the unit cube")
        if len(self.color) != N_CHANNELS or any(not -1.0 <= c <= 1.0 for c in self.color):
            raise ConfigError(f"color must be {N_CHANNELS} values in [-1, 1], got {self.color}")

    @classmethod
    def from_dict(cls, d: dict) -> Primitive:
        return cls(kind=d["kind"], center=tuple(d["center"]), size=d["size"], color=tuple(d["color"]))


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    seed: int = 0

    def __post_init__(self):
        if not MIN_PRIMITIVES <= len(self.primitives) <= MAX_PRIMITIVES:
            raise ConfigError(f"a scene holds {MIN_PRIMITIVES}-{MAX_PRIMITIVES} primitives, got {len(self.primitives)}")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        return cls(primitives=tuple(Primitive.from_dict(p) for p in d["primitives"]), seed=d["seed"])


@dataclass(frozen=True)
class SceneEdit:
    kind: str
    target: int
    color: Optional[tuple[float, float, float]] = None
    primitive: Optional[Primitive] = None
    scale: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "color": None if self.color is None else list(self.color),
            "primitive": None if self.primitive is None else asdict(self.primitive),
            "scale": self.scale,
        }


@dataclass(frozen=True)
class Camera:
    azimuth_deg: float
    elevation_deg: float

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(right, up, back)``: image axes and the unit vector from the origin towards the camera."""
        if not (math.isfinite(self.azimuth_deg) and math.isfinite(self.elevation_deg)):
            raise ConfigError(f"degenerate camera {self}")
        if abs(self.elevation_deg) >= 90.0:
            raise ConfigError(f"degenerate camera {self}: elevation must lie strictly inside (-90, 90)")
        az, el = math.radians(self.azimuth_deg), math.radians(self.elevation_deg)
        back = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        right = np.array([math.cos(az), 0.0, -math.sin(az)])
        up = np.cross(back, right)
        return right, up, back


@dataclass(frozen=True)
class CameraSet:
    grid: tuple[Camera, ...]
    cond: Camera

    def __post_init__(self):
        if len(self.grid) != N_VIEWS:
            raise ConfigError(f"a camera set needs {N_VIEWS} grid cameras, got {len(self.grid)}")

    @classmethod
    def default(cls) -> CameraSet:
        return cls(
            grid=tuple(Camera(az, el) for az, el in zip(GRID_AZIMUTHS_DEG, GRID_ELEVATIONS_DEG)),
            cond=Camera(COND_AZIMUTH_DEG, COND_ELEVATION_DEG),
        )

    def to_dict(self) -> dict:
        return {"grid": [asdict(c) for c in self.grid], "cond": asdict(self.cond)}


def _intersect_sphere(origins, direction, prim: Primitive):
    oc = origins - np.asarray(prim.center)
    b = oc @ direction
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - prim.size**2)
    hit = disc >= 0
    depth = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
    hit &= depth > 0
    depth = np.where(hit, depth, 0.0)
    normals = (origins + depth[:, None] * direction - np.asarray(prim.center)) / prim.size
    return np.where(hit, depth, np.inf), normals


def _intersect_box(origins, direction, prim: Primitive):
    lo = np.asarray(prim.center) - prim.size
    hi = np.asarray(prim.center) + prim.size
    t_min = np.empty_like(origins)
    t_max = np.empty_like(origins)
    for axis in range(3):
        o = origins[:, axis]
        d = direction[axis]
        if abs(d) < 1e-12:
            inside = (o >= lo[axis]) & (o <= hi[axis])
            t_min[:, axis] = np.where(inside, -np.inf, np.inf)
            t_max[:, axis] = np.where(inside, np.inf, -np.inf)
        else:
            t1 = (lo[axis] - o) / d
            t2 = (hi[axis] - o) / d
            t_min[:, axis] = np.minimum(t1, t2)
            t_max[:, axis] = np.maximum(t1, t2)
    near = t_min.max(axis=1)
    far = t_max.min(axis=1)
    hit = (near <= far) & (far > 0) & (near > 0)
    entry_axis = t_min.argmax(axis=1)
    normals = np.zeros_like(origins)
    normals[np.arange(len(origins)), entry_axis] = -np.sign(direction[entry_axis])
    return np.where(hit, near, np.inf), normals


INTERSECTORS = {"sphere": _intersect_sphere, "box": _intersect_box}


def render_view(scene: Scene, camera: Camera, tile_size: int) -> np.ndarray:
    """
    Ray cast one orthographic view of ``scene``; returns an (s, s, 3) array with background -1.

    Surface value is the primitive color, mapped to [0, 1], times ``AMBIENT + (1 - AMBIENT) * max(0, n . l)``.
    """
    if tile_size < MIN_TILE_SIZE:
        raise ConfigError(f"tile size must be at least {MIN_TILE_SIZE}, got {tile_size}")
    right, up, back = camera.basis()
    coords = -VIEW_HALF_EXTENT + (np.arange(tile_size) + 0.5) * (2.0 * VIEW_HALF_EXTENT / tile_size)
    u = np.tile(coords, tile_size)
    v = np.repeat(coords[::-1], tile_size)
    origins = CAMERA_DISTANCE * back + u[:, None] * right + v[:, None] * up
    direction = -back

    depth = np.full(tile_size * tile_size, np.inf)
    image = np.full((tile_size * tile_size, N_CHANNELS), BACKGROUND_VALUE)
    light = np.asarray(LIGHT_DIRECTION)
    for prim in scene.primitives:
        prim_depth, normals = INTERSECTORS[prim.kind](origins, direction, prim)
        closer = prim_depth < depth
        if not closer.any():
            continue
        depth = np.where(closer, prim_depth, depth)
        lambert = np.clip(normals[closer] @ light, 0.0, None)
        base = (np.asarray(prim.color) + 1.0) / 2.0
        lit = base[None, :] * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]
        image[closer] = 2.0 * lit - 1.0
    return image.reshape(tile_size, tile_size, N_CHANNELS)


def render_views(
    scene: Scene, cams: Optional[CameraSet] = None, tile_size: int = DEFAULT_TILE_SIZE
) -> tuple[MvGrid, ViewImage]:
    """Render the six grid views (tile ``k`` from camera ``k``) and the condition view."""
    cams = cams or CameraSet.default()
    tiles = [ViewImage(render_view(scene, camera, tile_size)) for camera in cams.grid]
    return assemble(tiles), ViewImage(render_view(scene, cams.cond, tile_size))


def _check_target(scene: Scene, edit: SceneEdit, upper: int):
    if not 0 <= edit.target < upper:
        raise ConfigError(f"{edit.kind} target {edit.target} does not exist in a scene of {len(scene.primitives)}")


def apply_scene_edit(scene: Scene, edit: SceneEdit) -> Scene:
    prims = list(scene.primitives)
    if edit.kind == "recolor":
        _check_target(scene, edit, len(prims))
        if edit.color is None:
            raise ConfigError("recolor needs a color")
        prims[edit.target] = replace(prims[edit.target], color=tuple(edit.color))
    elif edit.kind == "rescale":
        _check_target(scene, edit, len(prims))
        if edit.scale is None or not edit.scale > 0:
            raise ConfigError(f"rescale needs a positive scale, got {edit.scale}")
        prims[edit.target] = replace(prims[edit.target], size=prims[edit.target].size * edit.scale)
    elif edit.kind == "add_primitive":
        if len(prims) >= MAX_PRIMITIVES:
            raise ConfigError(f"cannot add a primitive, scene already holds {MAX_PRIMITIVES}")
        if edit.primitive is None:
            raise ConfigError("add_primitive needs a primitive")
        _check_target(scene, edit, len(prims) + 1)
        prims.insert(edit.target, edit.primitive)
    elif edit.kind == "remove_primitive":
        _check_target(scene, edit, len(prims))
        if len(prims) <= MIN_PRIMITIVES:
            raise ConfigError("cannot remove the last primitive of a scene")
        del prims[edit.target]
    else:
        raise ConfigError(f"unknown edit kind {edit.kind!r}, expected one of {list(EDIT_KINDS)}")
    return Scene(primitives=tuple(prims), seed=scene.seed)


def _round(values) -> tuple[float, ...]:
    return tuple(round(float(v), 6) for v in values)


def sample_primitive(rng: np.random.Generator) -> Primitive:
    size = round(float(rng.uniform(MIN_PRIMITIVE_SIZE, MAX_PRIMITIVE_SIZE)), 6)
    reach = 1.0 - size
    return Primitive(
        kind=PRIMITIVE_KINDS[int(rng.integers(len(PRIMITIVE_KINDS)))],
        center=_round(rng.uniform(-reach, reach, 3)),
        size=size,
        color=_round(rng.uniform(-1.0, 1.0, N_CHANNELS)),
    )


def sample_scene(rng: np.random.Generator, n_primitives: Optional[int] = None, seed: int = 0) -> Scene:
    if n_primitives is None:
        n_primitives = int(rng.integers(MIN_PRIMITIVES, MAX_PRIMITIVES + 1))
    return Scene(primitives=tuple(sample_primitive(rng) for _ in range(n_primitives)), seed=seed)


def sample_scene_edit(scene: Scene, kind: str, rng: np.random.Generator) -> SceneEdit:
    count = len(scene.primitives)
    if kind == "recolor":
        return SceneEdit(kind, int(rng.integers(count)), color=_round(rng.uniform(-1.0, 1.0, N_CHANNELS)))
    if kind == "add_primitive":
        return SceneEdit(kind, int(rng.integers(count + 1)), primitive=sample_primitive(rng))
    if kind == "remove_primitive":
        return SceneEdit(kind, int(rng.integers(count)))
    if kind == "rescale":
        target = int(rng.integers(count))
        prim = scene.primitives[target]
        max_scale = min((1.0 - abs(c)) / prim.size for c in prim.center)
        if max_scale >= 1.25 and rng.random() < 0.5:
            scale = rng.uniform(1.25, min(1.6, max_scale))
        else:
            scale = rng.uniform(0.5, 0.8)
        return SceneEdit(kind, target, scale=math.floor(float(scale) * 1e6) / 1e6)
    raise ConfigError(f"unknown edit kind {kind!r}, expected one of {list(EDIT_KINDS)}")


def _primitive_range(kind: str) -> tuple[int, int]:
    if kind == "add_primitive":
        return MIN_PRIMITIVES, MAX_PRIMITIVES - 1
    if kind == "remove_primitive":
        return MIN_PRIMITIVES + 1, MAX_PRIMITIVES
    return MIN_PRIMITIVES, MAX_PRIMITIVES


def make_scene_pair(kind: str, scene_seed: int, cams: CameraSet, tile_size: int):
    """One reproducible record: a scene, an edit of ``kind`` that changes at least one pixel, and both renders."""
    rng = np.random.default_rng(scene_seed)
    low, high = _primitive_range(kind)
    scene = sample_scene(rng, int(rng.integers(low, high + 1)), seed=scene_seed)
    src_grid, src_cond = render_views(scene, cams, tile_size)
    for _ in range(MAX_EDIT_ATTEMPTS):
        edit = sample_scene_edit(scene, kind, rng)
        edited = apply_scene_edit(scene, edit)
        tar_grid, tar_cond = render_views(edited, cams, tile_size)
        if np.any(quantize(tar_grid.pixels) != quantize(src_grid.pixels)):
            return scene, edit, (src_grid, src_cond, tar_grid, tar_cond)
    raise DataError(f"no visible {kind} edit found for scene seed {scene_seed}")


def make_dataset(
    n_scenes: int,
    seed: int,
    tile_size: int = DEFAULT_TILE_SIZE,
    out_dir: Path | str = ".",
    cams: Optional[CameraSet] = None,
) -> dict:
    """
    Render ``n_scenes`` (source, edited) scene pairs under ``out_dir`` and write the manifest.

    Edit kinds are dealt round-robin and shuffled, so every kind appears once ``n_scenes >= len(EDIT_KINDS)``.
    """
    if n_scenes < 1:
        raise ConfigError(f"n_scenes must be at least 1, got {n_scenes}")
    cams = cams or CameraSet.default()
    out_dir = Path(out_dir)
    master = np.random.default_rng(seed)
    kinds = [EDIT_KINDS[i] for i in master.permutation([i % len(EDIT_KINDS) for i in range(n_scenes)])]
    records = []
    for index, kind in enumerate(kinds):
        scene_id = f"{index:04d}"
        scene_seed = int(master.integers(0, 2**63))
        scene, edit, images = make_scene_pair(kind, scene_seed, cams, tile_size)
        files = {}
        for key, image in zip(SCENE_FILES, images):
            rel = Path(SCENES_DIR) / scene_id / SCENE_FILES[key]
            write_image(image, out_dir / rel)
            files[key] = rel.as_posix()
        records.append({"id": scene_id, "scene": scene.to_dict(), "edit": edit.to_dict(), "files": files})
        logger.debug(f"scene {scene_id}: {kind} on {len(scene.primitives)} primitives")

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "tile_size": tile_size,
        "cameras": cams.to_dict(),
        "records": records,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    logger.info(f"Rendered {n_scenes} scene pairs at tile size {tile_size} into {out_dir}")
    return manifest


@dataclass(frozen=True)
class SceneRecord:
    id: str
    src_grid: MvGrid
    src_cond: ViewImage
    tar_grid: MvGrid
    tar_cond: ViewImage
    scene: dict
    edit: dict


@dataclass(frozen=True)
class Dataset:
    records: tuple[SceneRecord, ...]
    tile_size: int
    seed: int

    def __len__(self) -> int:
        return len(self.records)


def load_dataset(directory: Path | str) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
    except (OSError, ValueError) as err:
        raise DataError(f"could not read dataset manifest in {directory}: {err}") from err
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')}")
    tile_size = manifest["tile_size"]
    records = []
    for entry in sorted(manifest["records"], key=lambda r: r["id"]):
        files = entry["files"]
        missing = [key for key in SCENE_FILES if key not in files or not (directory / files[key]).is_file()]
        if missing:
            raise DataError(f"scene {entry['id']} is missing {missing}")
        records.append(
            SceneRecord(
                id=entry["id"],
                src_grid=read_image(directory / files["src_grid"], tile_size, kind="grid"),
                src_cond=read_image(directory / files["src_cond"], tile_size, kind="view"),
                tar_grid=read_image(directory / files["tar_grid"], tile_size, kind="grid"),
                tar_cond=read_image(directory / files["tar_cond"], tile_size, kind="view"),
                scene=entry["scene"],
                edit=entry["edit"],
            )
        )
    return Dataset(records=tuple(records), tile_size=tile_size, seed=manifest["seed"])
