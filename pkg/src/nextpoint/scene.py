"""Synthetic nucleus scenes: generation, foreground masks and the on-disk format.

A scene is a small intensity grid holding bright disc-shaped blobs whose centroids
and instance masks are known exactly.  Arrays are indexed ``[row, col]``, i.e.
``[y, x]``; a pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)`` and its
center sits at ``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

FORMAT_NAME = "nextpoint-scene"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class Point(NamedTuple):
    x: float
    y: float


class SceneError(Exception):
    pass


class PlacementError(SceneError):
    """Rejection sampling could not satisfy the spacing constraints."""


class SceneFormatError(SceneError):
    pass


class VersionError(SceneFormatError):
    pass


class TruncatedFileError(SceneFormatError):
    pass


class ChecksumError(SceneFormatError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    count_min: int = 1
    count_max: int = 8
    radius_min: float = 3.0
    radius_max: float = 5.0
    min_sep: float = 12.0
    noise: float = 0.1
    # centroids are kept at least this far from the border
    margin: float = 3.0
    max_attempts: int = 10_000

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError(f"scene must be at least 16x16, got {self.width}x{self.height}")
        if self.min_sep <= 0:
            raise ValueError("min_sep must be positive")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError("radius range must be positive and ordered")
        if not 0 <= self.count_min <= self.count_max:
            raise ValueError("count range must be non-negative and ordered")
        if not 0 <= self.noise <= 1:
            raise ValueError("noise must lie in [0, 1]")
        if not 0 <= self.margin < min(self.width, self.height) / 2:
            raise ValueError("margin leaves no room for centroids")


@dataclass(eq=False)
class Instance:
    centroid: Point
    mask: np.ndarray  # bool, (H, W)
    radius: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            tuple(self.centroid) == tuple(other.centroid)
            and self.radius == other.radius
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(eq=False)
class Scene:
    width: int
    height: int
    intensity: np.ndarray  # float64, (H, W), values in [0, 1]
    instances: list[Instance] = field(default_factory=list)
    seed: int = 0

    @property
    def centroids(self) -> list[Point]:
        return [inst.centroid for inst in self.instances]

    @property
    def instance_masks(self) -> list[np.ndarray]:
        return [inst.mask for inst in self.instances]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.seed == other.seed
            and np.array_equal(self.intensity, other.intensity)
            and self.instances == other.instances
        )


def disc_mask(center: Point, radius: float, width: int, height: int) -> np.ndarray:
    """Pixels whose centers lie within ``radius`` of ``center``; clipped to the raster."""
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    d2 = (cols[None, :] - center.x) ** 2 + (rows[:, None] - center.y) ** 2
    return d2 <= radius * radius


def _blob(center: Point, radius: float, peak: float, width: int, height: int) -> np.ndarray:
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    r2 = ((cols[None, :] - center.x) ** 2 + (rows[:, None] - center.y) ** 2) / (radius * radius)
    return np.where(r2 <= 1.0, peak * (1.0 - 0.5 * r2), 0.0)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Place ``count`` non-overlapping discs by rejection sampling and render them.

    Two centroids are always at least ``max(min_sep, r_i + r_j + 1)`` apart, so the
    instance masks never share a pixel.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    W, H = config.width, config.height
    count = int(rng.integers(config.count_min, config.count_max + 1))

    centers: list[Point] = []
    radii: list[float] = []
    attempts = 0
    while len(centers) < count:
        if attempts >= config.max_attempts:
            raise PlacementError(
                f"could not place {count} nuclei with min_sep={config.min_sep} "
                f"in a {W}x{H} scene after {config.max_attempts} attempts"
            )
        attempts += 1
        radius = float(rng.uniform(config.radius_min, config.radius_max))
        x = float(rng.uniform(config.margin, W - config.margin))
        y = float(rng.uniform(config.margin, H - config.margin))
        ok = all(
            math.hypot(x - c.x, y - c.y) >= max(config.min_sep, radius + r + 1.0)
            for c, r in zip(centers, radii)
        )
        if ok:
            centers.append(Point(x, y))
            radii.append(radius)

    intensity = rng.uniform(0.0, config.noise, size=(H, W))
    instances = []
    for center, radius in zip(centers, radii):
        peak = float(rng.uniform(0.7, 1.0))
        intensity += _blob(center, radius, peak, W, H)
        instances.append(Instance(center, disc_mask(center, radius, W, H), radius))
    np.clip(intensity, 0.0, 1.0, out=intensity)
    return Scene(W, H, intensity, instances, int(seed))


def foreground_mask(scene: Scene) -> np.ndarray:
    fg = np.zeros((scene.height, scene.width), dtype=bool)
    for inst in scene.instances:
        fg |= inst.mask
    return fg


# ---------------------------------------------------------------- serialization

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating 0-runs and 1-runs, starting with a 0-run."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    if sum(runs) != height * width:
        raise TruncatedFileError(f"mask runs cover {sum(runs)} pixels, expected {height * width}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(bool).reshape(height, width)


def _payload(scene: Scene) -> dict:
    rows = [
        base64.b64encode(np.ascontiguousarray(row, dtype="<f8").tobytes()).decode("ascii")
        for row in scene.intensity
    ]
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "width": scene.width,
        "height": scene.height,
        "seed": scene.seed,
        "instances": [
            {
                "centroid": [inst.centroid.x, inst.centroid.y],
                "radius": inst.radius,
                "mask_rle": rle_encode(inst.mask),
            }
            for inst in scene.instances
        ],
        "intensity": {"encoding": "base64", "dtype": "<f8", "rows": rows},
    }


def _checksum(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def dumps_scene(scene: Scene) -> str:
    payload = _payload(scene)
    doc = dict(payload, checksum=_checksum(payload))
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads_scene(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TruncatedFileError(f"scene document is not complete JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise SceneFormatError("not a scene document")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported scene format version {version!r} (expected {FORMAT_VERSION})")
    try:
        stored = doc.pop("checksum")
        W, H = int(doc["width"]), int(doc["height"])
        raw_instances = doc["instances"]
        rows = doc["intensity"]["rows"]
        seed = int(doc["seed"])
    except (KeyError, TypeError) as exc:
        raise TruncatedFileError(f"scene document is missing field {exc}") from exc
    if _checksum(doc) != stored:
        raise ChecksumError("scene checksum does not match its contents")

    if len(rows) != H:
        raise TruncatedFileError(f"expected {H} intensity rows, found {len(rows)}")
    decoded = [np.frombuffer(base64.b64decode(r), dtype="<f8") for r in rows]
    if any(r.size != W for r in decoded):
        raise TruncatedFileError("intensity row has the wrong length")
    intensity = np.stack(decoded).astype(np.float64) if H else np.zeros((0, W))
    instances = [
        Instance(
            Point(float(rec["centroid"][0]), float(rec["centroid"][1])),
            rle_decode(rec["mask_rle"], H, W),
            float(rec["radius"]),
        )
        for rec in raw_instances
    ]
    return Scene(W, H, intensity, instances, seed)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(dumps_scene(scene), encoding="utf-8")


def load_scene(path: str | Path) -> Scene:
    return loads_scene(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- datasets

def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def write_dataset(
    out_dir: str | Path, config: SceneConfig, n_train: int, n_val: int, seed: int
) -> dict:
    """Write ``n_train + n_val`` scene files and a manifest listing them with split tags."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_train + n_val):
        split = "train" if i < n_train else "val"
        name = f"scene_{i:05d}.json"
        save_scene(generate_scene(config, scene_seed(seed, i)), out / name)
        entries.append({"file": name, "split": split})
    manifest = {
        "format": "nextpoint-dataset",
        "version": 1,
        "seed": seed,
        "scene_config": config.__dict__,
        "scenes": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"cannot read dataset manifest {path}: {exc}") from exc


def load_split(data_dir: str | Path, split: str) -> tuple[list[str], list[Scene]]:
    manifest = read_manifest(data_dir)
    names = [e["file"] for e in manifest["scenes"] if e["split"] == split]
    return names, [load_scene(Path(data_dir) / n) for n in names]
