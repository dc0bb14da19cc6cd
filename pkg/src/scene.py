"""
Gaussian-splat scene data model, GSVL/JSON/PLY persistence, Gaussian sampling and the
deterministic stand-in for the backbone's decoder levels.
"""
import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import LEVEL_SIZES, N_SAMPLE, QUAT_TOLERANCE, SCENE_MAGIC, SCENE_VERSION
from .errors import (
    BadMagicError, ChecksumError, EmptySceneError, FeatureWidthError, ShapeError,
    TruncatedPayloadError, VersionMismatchError,
)

# Configure logging
logger = logging.getLogger(__name__)

NO_INSTANCE = 0xFFFFFFFF
FLAG_INSTANCE_IDS = 0x01
FLAG_LABEL_TABLE = 0x02
SH_C0 = 0.28209479177387814


@dataclass(frozen=True)
class GaussianSplat:
    """One splat as seen through ``GaussianScene.splat``."""
    position: Tuple[float, float, float]
    scale: Tuple[float, float, float]
    rotation: Tuple[float, float, float, float]
    opacity: float
    color: Tuple[float, float, float]
    language_feature: np.ndarray
    instance_id: Optional[int]


@dataclass
class GaussianScene:
    """Struct-of-arrays scene: float32 attributes, one row per splat."""
    scene_id: str
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    instance_ids: Optional[np.ndarray] = None
    label_table: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32).reshape(-1, 3)
        n = self.positions.shape[0]
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float32).reshape(n, 4)
        self.opacity = np.ascontiguousarray(self.opacity, dtype=np.float32).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32).reshape(n, 3)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise FeatureWidthError(f"features must be {n} x d_f, got {self.features.shape}")
        if self.instance_ids is not None:
            self.instance_ids = np.ascontiguousarray(self.instance_ids, dtype=np.uint32).reshape(n)
        self.label_table = {int(k): str(v) for k, v in self.label_table.items()}

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box (min, max) around every position, in meters."""
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        positions = self.positions.astype(np.float64)
        return positions.min(axis=0), positions.max(axis=0)

    def splat(self, index: int) -> GaussianSplat:
        instance = None
        if self.instance_ids is not None and self.instance_ids[index] != NO_INSTANCE:
            instance = int(self.instance_ids[index])
        return GaussianSplat(
            position=tuple(float(x) for x in self.positions[index]),
            scale=tuple(float(x) for x in self.scales[index]),
            rotation=tuple(float(x) for x in self.rotations[index]),
            opacity=float(self.opacity[index]),
            color=tuple(float(x) for x in self.colors[index]),
            language_feature=self.features[index].copy(),
            instance_id=instance,
        )

    def validate(self) -> "GaussianScene":
        """Check the scene invariants, raising ShapeError on the first violation."""
        if len(self) == 0:
            return self
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > QUAT_TOLERANCE):
            raise ShapeError("rotation quaternions must have unit norm")
        if np.any(self.opacity < 0) or np.any(self.opacity > 1):
            raise ShapeError("opacity must lie in [0, 1]")
        if self.instance_ids is not None:
            present = set(int(i) for i in np.unique(self.instance_ids) if i != NO_INSTANCE)
            unknown = present - set(self.label_table)
            if unknown:
                raise ShapeError(f"instance ids without labels: {sorted(unknown)[:5]}")
        return self


def empty_scene(scene_id: str, feature_dim: int) -> GaussianScene:
    return GaussianScene(
        scene_id=scene_id,
        positions=np.zeros((0, 3)), scales=np.zeros((0, 3)), rotations=np.zeros((0, 4)),
        opacity=np.zeros(0), colors=np.zeros((0, 3)), features=np.zeros((0, feature_dim)),
    )


def normalize_quaternions(rotations: np.ndarray) -> np.ndarray:
    rotations = np.asarray(rotations, dtype=np.float64)
    norms = np.linalg.norm(rotations, axis=1, keepdims=True)
    return rotations / np.where(norms == 0, 1.0, norms)


# GSVL binary format

def save_scene(scene: GaussianScene) -> bytes:
    """Encode a scene as GSVL bytes (little-endian, CRC-32 trailer)."""
    scene.validate()
    n, d_f = len(scene), scene.feature_dim
    flags = 0
    if scene.instance_ids is not None:
        flags |= FLAG_INSTANCE_IDS
    if scene.label_table:
        flags |= FLAG_LABEL_TABLE

    buffer = io.BytesIO()
    buffer.write(SCENE_MAGIC)
    buffer.write(struct.pack("<IIIB", SCENE_VERSION, n, d_f, flags))
    for array in (scene.positions, scene.scales, scene.rotations, scene.opacity, scene.colors, scene.features):
        buffer.write(array.astype("<f4").tobytes())
    if flags & FLAG_INSTANCE_IDS:
        buffer.write(scene.instance_ids.astype("<u4").tobytes())
    if flags & FLAG_LABEL_TABLE:
        buffer.write(struct.pack("<I", len(scene.label_table)))
        for instance_id in sorted(scene.label_table):
            encoded = scene.label_table[instance_id].encode("utf-8")
            buffer.write(struct.pack("<IH", instance_id, len(encoded)))
            buffer.write(encoded)
    payload = buffer.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def load_scene(data: bytes, scene_id: str = "", feature_dim: Optional[int] = None) -> GaussianScene:
    """Decode GSVL bytes; every kind of corruption maps to a distinct format error."""
    header = 4 + 13
    if len(data) < 4 or data[:4] != SCENE_MAGIC:
        raise BadMagicError("not a GSVL scene")
    if len(data) < header + 4:
        raise TruncatedPayloadError("scene header truncated")
    version, n, d_f, flags = struct.unpack_from("<IIIB", data, 4)
    if version != SCENE_VERSION:
        raise VersionMismatchError(f"scene version {version}, expected {SCENE_VERSION}")
    if feature_dim is not None and d_f != feature_dim:
        raise FeatureWidthError(f"scene feature width {d_f}, expected {feature_dim}")

    fixed = n * (3 + 3 + 4 + 1 + 3 + d_f) * 4
    if flags & FLAG_INSTANCE_IDS:
        fixed += n * 4
    if len(data) < header + fixed + 4:
        raise TruncatedPayloadError(f"scene payload truncated: {len(data)} bytes for {n} splats")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("scene checksum mismatch")
    if flags & ~(FLAG_INSTANCE_IDS | FLAG_LABEL_TABLE):
        raise ShapeError(f"unknown scene flags {flags:#x}")

    offset = header

    def take(count: int, dtype: str, shape: Tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += count * 4
        return array.astype(np.float32 if dtype == "<f4" else np.uint32)

    positions = take(n * 3, "<f4", (n, 3))
    scales = take(n * 3, "<f4", (n, 3))
    rotations = take(n * 4, "<f4", (n, 4))
    opacity = take(n, "<f4", (n,))
    colors = take(n * 3, "<f4", (n, 3))
    features = take(n * d_f, "<f4", (n, d_f))
    instance_ids = take(n, "<u4", (n,)) if flags & FLAG_INSTANCE_IDS else None

    label_table: Dict[int, str] = {}
    try:
        if flags & FLAG_LABEL_TABLE:
            (count,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            for _ in range(count):
                instance_id, length = struct.unpack_from("<IH", payload, offset)
                offset += 6
                if offset + length > len(payload):
                    raise ShapeError("label table overruns payload")
                label_table[instance_id] = payload[offset:offset + length].decode("utf-8")
                offset += length
    except (struct.error, UnicodeDecodeError) as e:
        raise ShapeError(f"malformed label table: {e}") from e
    if offset != len(payload):
        raise ShapeError(f"{len(payload) - offset} unexpected trailing bytes in scene")

    scene = GaussianScene(scene_id, positions, scales, rotations, opacity, colors, features,
                          instance_ids, label_table)
    return scene.validate()


def write_scene(scene: GaussianScene, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        path.write_text(save_scene_json(scene))
    else:
        path.write_bytes(save_scene(scene))
    logger.info(f"Wrote scene {scene.scene_id} ({len(scene)} splats) to {path}")


def read_scene(path: Path, feature_dim: Optional[int] = None) -> GaussianScene:
    """Read a scene by extension: .gsvl binary, .json mirror or .ply 3DGS export."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scene not found: {path}")
    if path.suffix == ".json":
        scene = load_scene_json(path.read_text())
    elif path.suffix == ".ply":
        scene = load_ply_scene(path)
    else:
        scene = load_scene(path.read_bytes(), scene_id=path.stem)
    if feature_dim is not None and scene.feature_dim != feature_dim:
        raise FeatureWidthError(f"scene feature width {scene.feature_dim}, expected {feature_dim}")
    logger.info(f"Loaded scene {scene.scene_id} with {len(scene)} splats")
    return scene


# JSON mirror

def save_scene_json(scene: GaussianScene) -> str:
    record = {
        "scene_id": scene.scene_id,
        "positions": scene.positions.tolist(),
        "scales": scene.scales.tolist(),
        "rotations": scene.rotations.tolist(),
        "opacity": scene.opacity.tolist(),
        "colors": scene.colors.tolist(),
        "features": scene.features.tolist(),
    }
    if scene.instance_ids is not None:
        record["instance_ids"] = [None if i == NO_INSTANCE else int(i) for i in scene.instance_ids]
    if scene.label_table:
        record["label_table"] = {str(k): v for k, v in sorted(scene.label_table.items())}
    return json.dumps(record)


def load_scene_json(text: str) -> GaussianScene:
    """Parse the JSON mirror format used for hand-written scenes."""
    try:
        record = json.loads(text)
        features = record["features"]
        widths = {len(row) for row in features}
        if len(widths) > 1:
            raise FeatureWidthError(f"inconsistent feature widths {sorted(widths)}")
        n = len(record["positions"])
        d_f = widths.pop() if widths else int(record.get("feature_dim", 0))
        instance_ids = record.get("instance_ids")
        if instance_ids is not None:
            instance_ids = [NO_INSTANCE if i is None else int(i) for i in instance_ids]
        scene = GaussianScene(
            scene_id=record.get("scene_id", ""),
            positions=np.asarray(record["positions"], dtype=np.float64).reshape(n, 3),
            scales=np.asarray(record.get("scales", [[0.01] * 3] * n), dtype=np.float64).reshape(n, 3),
            rotations=np.asarray(record.get("rotations", [[1.0, 0.0, 0.0, 0.0]] * n), dtype=np.float64).reshape(n, 4),
            opacity=np.asarray(record.get("opacity", [1.0] * n), dtype=np.float64),
            colors=np.asarray(record.get("colors", [[0.5] * 3] * n), dtype=np.float64).reshape(n, 3),
            features=np.asarray(features, dtype=np.float64).reshape(n, d_f),
            instance_ids=instance_ids,
            label_table={int(k): v for k, v in record.get("label_table", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, FeatureWidthError):
            raise
        raise ShapeError(f"malformed JSON scene: {e}") from e
    return scene.validate()


# Standard 3DGS PLY exports

def load_ply_scene(path: Path, feature_prefix: str = "lang_") -> GaussianScene:
    """Read a 3DGS PLY export whose vertices carry ``lang_*`` language features."""
    from plyfile import PlyData

    plydata = PlyData.read(str(path))
    vertices = plydata["vertex"]
    names = [p.name for p in vertices.properties]
    feature_names = sorted((n for n in names if n.startswith(feature_prefix)),
                           key=lambda n: int(n[len(feature_prefix):]))
    if not feature_names:
        raise FeatureWidthError(f"{path} has no {feature_prefix}* language features")

    positions = np.vstack([vertices["x"], vertices["y"], vertices["z"]]).T
    scales = np.exp(np.vstack([vertices[f"scale_{i}"] for i in range(3)]).T)
    rotations = normalize_quaternions(np.vstack([vertices[f"rot_{i}"] for i in range(4)]).T)
    opacity = 1.0 / (1.0 + np.exp(-np.asarray(vertices["opacity"], dtype=np.float64)))
    colors = np.clip(0.5 + SH_C0 * np.vstack([vertices[f"f_dc_{i}"] for i in range(3)]).T, 0.0, 1.0)
    features = np.vstack([vertices[n] for n in feature_names]).T

    scene = GaussianScene(Path(path).stem, positions, scales, rotations, opacity, colors, features)
    return scene.validate()


# Sampling and mocked decoder levels

def sample_gaussians(scene: GaussianScene, n: int = N_SAMPLE, seed: int = 0) -> np.ndarray:
    """Draw exactly ``n`` splat indices; with replacement only for the remainder past ``len(scene)``."""
    if len(scene) == 0:
        raise EmptySceneError("cannot sample from an empty scene")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(scene))
    if len(scene) >= n:
        return order[:n]
    extra = rng.integers(0, len(scene), size=n - len(scene))
    return np.concatenate([order, extra])


@dataclass(frozen=True)
class TokenLevel:
    """Tokens of one mocked decoder level with their (chunk-mean) positions."""
    features: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def _part1by2(values: np.ndarray) -> np.ndarray:
    x = values.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def morton_codes(positions: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """63-bit Z-order codes of positions quantized to 21 bits per axis inside [lower, upper]."""
    extent = np.where(upper - lower > 0, upper - lower, 1.0)
    quantized = np.floor((positions - lower) / extent * ((1 << 21) - 1))
    quantized = np.clip(quantized, 0, (1 << 21) - 1)
    return (_part1by2(quantized[:, 0])
            | (_part1by2(quantized[:, 1]) << np.uint64(1))
            | (_part1by2(quantized[:, 2]) << np.uint64(2)))


def chunk_means(values: np.ndarray, chunks: int) -> np.ndarray:
    """Average ``values`` over ``chunks`` contiguous runs with boundaries floor(i*n/chunks)."""
    n = values.shape[0]
    starts = (np.arange(chunks, dtype=np.int64) * n) // chunks
    counts = np.diff(np.append(starts, n))
    return np.add.reduceat(values, starts, axis=0) / counts[:, None]


def mock_decoder_levels(scene: GaussianScene, sampled: Sequence[int],
                        level_sizes: Tuple[int, int] = LEVEL_SIZES) -> List[TokenLevel]:
    """Three token levels standing in for the backbone decoder: two spatial average-pools and the sample."""
    indices = np.asarray(sampled, dtype=np.int64)
    if indices.size == 0:
        raise EmptySceneError("cannot build decoder levels from an empty sample")

    lower, upper = scene.bounds
    positions = scene.positions[indices].astype(np.float64)
    codes = morton_codes(positions, lower, upper)
    # Ties broken by splat index so the result ignores the sample's ordering
    order = np.lexsort((indices, codes))
    positions = positions[order]
    features = scene.features[indices[order]].astype(np.float64)

    final = TokenLevel(features, positions)
    levels = []
    for size in level_sizes:
        if len(final) <= size:
            logger.warning(f"Sample of {len(final)} tokens is smaller than level size {size}; using the sample")
            levels.append(final)
        else:
            levels.append(TokenLevel(chunk_means(features, size), chunk_means(positions, size)))
    levels.append(final)
    return levels
