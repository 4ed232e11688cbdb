"""Binary container for model checkpoints and scene archives.

Layout (all integers little-endian uint32)::

    b"SOP2CKPT" | version | len(config) | config text (utf-8)
              | len(manifest) | manifest JSON (utf-8) | payload

The manifest is ``{"meta": {...}, "tensors": [{"name", "shape", "offset"}, ...]}``
with byte offsets into the payload; the payload is row-major float32 little-endian.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .config import DomainParams, RunConfig, TuningMode, format_value
from .errors import CheckpointError, CheckpointMismatchError
from .numkernel import FloatArray
from .pointcloud import PointCloud, Scene, SceneLabel

MAGIC = b"SOP2CKPT"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_FLOAT = np.dtype("<f4")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Container:
    config_text: str
    tensors: Dict[str, FloatArray]
    meta: Dict[str, Any] = field(default_factory=dict)


def encode_container(config_text: str, tensors: Mapping[str, np.ndarray],
                     meta: Optional[Mapping[str, Any]] = None) -> bytes:
    manifest: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype=_FLOAT)
        manifest.append({"name": name, "shape": list(array.shape), "offset": offset})
        raw = array.tobytes()
        chunks.append(raw)
        offset += len(raw)
    config_bytes = config_text.encode("utf-8")
    manifest_bytes = json.dumps(
        {"meta": dict(meta or {}), "tensors": manifest}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return b"".join([
        MAGIC,
        _U32.pack(FORMAT_VERSION),
        _U32.pack(len(config_bytes)),
        config_bytes,
        _U32.pack(len(manifest_bytes)),
        manifest_bytes,
        *chunks,
    ])


def decode_container(blob: bytes) -> Container:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a sop2 container (bad magic)")
    pos = len(MAGIC)

    def read_u32() -> int:
        nonlocal pos
        if pos + 4 > len(blob):
            raise CheckpointError("truncated container header")
        (value,) = _U32.unpack_from(blob, pos)
        pos += 4
        return int(value)

    def read_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated container")
        out = blob[pos:pos + n]
        pos += n
        return out

    version = read_u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    config_text = read_bytes(read_u32()).decode("utf-8")
    try:
        manifest = json.loads(read_bytes(read_u32()).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc

    payload = memoryview(blob)[pos:]
    tensors: Dict[str, FloatArray] = {}
    for entry in manifest.get("tensors", []):
        name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        count = math.prod(shape)
        end = offset + count * _FLOAT.itemsize
        if offset < 0 or end > len(payload):
            raise CheckpointError(f"tensor {name!r} runs past the payload")
        values = np.frombuffer(payload[offset:end], dtype=_FLOAT, count=count)
        tensors[name] = values.reshape(shape).astype(np.float64)
    return Container(config_text, tensors, dict(manifest.get("meta", {})))


def write_container(path: PathLike, container: Container) -> None:
    Path(path).write_bytes(encode_container(container.config_text, container.tensors, container.meta))


def read_container(path: PathLike) -> Container:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"file not found: {path}")
    return decode_container(path.read_bytes())


# ==================== MODEL CHECKPOINTS ====================

@dataclass(frozen=True)
class Checkpoint:
    run: RunConfig  # the run the weights were trained under, overrides applied
    mode: TuningMode
    state: Dict[str, FloatArray]
    config: RunConfig  # the config as supplied, before overrides


def save_checkpoint(path: PathLike, state: Mapping[str, np.ndarray], run: RunConfig,
                    mode: Union[TuningMode, str],
                    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> None:
    """Store ``run`` verbatim; per-section ``overrides`` go to the manifest meta."""
    meta = {
        "kind": "model",
        "mode": TuningMode(mode).value,
        "overrides": {section: dict(fields) for section, fields in (overrides or {}).items()},
    }
    write_container(path, Container(run.to_text(), dict(state), meta))


def load_checkpoint(path: PathLike, expected: Optional[RunConfig] = None) -> Checkpoint:
    """Read a model checkpoint; a differing ``expected`` config is rejected with both texts shown."""
    container = read_container(path)
    if container.meta.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    if expected is not None and expected.to_text() != container.config_text:
        raise CheckpointMismatchError(expected.to_text(), container.config_text)
    config = RunConfig.from_text(container.config_text)
    run = config.with_overrides(**container.meta.get("overrides", {}))
    return Checkpoint(run, TuningMode(container.meta["mode"]), container.tensors, config)


def check_backbone(target: RunConfig, source: RunConfig) -> None:
    """Pretrained weights fit ``target`` only if backbone and head shapes agree."""
    expected = target.model.backbone_signature()
    found = source.model.backbone_signature()
    if expected != found:
        raise CheckpointMismatchError(expected, found)


# ==================== SCENE ARCHIVES ====================

def domain_header(domain: str, params: DomainParams, seed: int, extent: Sequence[float]) -> str:
    lines = [f"archive.domain={domain}", f"archive.seed={seed}", f"archive.extent={format_value(list(extent))}"]
    for key in sorted(DomainParams.model_fields):
        lines.append(f"domain.{key}={format_value(getattr(params, key))}")
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def save_scenes(path: PathLike, scenes: Sequence[Scene], header: str) -> None:
    tensors: Dict[str, np.ndarray] = {}
    for i, scene in enumerate(scenes):
        tensors[f"scene/{i:04d}/points"] = scene.cloud.points
        tensors[f"scene/{i:04d}/boxes"] = scene.label.boxes
    extent = list(scenes[0].cloud.extent) if scenes else []
    meta = {"kind": "scenes", "count": len(scenes), "extent": extent}
    write_container(path, Container(header, tensors, meta))


def load_scenes(path: PathLike) -> Tuple[List[Scene], Dict[str, str]]:
    """Scenes of an archive plus its parsed header."""
    container = read_container(path)
    if container.meta.get("kind") != "scenes":
        raise CheckpointError(f"{path} is not a scene archive")
    extent = tuple(float(v) for v in container.meta["extent"])
    scenes = []
    for i in range(int(container.meta["count"])):
        points = container.tensors[f"scene/{i:04d}/points"].reshape(-1, 4)
        boxes = container.tensors[f"scene/{i:04d}/boxes"].reshape(-1, 6)
        # float32 storage can nudge values just past their bounds
        points[:, :3] = np.clip(points[:, :3], extent[:3], extent[3:])
        boxes[:, 4] = np.clip(boxes[:, 4], -math.pi, math.pi)
        scenes.append(Scene(PointCloud(points, extent), SceneLabel(boxes)))  # type: ignore[arg-type]
    return scenes, parse_header(container.config_text)
