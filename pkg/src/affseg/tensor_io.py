"""Containers and codecs shared by every pipeline stage.

AFT1 tensor layout (all integers little-endian)::

    b"AFT1" | rank: u8 | dims: rank x u32 | payload: prod(dims) x f32

Images are binary PPM (P6) and label maps binary PGM (P5), both maxval 255.
Label value 254 marks background and 255 marks neutral / ignore.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadHeader,
    BadMagic,
    ConfigError,
    IoFailure,
    RankOutOfRange,
    TruncatedPayload,
    UnsupportedMaxval,
    ValidationError,
)

MAGIC = b"AFT1"
BACKGROUND = 254
NEUTRAL = 255


@dataclass(frozen=True, eq=False)
class Tensor:
    """Rank 1-3 float32 array; channel-major ``[C, H, W]`` for maps."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim not in (1, 2, 3):
            raise RankOutOfRange(f"rank {arr.ndim} not in {{1,2,3}}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and self.data.tobytes() == other.data.tobytes()


@dataclass(frozen=True, eq=False)
class ImageRGB:
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValidationError(f"bad RGB image shape {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ImageRGB):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class index, 254 background, 255 neutral."""

    labels: np.ndarray  # (H, W) uint8
    num_classes: int | None = None

    def __post_init__(self):
        lab = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if lab.ndim != 2 or lab.shape[0] < 1 or lab.shape[1] < 1:
            raise ValidationError(f"bad label map shape {lab.shape}")
        if self.num_classes is not None:
            plain = lab[(lab != BACKGROUND) & (lab != NEUTRAL)]
            if plain.size and int(plain.max()) >= self.num_classes:
                raise ValidationError(
                    f"label {int(plain.max())} >= num_classes {self.num_classes}"
                )
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.labels.shape == other.labels.shape and np.array_equal(self.labels, other.labels)


def _write_bytes(path, blob: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def encode_tensor(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<B", t.rank) + struct.pack(f"<{t.rank}I", *t.dims)
    return header + t.data.astype("<f4").tobytes()


def decode_tensor(blob: bytes) -> Tensor:
    if len(blob) < 5 or blob[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {blob[:4]!r}")
    rank = blob[4]
    if rank not in (1, 2, 3):
        raise RankOutOfRange(f"rank {rank} not in {{1,2,3}}")
    end = 5 + 4 * rank
    if len(blob) < end:
        raise TruncatedPayload("header shorter than its rank requires")
    dims = struct.unpack(f"<{rank}I", blob[5:end])
    numel = int(np.prod(dims, dtype=np.int64))
    need = end + 4 * numel
    if len(blob) < need:
        raise TruncatedPayload(f"payload has {(len(blob) - end) // 4} floats, header needs {numel}")
    if len(blob) > need:
        raise TruncatedPayload(f"{len(blob) - need} trailing bytes after payload")
    data = np.frombuffer(blob, dtype="<f4", count=numel, offset=end).reshape(dims)
    return Tensor(data.astype(np.float32))


def write_tensor(t: Tensor, path) -> None:
    if not isinstance(t, Tensor):
        t = Tensor(t)
    _write_bytes(path, encode_tensor(t))


def read_tensor(path) -> Tensor:
    return decode_tensor(_read_bytes(path))


# Netpbm ---------------------------------------------------------------------

def _parse_netpbm(blob: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload_offset)."""
    if blob[:2] != magic:
        raise BadHeader(f"expected {magic.decode()} header, got {blob[:2]!r}")
    tokens: list[int] = []
    pos = 2
    n = len(blob)
    while len(tokens) < 3:
        if pos >= n:
            raise BadHeader("header ends early")
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise BadHeader("unterminated comment")
            pos = nl + 1
        elif ch.isdigit():
            start = pos
            while pos < n and blob[pos:pos + 1].isdigit():
                pos += 1
            tokens.append(int(blob[start:pos]))
        else:
            raise BadHeader(f"unexpected byte {ch!r} in header")
    if pos >= n or not blob[pos:pos + 1].isspace():
        raise BadHeader("missing whitespace after maxval")
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise BadHeader(f"bad size {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxval(f"maxval {maxval} unsupported (only 255)")
    return width, height, maxval, pos + 1


def _payload(blob: bytes, offset: int, count: int) -> np.ndarray:
    if len(blob) - offset < count:
        raise TruncatedPayload(f"payload has {len(blob) - offset} bytes, need {count}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=offset)


def encode_image_ppm(img: ImageRGB) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode() + img.pixels.tobytes()


def decode_image_ppm(blob: bytes) -> ImageRGB:
    w, h, _, off = _parse_netpbm(blob, b"P6")
    return ImageRGB(_payload(blob, off, w * h * 3).reshape(h, w, 3).copy())


def encode_label_pgm(lab: LabelMap) -> bytes:
    return f"P5\n{lab.width} {lab.height}\n255\n".encode() + lab.labels.tobytes()


def decode_label_pgm(blob: bytes) -> LabelMap:
    w, h, _, off = _parse_netpbm(blob, b"P5")
    return LabelMap(_payload(blob, off, w * h).reshape(h, w).copy())


def read_image_ppm(path) -> ImageRGB:
    return decode_image_ppm(_read_bytes(path))


def write_image_ppm(img: ImageRGB, path) -> None:
    _write_bytes(path, encode_image_ppm(img))


def read_label_pgm(path) -> LabelMap:
    return decode_label_pgm(_read_bytes(path))


def write_label_pgm(lab: LabelMap, path) -> None:
    _write_bytes(path, encode_label_pgm(lab))


def write_json(obj, path) -> None:
    _write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    try:
        return json.loads(_read_bytes(path))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def sha256_file(path) -> str:
    return hashlib.sha256(_read_bytes(path)).hexdigest()


# Configuration ----------------------------------------------------------------

def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class PipelineConfig:
    num_classes: int = 3
    alpha_default: float = 16.0
    alpha_low: float = 4.0
    alpha_high: float = 24.0
    gamma: float = 5.0
    beta: float = 8.0
    t: int = 256
    stride: int = 2
    seed: int = 42
    mode: str = "iterative"
    max_dense_entries: int = 4_000_000
    # embedder
    hidden: int = 32
    out_dim: int = 16
    # trainer
    step_size: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pairs_per_step: int = 96
    steps: int = 2000
    eps_w: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_classes > 254:
            raise ConfigError(f"num_classes {self.num_classes} outside [1, 254]")
        if not (1.0 <= self.alpha_low < self.alpha_default < self.alpha_high):
            raise ConfigError(
                "need 1 <= alpha_low < alpha_default < alpha_high, got "
                f"{self.alpha_low}, {self.alpha_default}, {self.alpha_high}"
            )
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if not self.beta >= 1:
            raise ConfigError(f"beta must be >= 1, got {self.beta}")
        if not _is_power_of_two(int(self.t)) or int(self.t) != self.t:
            raise ConfigError(f"t must be a power of two, got {self.t}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.mode not in ("iterative", "squaring"):
            raise ConfigError(f"mode must be iterative or squaring, got {self.mode!r}")
        if not (0.0 < self.eps_w < 0.1):
            raise ConfigError(f"eps_w must lie in (0, 0.1), got {self.eps_w}")
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.pairs_per_step < 3 or self.steps < 0 or self.hidden < 1 or self.out_dim < 1:
            raise ConfigError("pairs_per_step >= 3, steps >= 0, hidden/out_dim >= 1 required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self, keys=None) -> str:
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def write_config(cfg: PipelineConfig, path) -> None:
    write_json(cfg.to_dict(), path)


def read_config(path) -> PipelineConfig:
    d = read_json(path)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return PipelineConfig.from_dict(d)
