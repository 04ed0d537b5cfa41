"""File formats and the synthetic dataset generator.

``.ten`` tensor files: magic "LSUT", u32 version=1, u32 ndim, u32 extents,
then row-major little-endian float32 payload.

``.lsc`` checkpoints: magic "LSUC", u32 version=1, u32 entry count, then
per entry a u32 name length, the UTF-8 name, and an embedded ``.ten``
body; a trailing u32 CRC32 (IEEE) covers all preceding bytes.

``DatasetDir`` layout: images/<stem>.ten (C,H,W floats in [0,1]),
masks/<stem>.ten (K,H,W binary), and manifest.json with stems, the class
count and the train/eval split.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, BadVersionError, ChecksumError, ConfigError,
                     DataValidationError, EntryShapeError, MissingEntryError,
                     NonFiniteError, PayloadMismatchError, TruncatedFileError,
                     UnknownEntryError)
from .tensor import Tensor

TENSOR_MAGIC = b"LSUT"
CHECKPOINT_MAGIC = b"LSUC"
FORMAT_VERSION = 1
MAX_NDIM = 8


# -- tensor files ------------------------------------------------------------


def tensor_file_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("refusing to serialize non-finite values")
    if arr.ndim > MAX_NDIM:
        raise DataValidationError(f"tensor rank {arr.ndim} exceeds the format maximum {MAX_NDIM}")
    header = TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def parse_tensor_bytes(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parses one embedded tensor body; returns (array, bytes consumed)."""
    view = memoryview(blob)[offset:]
    if len(view) < 12:
        raise TruncatedFileError(f"tensor header needs 12 bytes, found {len(view)}")
    if bytes(view[:4]) != TENSOR_MAGIC:
        raise BadMagicError(f"bad tensor magic {bytes(view[:4])!r}")
    version, ndim = struct.unpack_from("<II", view, 4)
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported tensor format version {version}")
    if ndim > MAX_NDIM:
        raise PayloadMismatchError(f"tensor rank {ndim} exceeds the format maximum {MAX_NDIM}")
    head = 12 + 4 * ndim
    if len(view) < head:
        raise TruncatedFileError(f"tensor header truncated: needs {head} bytes, found {len(view)}")
    extents = struct.unpack_from(f"<{ndim}I", view, 12)
    count = 1
    for e in extents:
        count *= e
    need = head + 4 * count
    if len(view) < need:
        raise PayloadMismatchError(
            f"tensor payload for shape {extents} needs {4 * count} bytes, found {len(view) - head}")
    arr = np.frombuffer(view[head:need], dtype="<f4").reshape(extents).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor payload contains non-finite values")
    return arr, need


def write_tensor_file(path, t: Tensor | np.ndarray) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    Path(path).write_bytes(tensor_file_bytes(data))


def read_tensor_file(path) -> Tensor:
    blob = Path(path).read_bytes()
    arr, used = parse_tensor_bytes(blob)
    if used != len(blob):
        raise PayloadMismatchError(f"{used} bytes expected, file has {len(blob)} (trailing garbage)")
    return Tensor(arr)


# -- checkpoints ---------------------------------------------------------------


def checkpoint_bytes(entries: dict[str, np.ndarray]) -> bytes:
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(entries))
    for name, arr in entries.items():
        encoded = name.encode("utf-8")
        body += struct.pack("<I", len(encoded))
        body += encoded
        body += tensor_file_bytes(np.asarray(arr))
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def parse_checkpoint_bytes(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise TruncatedFileError(f"checkpoint needs at least 16 bytes, found {len(blob)}")
    stored_crc, = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    offset = 12
    end = len(blob) - 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 4 > end:
            raise TruncatedFileError("checkpoint entry header truncated")
        name_len, = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + name_len > end:
            raise TruncatedFileError("checkpoint entry name truncated")
        try:
            name = blob[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise PayloadMismatchError(f"checkpoint entry name is not UTF-8: {e}") from e
        offset += name_len
        if name in entries:
            raise PayloadMismatchError(f"duplicate checkpoint entry {name!r}")
        arr, used = parse_tensor_bytes(blob[:end], offset)
        entries[name] = arr
        offset += used
    if offset != end:
        raise PayloadMismatchError(f"{end - offset} stray bytes after the last checkpoint entry")
    return entries


def save_checkpoint(net, awl, path) -> None:
    entries = dict(net.state_dict())
    for name, p in awl.named_parameters():
        entries[f"awl.{name}"] = p.data
    Path(path).write_bytes(checkpoint_bytes(entries))


def load_checkpoint(path, net=None, awl=None) -> dict[str, np.ndarray]:
    """Reads a checkpoint; when net/awl are given, restores their state."""
    entries = parse_checkpoint_bytes(Path(path).read_bytes())
    if net is not None:
        awl_names = {f"awl.{name}" for name, _ in awl.named_parameters()} if awl is not None else set()
        net_state = {k: v for k, v in entries.items() if k not in awl_names}
        net.load_state_dict(net_state, strict=True)
    if awl is not None:
        own = dict(awl.named_parameters())
        for name, p in own.items():
            key = f"awl.{name}"
            if key not in entries:
                raise MissingEntryError(f"checkpoint is missing entry {key!r}")
            arr = np.asarray(entries[key])
            if arr.shape != p.data.shape:
                raise EntryShapeError(f"entry {key!r} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
    return entries


# -- datasets -------------------------------------------------------------------


@dataclass
class DatasetBundle:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    masks: np.ndarray   # (n, k, h, w) float32 binary
    stems: list[str]
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]


def load_dataset(root) -> dict[str, DatasetBundle]:
    """Loads a DatasetDir into train/eval bundles, validating pairing."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataValidationError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataValidationError(f"manifest.json is not valid JSON: {e}") from e
    for key in ("num_classes", "train", "eval"):
        if key not in manifest:
            raise DataValidationError(f"manifest.json is missing key {key!r}")
    num_classes = int(manifest["num_classes"])
    bundles: dict[str, DatasetBundle] = {}
    shape_ref: tuple | None = None
    for split in ("train", "eval"):
        images, masks, stems = [], [], []
        for stem in manifest[split]:
            img_path = root / "images" / f"{stem}.ten"
            mask_path = root / "masks" / f"{stem}.ten"
            if not img_path.exists():
                raise DataValidationError(f"stem {stem!r}: missing image file {img_path}")
            if not mask_path.exists():
                raise DataValidationError(f"stem {stem!r}: missing mask file {mask_path}")
            img = read_tensor_file(img_path).data
            mask = read_tensor_file(mask_path).data
            if img.ndim != 3 or mask.ndim != 3:
                raise DataValidationError(f"stem {stem!r}: image/mask must be rank-3 (C,H,W)")
            if mask.shape[0] != num_classes:
                raise DataValidationError(
                    f"stem {stem!r}: mask has {mask.shape[0]} channels, manifest says {num_classes}")
            if img.shape[1:] != mask.shape[1:]:
                raise DataValidationError(
                    f"stem {stem!r}: image {img.shape} and mask {mask.shape} spatial dims differ")
            if shape_ref is None:
                shape_ref = (img.shape[0],) + img.shape[1:]
            elif (img.shape[0],) + img.shape[1:] != shape_ref:
                raise DataValidationError(
                    f"stem {stem!r}: shape {img.shape} differs from the rest of the set {shape_ref}")
            if not np.all((mask == 0) | (mask == 1)):
                raise DataValidationError(f"stem {stem!r}: mask is not binary")
            images.append(img)
            masks.append(mask)
            stems.append(stem)
        if not stems:
            raise DataValidationError(f"split {split!r} is empty")
        bundles[split] = DatasetBundle(np.stack(images), np.stack(masks), stems, num_classes)
    return bundles


# -- synthetic generation ---------------------------------------------------------


def _raster_shape(rng: np.random.Generator, size: int) -> np.ndarray:
    """Supersampled coverage in [0,1] for one random ellipse or rectangle."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cov = np.zeros((size, size), dtype=np.float64)
    kind = rng.integers(0, 2)
    cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
    ax, ay = rng.uniform(size / 10.0, size / 4.0, size=2)
    offsets = (-0.25, 0.25)
    for oy in offsets:
        for ox in offsets:
            dx = (xx + ox - cx) / ax
            dy = (yy + oy - cy) / ay
            if kind == 0:
                inside = dx * dx + dy * dy <= 1.0
            else:
                inside = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
            cov += inside
    return cov / 4.0


def _sample_class_mask(rng: np.random.Generator, size: int,
                       min_cover: float = 0.01, max_cover: float = 0.60) -> tuple[np.ndarray, np.ndarray]:
    """Draws 1..3 shapes until coverage lands inside the required band.

    Returns (binary mask at pixel centers, anti-aliased coverage in [0,1]).
    """
    while True:
        n_shapes = int(rng.integers(1, 4))
        cov = np.zeros((size, size), dtype=np.float64)
        for _ in range(n_shapes):
            cov = np.maximum(cov, _raster_shape(rng, size))
        mask = (cov >= 0.5).astype(np.float32)
        frac = float(mask.mean())
        if min_cover <= frac <= max_cover:
            return mask, cov


def synth_generate(out_dir, n: int = 50, size: int = 64, num_classes: int = 1,
                   seed: int = 0, channels: int = 3, train_fraction: float = 0.8) -> Path:
    """Writes a synthetic DatasetDir: noisy backgrounds with high-contrast
    anti-aliased shapes; masks are the exact binary rasterizations.
    """
    if size % 32 != 0:
        raise ConfigError(f"size must be divisible by 32, got {size}")
    if num_classes < 1:
        raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
    if n < 2:
        raise ConfigError(f"need at least 2 samples for a train/eval split, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = []
    for i in range(n):
        stem = f"sample_{i:04d}"
        image = np.clip(rng.normal(0.25, 0.06, size=(channels, size, size)), 0.0, 1.0)
        mask = np.zeros((num_classes, size, size), dtype=np.float32)
        for k in range(num_classes):
            m, cov = _sample_class_mask(rng, size)
            mask[k] = m
            fg = rng.uniform(0.70, 0.95, size=channels)
            alpha = cov[None, :, :]
            image = image * (1.0 - alpha) + fg[:, None, None] * alpha
        image = np.clip(image + rng.normal(0.0, 0.02, size=image.shape), 0.0, 1.0)
        write_tensor_file(out / "images" / f"{stem}.ten", image.astype(np.float32))
        write_tensor_file(out / "masks" / f"{stem}.ten", mask)
        stems.append(stem)
    n_train = max(1, int(round(n * train_fraction)))
    if n_train >= n:
        n_train = n - 1
    manifest = {
        "num_classes": num_classes,
        "train": stems[:n_train],
        "eval": stems[n_train:],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


# -- run configuration --------------------------------------------------------------


@dataclass
class RunConfig:
    in_channels: int = 3
    num_classes: int | None = None  # None: take it from the dataset manifest
    stage_widths: tuple = (16, 32, 128, 160, 256)
    conv_stages: int = 3
    shift_stages: int = 2
    gn_groups: int | None = None
    shift_variant_schedule: str = "AB"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.001
    lr_min: float = 1e-5
    loss_mode: str | list = "bce_dice"
    metric_pooling: str = "dataset"
    binarize_mode: str = "auto"
    disable_awl: bool = False
    disable_light_conv: bool = False
    disable_tokenized_shift: bool = False

    def network_config(self, num_classes: int | None = None):
        from .network import NetworkConfig

        k = self.num_classes if self.num_classes is not None else num_classes
        if k is None:
            raise ConfigError("num_classes is not set and no dataset provided one")
        cfg = NetworkConfig(
            in_channels=self.in_channels, num_classes=k,
            stage_widths=tuple(self.stage_widths), conv_stages=self.conv_stages,
            shift_stages=self.shift_stages, gn_groups=self.gn_groups,
            shift_variant_schedule=self.shift_variant_schedule, seed=self.seed,
            disable_light_conv=self.disable_light_conv,
            disable_tokenized_shift=self.disable_tokenized_shift)
        cfg.validate()
        return cfg


_CONFIG_TYPES = {
    "in_channels": int,
    "num_classes": (int, type(None)),
    "stage_widths": (list, tuple),
    "conv_stages": int,
    "shift_stages": int,
    "gn_groups": (int, type(None)),
    "shift_variant_schedule": str,
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "lr": (int, float),
    "lr_min": (int, float),
    "loss_mode": (str, list),
    "metric_pooling": str,
    "binarize_mode": str,
    "disable_awl": bool,
    "disable_light_conv": bool,
    "disable_tokenized_shift": bool,
}


def _line_of_key(text: str, key: str) -> str:
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return f"line {lineno}"
    return "unknown line"


def parse_config(text: str) -> RunConfig:
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    cfg = RunConfig()
    valid = {f.name for f in dataclass_fields(RunConfig)}
    for key, value in doc.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r} ({_line_of_key(text, key)})")
        expected = _CONFIG_TYPES[key]
        allowed = expected if isinstance(expected, tuple) else (expected,)
        if isinstance(value, bool) and bool not in allowed:
            raise ConfigError(f"config key {key!r} must not be a boolean "
                              f"({_line_of_key(text, key)})")
        if not isinstance(value, expected):
            names = "/".join(getattr(a, "__name__", str(a)) for a in allowed)
            raise ConfigError(f"config key {key!r} has type {type(value).__name__}, "
                              f"expected {names} ({_line_of_key(text, key)})")
        setattr(cfg, key, value)
    _validate_run_config(cfg, text)
    return cfg


def _validate_run_config(cfg: RunConfig, text: str = "") -> None:
    if cfg.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {cfg.epochs} ({_line_of_key(text, 'epochs')})")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1 ({_line_of_key(text, 'batch_size')})")
    if cfg.lr <= 0:
        raise ConfigError(f"lr must be positive, got {cfg.lr} ({_line_of_key(text, 'lr')})")
    if cfg.lr_min < 0 or cfg.lr_min > cfg.lr:
        raise ConfigError(f"lr_min must lie in [0, lr] ({_line_of_key(text, 'lr_min')})")
    if isinstance(cfg.loss_mode, str):
        from .losses import LOSS_KINDS

        if cfg.loss_mode not in LOSS_KINDS:
            raise ConfigError(f"loss_mode must be one of {LOSS_KINDS} "
                              f"({_line_of_key(text, 'loss_mode')})")
    if cfg.metric_pooling not in ("dataset", "image"):
        raise ConfigError(f"metric_pooling must be 'dataset' or 'image' "
                          f"({_line_of_key(text, 'metric_pooling')})")
    if cfg.binarize_mode not in ("auto", "multilabel", "multiclass"):
        raise ConfigError(f"binarize_mode must be 'auto', 'multilabel' or 'multiclass' "
                          f"({_line_of_key(text, 'binarize_mode')})")


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())
