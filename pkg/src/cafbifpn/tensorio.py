"""Bit-exact tensor files, flat JSON run configuration, and deterministic
fixture generation.

File layout: magic "TNSR", version byte 1, dtype byte (1 float32,
2 float64), rank byte, reserved zero byte, then rank u64 little-endian
extents, then the row-major payload little-endian.  Every malformed input
is a FormatError naming the byte offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError

_MAGIC = b"TNSR"
_VERSION = 1
_DTYPE_CODE = {"float32": 1, "float64": 2}
_CODE_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def tensor_write(path, t: T.Tensor) -> None:
    arr = t.array
    code = _DTYPE_CODE[t.dtype]
    dims = arr.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BBBB", _VERSION, code, len(dims), 0))
        fh.write(struct.pack(f"<{len(dims)}Q", *dims))
        fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPE[code]).tobytes())


def tensor_read(path) -> T.Tensor:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"offset 0: header needs 8 bytes, file has {len(blob)}")
    if blob[:4] != _MAGIC:
        raise FormatError(f"offset 0: bad magic {blob[:4]!r}")
    version, code, rank, reserved = struct.unpack("<BBBB", blob[4:8])
    if version != _VERSION:
        raise FormatError(f"offset 4: unsupported version {version}")
    if code not in _CODE_DTYPE:
        raise FormatError(f"offset 5: unknown dtype code {code}")
    if reserved != 0:
        raise FormatError(f"offset 7: reserved byte is {reserved}, want 0")
    dims_end = 8 + 8 * rank
    if len(blob) < dims_end:
        raise FormatError(f"offset 8: rank {rank} needs {8 * rank} extent bytes, "
                          f"file has {len(blob) - 8} after the header")
    dims = struct.unpack(f"<{rank}Q", blob[8:dims_end])
    if any(d < 1 for d in dims):
        raise FormatError(f"offset 8: extents must all be >= 1, got {list(dims)}")
    dt = _CODE_DTYPE[code]
    count = 1
    for d in dims:
        count *= d
    expected = count * dt.itemsize
    actual = len(blob) - dims_end
    if actual != expected:
        raise FormatError(f"offset {dims_end}: payload is {actual} bytes, want {expected}")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=dims_end)
    return T.Tensor(arr.reshape(dims if rank else (1,)).astype(arr.dtype.newbyteorder("=")))


@dataclass(frozen=True)
class RunConfig:
    regions_s: int = 2
    topk_k: int = 2
    heads: int = 1
    fusion_width: int = 48
    epsilon: float = 1e-4
    dilation: int = 2
    lce_kernel: int = 5
    activation: str = "relu"
    cfe_enabled: bool = True
    attention_fusion_enabled: bool = True
    topdown_source: str = "input"
    seed: int = 0


_INT_FIELDS = {"regions_s", "topk_k", "heads", "fusion_width", "dilation", "lce_kernel", "seed"}
_BOOL_FIELDS = {"cfe_enabled", "attention_fusion_enabled"}
_STR_FIELDS = {"activation", "topdown_source"}


def config_validate(cfg: RunConfig) -> RunConfig:
    def want(cond: bool, rule: str):
        if not cond:
            raise ConfigError(f"config violates {rule}")

    want(cfg.regions_s >= 1, "regions_s >= 1")
    want(cfg.topk_k >= 1, "topk_k >= 1")
    want(cfg.topk_k <= cfg.regions_s ** 2, "topk_k <= regions_s^2")
    want(cfg.heads >= 1, "heads >= 1")
    want(cfg.fusion_width >= 3, "fusion_width >= 3")
    want(cfg.fusion_width % 3 == 0, "fusion_width % 3 == 0")
    want(cfg.fusion_width % cfg.heads == 0, "heads divides fusion_width")
    want(cfg.epsilon >= 0.0, "epsilon >= 0")
    want(cfg.dilation >= 1, "dilation >= 1")
    want(cfg.lce_kernel >= 1 and cfg.lce_kernel % 2 == 1, "lce_kernel odd and >= 1")
    want(cfg.activation in ("none", "relu"), "activation in {none, relu}")
    want(cfg.topdown_source in ("input", "output"), "topdown_source in {input, output}")
    want(0 <= cfg.seed < 2 ** 64, "seed fits in u64")
    return cfg


def config_parse(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a flat JSON object, got {type(raw).__name__}")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    vals = {}
    for key, value in raw.items():
        if key in _INT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key {key} must be an integer, got {value!r}")
        elif key in _BOOL_FIELDS:
            if not isinstance(value, bool):
                raise ConfigError(f"config key {key} must be a boolean, got {value!r}")
        elif key in _STR_FIELDS:
            if not isinstance(value, str):
                raise ConfigError(f"config key {key} must be a string, got {value!r}")
        else:  # epsilon
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {key} must be a number, got {value!r}")
            value = float(value)
        vals[key] = value
    return config_validate(RunConfig(**vals))


def pad_to_multiple(f: T.Tensor, s: int) -> T.Tensor:
    """Zero-pad bottom and right edges until s divides both extents."""
    v = T._val(f)
    c, h, w = v.shape
    ph = (-h) % s
    pw = (-w) % s
    if ph == 0 and pw == 0:
        return f if isinstance(f, T.Tensor) else T.tensor(v)
    return T.tensor(np.pad(v, ((0, 0), (0, ph), (0, pw))))


def crop(f: T.Tensor, h: int, w: int) -> T.Tensor:
    v = T._val(f)
    if h < 1 or w < 1 or h > v.shape[1] or w > v.shape[2]:
        raise ConfigError(f"crop {h}x{w} outside map extents {v.shape[1]}x{v.shape[2]}")
    return T.tensor(v[:, :h, :w])


FIXTURE_DIMS = {2: (16, 64, 64), 3: (32, 32, 32), 4: (64, 16, 16), 5: (128, 8, 8)}

_FIXTURE_NAMES = {lvl: f"backbone_c{lvl}.tnsr" for lvl in (2, 3, 4, 5)}


def gen_fixture(seed: int, out_dir) -> dict:
    """Write the four backbone maps plus a manifest; one value stream from
    the seed, levels in ascending order, values 2u - 1 in (-1, 1)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = T.Rng(seed)
    entries = []
    for lvl in (2, 3, 4, 5):
        dims = FIXTURE_DIMS[lvl]
        t = rng.symmetric_unit(list(dims))
        name = _FIXTURE_NAMES[lvl]
        tensor_write(out / name, t)
        entries.append({"name": name, "level": lvl, "dims": list(dims)})
    manifest = {"seed": int(seed), "files": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def load_backbone(in_dir) -> dict:
    """Read the four per-level input maps by their conventional names; no
    manifest needed, so any directory holding the files works."""
    maps = {}
    for lvl, name in _FIXTURE_NAMES.items():
        path = Path(in_dir) / name
        if not path.exists():
            raise FormatError(f"missing input map {name} in {in_dir}")
        maps[lvl] = tensor_read(path)
    return maps


def load_fixture(in_dir) -> tuple:
    """Read a fixture directory back as ({level: Tensor}, manifest)."""
    path = Path(in_dir) / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json in {in_dir}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}") from exc
    maps = {}
    for entry in manifest.get("files", []):
        lvl = int(entry["level"])
        maps[lvl] = tensor_read(Path(in_dir) / entry["name"])
    return maps, manifest
