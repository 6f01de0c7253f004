"""Versioned binary container for adapter matrices.

Layout (all integers little-endian)::

    magic    8 bytes  b"LINCHAIN"
    version  u32
    header   u32 length + UTF-8 JSON {"kind": "adapter" | "merged", "config": {...}}
    count    u32
    count x  u16 name length, UTF-8 name, u32 rows, u32 cols, rows*cols float64 (row-major)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapters import AdaptedLinear, AdapterConfig, check_shapes, merge

MAGIC = b"LINCHAIN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


class ConfigMismatchError(CheckpointError):
    """The stored adapter config differs from the one the caller expects."""


def _config_dict(cfg: AdapterConfig) -> dict:
    return {**asdict(cfg), "chain_dims": list(cfg.chain_dims)}


def _write(path, kind: str, config: AdapterConfig, matrices: list[tuple[str, np.ndarray]]) -> None:
    header = json.dumps({"kind": kind, "config": _config_dict(config)}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(matrices)))
    for name, m in matrices:
        raw = name.encode()
        rows, cols = m.shape
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<II", rows, cols)]
        parts.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read(path) -> tuple[str, AdapterConfig, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a LinChain checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
        config = AdapterConfig(**header["config"])
        kind = header["kind"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    (count,) = r.unpack("<I")
    matrices = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        rows, cols = r.unpack("<II")
        matrices[name] = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after the last matrix")
    return kind, config, matrices


def _check_expected(config: AdapterConfig, expected: AdapterConfig | None) -> None:
    if expected is not None and config != expected:
        raise ConfigMismatchError(f"checkpoint holds {config}, expected {expected}")


def save_checkpoint(ad: AdaptedLinear, path) -> None:
    check_shapes(ad)
    mats = [("w0", ad.w0), *((name, m) for name, m in ad.params().items())]
    _write(path, "adapter", ad.config, mats)


def load_checkpoint(path, expected_config: AdapterConfig | None = None) -> AdaptedLinear:
    kind, config, mats = _read(path)
    if kind != "adapter":
        raise CheckpointError(f"expected an adapter checkpoint, found {kind!r}")
    _check_expected(config, expected_config)
    names = ["w0", *config.group_names()]
    if sorted(mats) != sorted(names):
        raise CheckpointError(f"checkpoint matrices {sorted(mats)} do not match config {sorted(names)}")
    n = config.n_chain
    ad = AdaptedLinear(config, mats["w0"], mats["A"], [mats[f"W{i}"] for i in range(1, n + 1)], mats["B"])
    try:
        check_shapes(ad)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return ad


def save_merged(ad: AdaptedLinear, path) -> None:
    """Export ``w0 + delta`` so inference needs only a plain linear layer."""
    _write(path, "merged", ad.config, [("w_merge", merge(ad))])


def load_merged(path, expected_config: AdapterConfig | None = None) -> tuple[AdapterConfig, np.ndarray]:
    kind, config, mats = _read(path)
    if kind != "merged" or "w_merge" not in mats:
        raise CheckpointError(f"expected a merged-weight checkpoint, found {kind!r}")
    _check_expected(config, expected_config)
    return config, mats["w_merge"]
