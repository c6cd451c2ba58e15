"""Binary model checkpoints.

Layout (little-endian)::

    b"SPRC" | version u16 | header_len u32 | header (UTF-8 JSON, sorted keys)
    then, for each parameter in header order, its float64 values

The header carries the architecture echo, training provenance and the
name/shape of every parameter. Serialization is canonical, so
load -> save reproduces the original bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPRC"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


@dataclass
class ModelCheckpoint:
    architecture: dict
    params: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        names = list(self.params)
        header = {
            "architecture": self.architecture,
            "provenance": self.provenance,
            "params": [[n, list(self.params[n].shape)] for n in names],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<HI", self.version, len(blob)), blob]
        parts += [np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in names]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelCheckpoint":
        if len(buf) < 10:
            raise CheckpointError(f"truncated checkpoint header at offset {len(buf)}")
        if buf[:4] != MAGIC:
            raise CheckpointError("bad checkpoint magic at offset 0")
        version, hlen = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} at offset 4 is not supported (expected {VERSION})")
        end = 10 + hlen
        if len(buf) < end:
            raise CheckpointError(f"truncated checkpoint header at offset {len(buf)} (expected {end} bytes)")
        try:
            header = json.loads(buf[10:end].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header at offset 10: {exc}") from exc
        params = {}
        offset = end
        for name, shape in header["params"]:
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
            if len(buf) < offset + n_bytes:
                raise CheckpointError(
                    f"truncated checkpoint: parameter {name!r} needs bytes up to offset "
                    f"{offset + n_bytes}, file ends at offset {len(buf)}"
                )
            params[name] = np.frombuffer(buf, dtype="<f8", count=n_bytes // 8, offset=offset).reshape(shape).copy()
            offset += n_bytes
        if offset != len(buf):
            raise CheckpointError(f"trailing data after offset {offset}")
        return cls(header["architecture"], params, header["provenance"], version)

    def apply_to(self, named_params: dict) -> None:
        """Copy stored values into live ``Param`` objects; names and shapes must match."""
        missing = set(named_params) - set(self.params)
        extra = set(self.params) - set(named_params)
        if missing or extra:
            raise CheckpointError(f"parameter sets differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in named_params.items():
            if p.value.shape != self.params[name].shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {self.params[name].shape}, model {p.value.shape}"
                )
            p.value = self.params[name].astype(p.value.dtype, copy=True)
            p.grad = np.zeros_like(p.value)


def capture(named_params: dict, architecture: dict, provenance: dict) -> ModelCheckpoint:
    return ModelCheckpoint(
        architecture=architecture,
        params={n: p.value.copy() for n, p in named_params.items()},
        provenance=provenance,
    )


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> ModelCheckpoint:
    return ModelCheckpoint.from_bytes(Path(path).read_bytes())
