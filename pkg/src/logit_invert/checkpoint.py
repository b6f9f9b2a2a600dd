"""Little-endian binary checkpoint container.

Layout::

    magic        8 bytes   b"LGTINV" + two-digit format version
    config hash  32 bytes  SHA-256 of the canonical training configuration
    step         u64
    n_sections   u32
    section*     u16 name length, name, u32 record count, record*
    record       u16 name length, name, u8 dtype code, u8 rank,
                 u64 * rank dims, u64 byte count, raw little-endian data

Encoding is canonical: the same sections always produce the same bytes.
"""

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC_PREFIX = b"LGTINV"
FORMAT_VERSION = b"01"
MAGIC = MAGIC_PREFIX + FORMAT_VERSION

_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
    5: np.dtype("<i4"),
    6: np.dtype("<f2"),
    7: np.dtype("?"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


def config_hash(config):
    """32-byte SHA-256 of a JSON-serializable configuration mapping."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).digest()


def _name(buf, name):
    raw = name.encode()
    buf += struct.pack("<H", len(raw)) + raw


def encode(config_digest, step, sections):
    if len(config_digest) != 32:
        raise ValueError("config hash must be 32 bytes")
    buf = bytearray(MAGIC + config_digest + struct.pack("<QI", step, len(sections)))
    for section, records in sections.items():
        _name(buf, section)
        buf += struct.pack("<I", len(records))
        for name, arr in records.items():
            arr = np.asarray(arr)
            dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            code = _CODES.get(np.dtype(dtype).newbyteorder("<") if dtype.kind in "fi" else dtype)
            if code is None:
                raise TypeError(f"record {section}/{name}: unsupported dtype {arr.dtype}")
            data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            _name(buf, name)
            buf += struct.pack("<BB", code, arr.ndim)
            buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            buf += struct.pack("<Q", len(data)) + data
    return bytes(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode()


def decode(data):
    """Return ``(config_hash, step, sections)`` from checkpoint bytes."""
    r = _Reader(data)
    magic = r.take(8)
    if magic[:6] != MAGIC_PREFIX:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if magic[6:] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {magic[6:]!r}, this build reads {FORMAT_VERSION!r}"
        )
    digest = r.take(32)
    step, n_sections = r.unpack("<QI")
    sections = {}
    for _ in range(n_sections):
        section = r.name()
        (n_records,) = r.unpack("<I")
        records = {}
        for _ in range(n_records):
            name = r.name()
            code, ndim = r.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointFormatError(f"unknown dtype code {code} in {section}/{name}")
            shape = r.unpack(f"<{ndim}Q")
            (nbytes,) = r.unpack("<Q")
            dtype = _DTYPES[code]
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
                raise CheckpointFormatError(f"record {section}/{name} size mismatch")
            records[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
        sections[section] = records
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after last section")
    return digest, step, sections


def write(path, config_digest, step, sections):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(config_digest, step, sections))
    os.replace(tmp, path)


def read(path):
    return decode(Path(path).read_bytes())


# --- torch state <-> records ------------------------------------------------


def module_records(module):
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_records(module, records):
    state = {k: torch.from_numpy(np.array(v)) for k, v in records.items()}
    module.load_state_dict(state, strict=True)


def json_record(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode(), dtype=np.uint8).copy()


def from_json_record(arr):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode())


def optimizer_records(opt):
    sd = opt.state_dict()
    records = {"param_groups": json_record(sd["param_groups"])}
    for idx in sorted(sd["state"]):
        for key in sorted(sd["state"][idx]):
            value = sd["state"][idx][key]
            records[f"state.{idx}.{key}"] = (
                value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            )
    return records


def load_optimizer_records(opt, records):
    state = {}
    for name, value in records.items():
        if name == "param_groups":
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(value))
    opt.load_state_dict({"state": state, "param_groups": from_json_record(records["param_groups"])})
