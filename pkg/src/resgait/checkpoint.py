"""Deterministic checkpoint serialization.

Archive-based formats stamp timestamps into their output, which breaks
byte-level reproducibility, so checkpoints use a flat layout instead: a magic
string, a length-prefixed canonical JSON header (sorted keys, no whitespace),
then the raw tensor bytes in header order. Everything that varies run to run
(wall time, host) is kept out of this file and quarantined in the run
metadata written next to it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RESGAIT1\n"
FORMAT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def _to_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return np.ascontiguousarray(value.detach().cpu().numpy())
    return np.ascontiguousarray(np.asarray(value))


def digest_arrays(arrays: dict[str, np.ndarray]) -> str:
    """Order-independent sha256 over named arrays (names sorted first)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = _to_array(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(b"\0")
        h.update(arr.dtype.str.encode("ascii"))
        h.update(b"\0")
        h.update(_canonical_json(list(arr.shape)))
        h.update(b"\0")
        h.update(arr.tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    """Checksum of a module's parameters and buffers, as stored in checkpoints."""
    return digest_arrays(dict(module.state_dict()))


@dataclass
class Checkpoint:
    """A loaded checkpoint: flat arrays keyed 'module.param', plus metadata."""

    meta: dict
    arrays: dict[str, np.ndarray]

    def module_names(self) -> list[str]:
        return sorted({name.split(".", 1)[0] for name in self.arrays})

    def module_arrays(self, module_name: str) -> dict[str, np.ndarray]:
        prefix = module_name + "."
        found = {name[len(prefix):]: arr for name, arr in self.arrays.items() if name.startswith(prefix)}
        if not found:
            raise KeyError(f"checkpoint holds no module named {module_name!r}")
        return found

    def module_state(self, module_name: str) -> dict[str, torch.Tensor]:
        return {name: torch.from_numpy(arr.copy()) for name, arr in self.module_arrays(module_name).items()}

    def load_into(self, module_name: str, module: torch.nn.Module) -> None:
        module.load_state_dict(self.module_state(module_name))

    def checksum(self, module_name: str) -> str:
        return digest_arrays(self.module_arrays(module_name))


def save_checkpoint(path: str | Path, modules: dict[str, torch.nn.Module | dict], meta: dict | None = None) -> str:
    """Write modules to a byte-stable checkpoint file; returns the file's sha256.

    `modules` maps a module name to either an nn.Module or a state-dict-like
    mapping of arrays. Per-module checksums are recorded in the header under
    meta['checksums'].
    """
    path = Path(path)
    flat: dict[str, np.ndarray] = {}
    checksums: dict[str, str] = {}
    for mod_name, module in sorted(modules.items()):
        if "." in mod_name:
            raise ValueError(f"module name {mod_name!r} must not contain '.'")
        state = dict(module.state_dict()) if isinstance(module, torch.nn.Module) else dict(module)
        arrays = {param: _to_array(value) for param, value in state.items()}
        checksums[mod_name] = digest_arrays(arrays)
        for param, arr in arrays.items():
            flat[f"{mod_name}.{param}"] = arr

    meta = dict(meta or {})
    meta["checksums"] = checksums
    entries = []
    offset = 0
    for name in sorted(flat):
        arr = flat[name]
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": arr.nbytes,
            }
        )
        offset += arr.nbytes
    header = _canonical_json({"format": FORMAT_VERSION, "meta": meta, "tensors": entries})

    path.parent.mkdir(parents=True, exist_ok=True)
    file_hash = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in (MAGIC, len(header).to_bytes(8, "big"), header):
            fh.write(chunk)
            file_hash.update(chunk)
        for name in sorted(flat):
            data = flat[name].tobytes()
            fh.write(data)
            file_hash.update(data)
    return file_hash.hexdigest()


def read_meta(path: str | Path) -> dict:
    """Read only the header metadata (cheap: tensor payload is not touched)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a recognized checkpoint (bad magic)")
        header_len = int.from_bytes(fh.read(8), "big")
        header = json.loads(fh.read(header_len).decode("ascii"))
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    return header["meta"]


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a recognized checkpoint (bad magic)")
        header_len = int.from_bytes(fh.read(8), "big")
        header = json.loads(fh.read(header_len).decode("ascii"))
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        payload = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ValueError(f"checkpoint truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    ckpt = Checkpoint(meta=header["meta"], arrays=arrays)
    stored = ckpt.meta.get("checksums", {})
    for mod_name in ckpt.module_names():
        expected = stored.get(mod_name)
        if expected is not None and ckpt.checksum(mod_name) != expected:
            raise ValueError(f"checksum mismatch for module {mod_name!r} in {path}")
    return ckpt


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
