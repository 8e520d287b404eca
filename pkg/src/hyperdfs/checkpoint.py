"""Versioned binary checkpoints.

Layout: ``HDFS`` magic, a little-endian uint16 format version, a uint16
section count, then sections of the form

    uint16 name length | name (ascii) | uint64 payload length | uint32 crc32 | payload

The ``header`` section is canonical JSON (sorted keys); ``tensors`` holds the
float64 arrays back to back in header order. Serialisation is deterministic,
so load -> save reproduces the original bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, build_predictor
from .selector import SelectorNet

MAGIC = b"HDFS"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class CheckpointIntegrityError(ValueError):
    pass


class DatasetMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    model_config: dict
    train_config: dict
    primary_sizes: list[int]
    dataset_hash: str
    predictor_state: dict[str, np.ndarray]
    selector_state: dict[str, np.ndarray] | None = None
    selector_hidden: int = 64
    standardize_mean: np.ndarray | None = None
    standardize_std: np.ndarray | None = None
    seen_masks: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def build(self):
        """Reconstruct (predictor, selector-or-None) with the stored weights."""
        cfg = ModelConfig(**self.model_config)
        rng = np.random.default_rng(0)  # initial values are overwritten
        model = build_predictor(self.kind, cfg, rng)
        model.load_state_dict(self.predictor_state)
        selector = None
        if self.selector_state is not None:
            selector = SelectorNet(cfg.M, rng, hidden=self.selector_hidden)
            selector.load_state_dict(self.selector_state)
        return model, selector

    def standardize(self, X: np.ndarray) -> np.ndarray:
        if self.standardize_mean is None:
            return np.asarray(X, dtype=np.float64)
        return (X - self.standardize_mean) / self.standardize_std


def _tensor_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [("predictor." + k, v) for k, v in ckpt.predictor_state.items()]
    if ckpt.selector_state is not None:
        entries += [("selector." + k, v) for k, v in ckpt.selector_state.items()]
    if ckpt.standardize_mean is not None:
        entries += [("standardize.mean", ckpt.standardize_mean), ("standardize.std", ckpt.standardize_std)]
    return entries


def _section(name: str, payload: bytes) -> bytes:
    raw = name.encode("ascii")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<QI", len(payload), zlib.crc32(payload)) + payload


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = _tensor_entries(ckpt)
    header = {
        "kind": ckpt.kind,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "primary_sizes": list(ckpt.primary_sizes),
        "dataset_hash": ckpt.dataset_hash,
        "selector_hidden": ckpt.selector_hidden,
        "has_selector": ckpt.selector_state is not None,
        "seen_masks": sorted(ckpt.seen_masks),
        "meta": ckpt.meta,
        "tensors": [[name, list(np.shape(a))] for name, a in entries],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in entries)
    return (MAGIC + struct.pack("<HH", VERSION, 2)
            + _section("header", head) + _section("tensors", blob))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def _read_sections(data: bytes) -> dict[str, bytes]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic bytes)")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos, sections = 8, {}
    for _ in range(count):
        try:
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("ascii")
            pos += 2 + n
            length, crc = struct.unpack_from("<QI", data, pos)
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointIntegrityError(f"truncated or corrupt section header at byte {pos}") from exc
        pos += 12
        payload = data[pos:pos + length]
        if len(payload) != length:
            raise CheckpointIntegrityError(f"section {name!r} truncated: {len(payload)} of {length} bytes")
        if zlib.crc32(payload) != crc:
            raise CheckpointIntegrityError(f"section {name!r} failed its CRC check")
        sections[name] = payload
        pos += length
    if pos != len(data):
        raise CheckpointIntegrityError(f"{len(data) - pos} trailing bytes after the last section")
    return sections


def from_bytes(data: bytes) -> Checkpoint:
    sections = _read_sections(data)
    if "header" not in sections or "tensors" not in sections:
        raise CheckpointIntegrityError("missing header or tensor section")
    header = json.loads(sections["header"].decode("utf-8"))
    blob = sections["tensors"]
    arrays, offset = {}, 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise CheckpointIntegrityError(f"tensor {name} runs past the tensor section")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointIntegrityError("tensor section size does not match the header")
    pred = {k[len("predictor."):]: v for k, v in arrays.items() if k.startswith("predictor.")}
    sel = {k[len("selector."):]: v for k, v in arrays.items() if k.startswith("selector.")}
    return Checkpoint(
        kind=header["kind"],
        model_config=header["model_config"],
        train_config=header["train_config"],
        primary_sizes=header["primary_sizes"],
        dataset_hash=header["dataset_hash"],
        predictor_state=pred,
        selector_state=sel if header["has_selector"] else None,
        selector_hidden=header["selector_hidden"],
        standardize_mean=arrays.get("standardize.mean"),
        standardize_std=arrays.get("standardize.std"),
        seen_masks=header["seen_masks"],
        meta=header["meta"],
    )


def load_checkpoint(path: str | Path, expected_dataset_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = from_bytes(path.read_bytes())
    if expected_dataset_hash is not None and ckpt.dataset_hash != expected_dataset_hash:
        raise DatasetMismatchError(
            f"checkpoint was trained on dataset {ckpt.dataset_hash[:12]}, expected {expected_dataset_hash[:12]}")
    return ckpt


def make_checkpoint(model, selector, model_cfg: ModelConfig, train_cfg: dict, dataset_hash: str,
                    seen_masks=(), standardize=None, meta=None) -> Checkpoint:
    sizes = list(model.spec.sizes) if hasattr(model, "spec") else list(model.mlp.sizes)
    mean, std = standardize if standardize is not None else (None, None)
    return Checkpoint(
        kind=model.kind,
        model_config=model_cfg.to_dict(),
        train_config=dict(train_cfg),
        primary_sizes=sizes,
        dataset_hash=dataset_hash,
        predictor_state=model.state_dict(),
        selector_state=None if selector is None else selector.state_dict(),
        selector_hidden=64 if selector is None else selector.mlp.sizes[1],
        standardize_mean=mean,
        standardize_std=std,
        seen_masks=sorted(seen_masks),
        meta=meta or {},
    )
