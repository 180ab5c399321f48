"""Versioned checkpoint container.

Layout::

    b"MVGPTCKP"                 8-byte magic
    uint32 little-endian        header length in bytes
    header                      UTF-8 JSON, sorted keys
    tensor data                 little-endian float32, row-major, concatenated

The header holds ``format_version``, ``kind``, ``model_config``,
``vocabulary``, an optional ``bin_table``, free-form ``meta`` and a
``manifest`` of ``{name, shape, offset, nbytes}`` entries (offsets relative to
the start of the tensor data).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .errors import DataError
from .model import ModelConfig, MultivariateGPT
from .schema import Vocabulary

MAGIC = b"MVGPTCKP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: MultivariateGPT
    vocab: Vocabulary
    kind: str = "multivariate"
    bin_table: Optional[object] = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in ckpt.model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        data = np.ascontiguousarray(arr).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "model_config": ckpt.model.config.to_dict(),
        "vocabulary": ckpt.vocab.to_dict(),
        "bin_table": ckpt.bin_table.to_dict() if ckpt.bin_table is not None else None,
        "meta": ckpt.meta,
        "manifest": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_header(path: Union[str, Path]) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format_version {header.get('format_version')}")
    return header, raw[12 + n :]


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header, data = read_header(path)
    tensors = {}
    for entry in header["manifest"]:
        chunk = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise DataError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    config = ModelConfig.from_dict(header["model_config"])
    mask = tensors["numeric_mask"].numpy() > 0
    model = MultivariateGPT(config, mask.tolist())
    model.load_state_dict(tensors)
    model.eval()
    bin_table = None
    if header.get("bin_table") is not None:
        from .baseline import BinTable

        bin_table = BinTable.from_dict(header["bin_table"])
    return Checkpoint(model, Vocabulary.from_dict(header["vocabulary"]), header["kind"], bin_table, header.get("meta", {}))
