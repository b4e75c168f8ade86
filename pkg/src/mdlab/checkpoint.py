"""Single-file model checkpoints.

Layout::

    b"MDLCKPT\\n"            8-byte magic
    uint32 little-endian     header length in bytes
    header                   UTF-8 JSON: format version, ArchSpec, trainable
                             mask, and an index of arrays (group, name, shape,
                             byte offset)
    payload                  concatenated little-endian float64 arrays

Writing the same model twice yields identical bytes, and loading restores the
arrays bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError
from .models import ArchSpec, Model

MAGIC = b"MDLCKPT\n"
FORMAT_VERSION = 1


def dumps(model: Model, meta: dict | None = None) -> bytes:
    index = []
    chunks = []
    offset = 0
    for group, params in model.groups.items():
        for name, p in params.items():
            raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            index.append({"group": group, "name": name, "shape": list(p.data.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "trainable": model.trainable,
        "arrays": index,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes) -> tuple[Model, dict]:
    if not blob.startswith(MAGIC):
        raise ContractError("not an mdlab checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = memoryview(blob)[start + hlen :]
    groups: dict[str, dict[str, Tensor]] = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"]))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"]).reshape(entry["shape"])
        g = entry["group"]
        groups.setdefault(g, {})[entry["name"]] = Tensor(arr.astype(np.float64), True, f"{g}.{entry['name']}")
    model = Model(ArchSpec.from_dict(header["spec"]), groups)
    for g, flag in header["trainable"].items():
        model.trainable[g] = flag
        for p in groups[g].values():
            p.requires_grad = flag
    return model, header["meta"]


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save(model: Model, path: str | Path, meta: dict | None = None) -> None:
    atomic_write_bytes(path, dumps(model, meta))


def load(path: str | Path) -> tuple[Model, dict]:
    return loads(Path(path).read_bytes())
