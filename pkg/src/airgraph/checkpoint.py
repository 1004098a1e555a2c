"""Checkpoint files: a ``key=value`` text manifest followed by one little-endian float64 blob.

Layout::

    format=airgraph-checkpoint-v1
    config_hash=...
    config.<key>=<value>          (run configuration, paths excluded)
    meta.<key>=<value>            (node ids, feature names, epoch counters)
    tensor.<name>=<d0,d1,...>@<byte offset>
    blob_bytes=<n>
    end_manifest
    <n bytes>
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig

MAGIC = "airgraph-checkpoint-v1"
_END = b"end_manifest\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    meta: dict[str, str] = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def params(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k[6:], v) for k, v in self.tensors.items() if k.startswith("param."))

    def optimizer_state(self) -> dict[str, np.ndarray]:
        return {k[4:]: v for k, v in self.tensors.items() if k.startswith("opt.")}

    def to_bytes(self) -> bytes:
        lines = [f"format={MAGIC}", f"config_hash={self.config.hash}"]
        lines += [f"config.{k}={v}" for k, v in self.config.items(include_paths=False)]
        lines += [f"meta.{k}={v}" for k, v in self.meta.items()]
        chunks, offset = [], 0
        for name, arr in self.tensors.items():
            arr = np.asarray(arr, dtype="<f8")  # tobytes() is C-order; keeps 0-d shapes
            lines.append(f"tensor.{name}={','.join(str(d) for d in arr.shape)}@{offset}")
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        lines.append(f"blob_bytes={offset}")
        return ("\n".join(lines) + "\n").encode("utf-8") + _END + b"".join(chunks)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        cut = raw.find(b"\n" + _END)
        if not raw.startswith(b"format=") or cut < 0:
            raise CheckpointError("not a checkpoint file (manifest header missing)")
        head = raw[:cut].decode("utf-8").split("\n")
        blob = raw[cut + 1 + len(_END):]
        entries = [line.split("=", 1) for line in head]
        top = {k: v for k, v in entries if "." not in k}
        if top.get("format") != MAGIC:
            raise CheckpointError(f"unsupported checkpoint format {top.get('format')!r}")
        if int(top.get("blob_bytes", -1)) != len(blob):
            raise CheckpointError("checkpoint blob is truncated or has trailing bytes")
        config = RunConfig.from_pairs({k[7:]: v for k, v in entries if k.startswith("config.")})
        if config.hash != top.get("config_hash"):
            raise CheckpointError("checkpoint config hash does not match its stored config")
        meta = {k[5:]: v for k, v in entries if k.startswith("meta.")}
        tensors = OrderedDict()
        for k, v in entries:
            if not k.startswith("tensor."):
                continue
            shape_txt, off = v.rsplit("@", 1)
            shape = tuple(int(d) for d in shape_txt.split(",") if d)
            count = int(np.prod(shape)) if shape else 1
            start = int(off)
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
            tensors[k[7:]] = arr.astype(np.float64).reshape(shape)
        return cls(config, meta, tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint not found: {path}") from None
        return cls.from_bytes(raw)
