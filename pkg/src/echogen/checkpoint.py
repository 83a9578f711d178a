"""Versioned binary checkpoints.

Layout (all integers little-endian):

    bytes 0-3    magic b"ECGN"
    bytes 4-7    format version, uint32
    bytes 8-15   header length N, uint64
    bytes 16-..  header, N bytes of UTF-8 JSON
    then         raw array payload: float64 little-endian values,
                 concatenated in the order listed by header["arrays"]

The header carries the run-config INI text, epoch/step counters, optimizer
scalars, the training RNG state, and for every array its name, kind
("param" | "adam_m" | "adam_v") and shape. Loading a checkpoint saved on the
same platform reproduces training trajectories bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunConfig

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"ECGN"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict  # name -> np.ndarray
    epoch: int = 0
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    rng_state: dict | None = None

    def tensor_params(self) -> dict:
        return {k: ad.parameter(v.copy()) for k, v in self.params.items()}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = []
    payload = []
    for kind, table in (
        ("param", ckpt.params),
        ("adam_m", ckpt.adam_m),
        ("adam_v", ckpt.adam_v),
    ):
        for name in sorted(table):
            arr = np.asarray(table[name], dtype=np.float64)
            arrays.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            payload.append(arr.astype("<f8").tobytes())
    header = {
        "config_ini": ckpt.config.to_ini(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "adam_t": ckpt.adam_t,
        "rng_state": ckpt.rng_state,
        "arrays": arrays,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(hbytes)).tobytes())
        fh.write(hbytes)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    hlen = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    tables = {"param": {}, "adam_m": {}, "adam_v": {}}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        tables[meta["kind"]][meta["name"]] = (
            arr.reshape(shape).astype(np.float64, copy=True)
        )
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after array payload")
    return Checkpoint(
        config=RunConfig.from_ini(header["config_ini"]),
        params=tables["param"],
        epoch=int(header["epoch"]),
        step=int(header["step"]),
        adam_m=tables["adam_m"],
        adam_v=tables["adam_v"],
        adam_t=int(header["adam_t"]),
        rng_state=header["rng_state"],
    )
