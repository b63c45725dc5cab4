"""Checkpoint files: one JSON manifest line, then raw little-endian f32 parameter blocks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from dmseg.autograd.nn import Network, NetworkSpec
from dmseg.errors import InvalidArgumentError

MAGIC = "DMSEG-CKPT"


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    seed: int = 0
    step: int = 0
    lr: float = 1e-3
    extra: dict = field(default_factory=dict)

    def network(self) -> Network:
        return Network(self.spec, self.params)

    @classmethod
    def from_network(cls, net: Network, **kw) -> Checkpoint:
        return cls(net.spec, net.state(), **kw)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blocks = []
    offset = 0
    names = list(ckpt.spec.param_shapes())
    for name in names:
        arr = np.asarray(ckpt.params[name], dtype="<f4")
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
    manifest = {
        "magic": MAGIC,
        "version": 1,
        "dtype": "f32",
        "spec": ckpt.spec.to_dict(),
        "seed": ckpt.seed,
        "step": ckpt.step,
        "lr": ckpt.lr,
        "extra": ckpt.extra,
        "blocks": blocks,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    try:
        manifest = json.loads(blob[:nl].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidArgumentError(f"{path}: malformed checkpoint manifest") from exc
    if nl < 0 or manifest.get("magic") != MAGIC:
        raise InvalidArgumentError(f"{path}: not a dmseg checkpoint")
    payload = np.frombuffer(blob[nl + 1:], dtype="<f4")
    total = sum(b["count"] for b in manifest["blocks"])
    if payload.size != total:
        raise InvalidArgumentError(f"{path}: payload has {payload.size} values, manifest lists {total}")
    params = {}
    for b in manifest["blocks"]:
        params[b["name"]] = payload[b["offset"]:b["offset"] + b["count"]].reshape(b["shape"]).astype(np.float32)
    return Checkpoint(
        spec=NetworkSpec.from_dict(manifest["spec"]),
        params=params,
        seed=manifest["seed"],
        step=manifest["step"],
        lr=manifest["lr"],
        extra=manifest.get("extra", {}),
    )
