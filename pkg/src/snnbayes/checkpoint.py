"""Bit-exact binary checkpoints for point models and IVON posteriors.

Layout::

    b"SNNCKPT v1\\n"
    <one line of UTF-8 JSON header, keys sorted>\\n
    <concatenated little-endian float64 tensor payloads>

The header holds ``kind`` (``"point"`` or ``"ivon"``), the flatten layout
version, the architecture, batch-norm settings, optimizer hyperparameters,
free-form ``meta`` and a tensor table (name, shape, byte offset). Point
checkpoints store ``params.<name>`` tensors; IVON checkpoints store
``posterior.mu``, ``posterior.h`` and ``posterior.g_mom``. Both store
``bn<i>.running_mean`` and ``bn<i>.running_var``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import IvonPosterior
from .snn import LAYOUT_VERSION, Architecture, BatchNormState, NetworkParams, unflatten

MAGIC = b"SNNCKPT v1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arch: Architecture
    bn_states: list[BatchNormState]
    params: NetworkParams | None = None
    posterior: IvonPosterior | None = None
    meta: dict = field(default_factory=dict)

    def point_params(self) -> NetworkParams:
        """Parameters of a point model, or the posterior mean for IVON."""
        if self.kind == "ivon":
            return unflatten(self.posterior.mu, self.arch)
        return self.params


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    hyper = {}
    if ckpt.kind == "point":
        tensors += [(f"params.{k}", v) for k, v in ckpt.params.items()]
    elif ckpt.kind == "ivon":
        post = ckpt.posterior
        tensors += [("posterior.mu", post.mu), ("posterior.h", post.h), ("posterior.g_mom", post.g_mom)]
        hyper = {"ess": post.ess, "wd": post.wd, "beta1": post.beta1, "beta2": post.beta2,
                 "lr": post.lr, "t": post.t}
    else:
        raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
    bn_meta = []
    for i, st in enumerate(ckpt.bn_states):
        tensors += [(f"bn{i}.running_mean", st.running_mean), (f"bn{i}.running_var", st.running_var)]
        bn_meta.append({"momentum": st.momentum, "eps": st.eps, "frozen": st.frozen})

    table, payload, offset = [], [], 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    header = {"kind": ckpt.kind, "layout": LAYOUT_VERSION, "arch": ckpt.arch.to_dict(), "bn": bn_meta,
              "hyper": hyper, "meta": ckpt.meta, "tensors": table}
    blob = MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(payload)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an SNNCKPT v1 file")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("layout") != LAYOUT_VERSION:
        raise CheckpointError(f"{path}: layout {header.get('layout')!r}, expected {LAYOUT_VERSION!r}")
    body = blob[end + 1:]
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body[start:start + n], dtype="<f8").astype(np.float64) \
            .reshape(entry["shape"])

    arch = Architecture.from_dict(header["arch"])
    bn_states = [BatchNormState(arrays[f"bn{i}.running_mean"], arrays[f"bn{i}.running_var"], **m)
                 for i, m in enumerate(header["bn"])]
    if len(bn_states) != len(arch.hidden) + 1:
        raise CheckpointError(f"{path}: batch-norm count does not match the architecture")
    kind = header["kind"]
    params = posterior = None
    if kind == "point":
        params = NetworkParams()
        for name, shape in arch.layout():
            arr = arrays.get(f"params.{name}")
            if arr is None or arr.shape != tuple(shape):
                raise CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
            params[name] = arr
    elif kind == "ivon":
        mu = arrays["posterior.mu"]
        if mu.shape != (arch.num_params,):
            raise CheckpointError(f"{path}: posterior dimension does not match the architecture")
        hyper = header["hyper"]
        posterior = IvonPosterior(mu, arrays["posterior.h"], arrays["posterior.g_mom"], **hyper)
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    return Checkpoint(kind, arch, bn_states, params, posterior, header["meta"])
