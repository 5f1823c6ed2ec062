"""Network checkpoints: a ``key = value`` text manifest, then binary tensor records.

Layout::

    robustkit-checkpoint 1
    depth = 3
    layer.1 = affine 2 8
    ...
    tensors = 1.W 1.b ...
    end
    <tensor record><tensor record>...

Tensor records use the flat little-endian format of :mod:`robustkit.tensor`
and follow the order of the ``tensors`` line (layer order).
"""

from __future__ import annotations

import json
from pathlib import Path

from .netfun import LayerSpec, NetworkFunction
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

MAGIC = "robustkit-checkpoint 1"


def _param_order(net: NetworkFunction):
    keys = []
    for i, spec in enumerate(net.layers, start=1):
        keys += [f"{i}.{name}" for name in spec.param_shapes()]
    return keys


def checkpoint_bytes(net: NetworkFunction, config_echo: dict | None = None) -> bytes:
    lines = [MAGIC, f"depth = {net.depth}"]
    lines += [f"layer.{i} = {s.kind} {s.in_dim} {s.out_dim}" for i, s in enumerate(net.layers, start=1)]
    lines.append(f"seed = {net.seed}")
    for norm, value in sorted((net.delta or {}).items()):
        lines.append(f"delta.{norm} = {value!r}")
    for key, value in sorted((config_echo or {}).items()):
        lines.append(f"config.{key} = {json.dumps(value, sort_keys=True)}")
    order = _param_order(net)
    lines.append("tensors = " + " ".join(order))
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return header + b"".join(tensor_to_bytes(Tensor(net.params[k])) for k in order)


def save_checkpoint(net: NetworkFunction, path, config_echo: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net, config_echo))
    return path


def read_manifest(buf: bytes):
    end = buf.find(b"\nend\n")
    if not buf.startswith(MAGIC.encode()) or end < 0:
        raise ValueError("not a robustkit checkpoint")
    manifest = {}
    for line in buf[:end].decode("utf-8").splitlines()[1:]:
        key, _, value = line.partition(" = ")
        manifest[key.strip()] = value
    return manifest, end + len(b"\nend\n")


def load_checkpoint(path) -> NetworkFunction:
    buf = Path(path).read_bytes()
    manifest, offset = read_manifest(buf)
    depth = int(manifest["depth"])
    layers = []
    for i in range(1, depth + 1):
        kind, d_in, d_out = manifest[f"layer.{i}"].split()
        layers.append(LayerSpec(kind, int(d_in), int(d_out)))
    params = {}
    names = manifest.get("tensors", "").split()
    for key in names:
        t, offset = tensor_from_bytes(buf, offset)
        params[key] = t.numpy().copy()
    if offset != len(buf):
        raise ValueError(f"{len(buf) - offset} trailing bytes after the last tensor")
    net = NetworkFunction(layers, params=params, seed=int(manifest.get("seed", 0)))
    delta = {k.split(".", 1)[1]: float(v) for k, v in manifest.items() if k.startswith("delta.")}
    net.delta = delta or None
    return net
