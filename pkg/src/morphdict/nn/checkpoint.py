"""``MNET`` checkpoint container.

Layout (all integers little-endian uint32)::

    b"MNET" | version | manifest_len | manifest (UTF-8 JSON) | payload

The manifest lists the layer stack of every stored network (kind plus
constructor arguments), free-form metadata, and the ordered array table
``[{"name": ..., "shape": [...]}, ...]``.  The payload is those arrays
back to back as little-endian float64, row-major.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .layers import LAYER_KINDS
from .network import NeuralNet

NET_MAGIC = b"MNET"
NET_VERSION = 1


def networks_to_bytes(networks: dict[str, NeuralNet], meta: dict | None = None,
                      extra_arrays: dict[str, np.ndarray] | None = None) -> bytes:
    manifest = {"networks": {}, "arrays": [], "meta": meta or {}}
    payload = []
    for net_name, net in networks.items():
        manifest["networks"][net_name] = {
            "layers": [{"kind": layer.kind, "hyper": layer.hyper()} for layer in net.layers],
            "input_shape": list(net.input_shape) if net.input_shape else None,
        }
        arrays = {**net.parameters(), **net.buffers()}
        for name in sorted(arrays, key=_array_order):
            payload.append((f"{net_name}/{name}", arrays[name]))
    for name, arr in (extra_arrays or {}).items():
        payload.append((name, np.asarray(arr)))
    manifest["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in payload]
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [NET_MAGIC, struct.pack("<2I", NET_VERSION, len(head)), head]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in payload]
    return b"".join(parts)


def networks_from_bytes(raw: bytes, dtype=np.float64):
    """Inverse of :func:`networks_to_bytes`: ``(networks, meta, extra_arrays)``."""
    if raw[:4] != NET_MAGIC:
        raise ValueError(f"not a network checkpoint (magic {raw[:4]!r})")
    version, head_len = struct.unpack("<2I", raw[4:12])
    if version != NET_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[12:12 + head_len].decode("utf-8"))
    offset = 12 + head_len
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise ValueError("truncated checkpoint payload")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset) \
            .reshape(entry["shape"]).astype(dtype)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError("trailing bytes after checkpoint payload")

    networks = {}
    for net_name, layout in manifest["networks"].items():
        layers = [LAYER_KINDS[item["kind"]](**item["hyper"]) for item in layout["layers"]]
        net = NeuralNet(layers, layout.get("input_shape"))
        for name in list(net.parameters()) + list(net.buffers()):
            net.set_array(name, arrays.pop(f"{net_name}/{name}").copy())
        networks[net_name] = net.astype(dtype)
    return networks, manifest["meta"], arrays


def _array_order(name):
    idx, key = name.split(".", 1)
    return int(idx), key
