"""Weight-file persistence.

A saved network is a directory holding ``manifest.json`` (layer list, shapes,
dtype, seed, free-form metadata) plus one raw little-endian float32 blob per
tensor, referenced by name.  Round trips are bit-exact for float32 networks.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import LayerSpec, Network
from .tensor import Tensor

MANIFEST_NAME = "manifest.json"
FORMAT = "resmatch-weights/1"


def _blob_name(tensor_name: str) -> str:
    return tensor_name.replace("/", "_") + ".bin"


def save_network(net: Network, directory: str | Path, metadata: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, param in net.params.items():
        blob = _blob_name(name)
        arr = param.data.astype("<f4", copy=False)
        (directory / blob).write_bytes(arr.tobytes(order="C"))
        tensors[name] = {"shape": list(param.shape), "file": blob}
    state = {}
    for name, arr in net.state.items():
        blob = _blob_name("state." + name)
        (directory / blob).write_bytes(arr.astype("<f4", copy=False).tobytes(order="C"))
        state[name] = {"shape": list(arr.shape), "file": blob}
    manifest = {
        "format": FORMAT,
        "dtype": "float32",
        "seed": net.seed,
        "input_shape": list(net.input_shape),
        "layers": [spec.to_dict() for spec in net.layers],
        "tensors": tensors,
        "state": state,
        "metadata": metadata or {},
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_network(directory: str | Path) -> tuple[Network, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unrecognized weight-file format in {directory}")
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    net = Network(tuple(manifest["input_shape"]), layers, seed=manifest["seed"], dtype=np.float32)
    for name, entry in manifest["tensors"].items():
        raw = (directory / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        if name not in net.params:
            raise ValueError(f"manifest tensor {name!r} has no slot in the rebuilt network")
        if tuple(arr.shape) != net.params[name].shape:
            raise ValueError(f"tensor {name!r} shape {arr.shape} != expected {net.params[name].shape}")
        net.params[name] = Tensor(arr, requires_grad=True, name=name)
    for name, entry in manifest.get("state", {}).items():
        raw = (directory / entry["file"]).read_bytes()
        net.state[name] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return net, manifest.get("metadata", {})
