"""Sequential nets, checkpoints and batch-norm folding."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .layers import BatchNorm, Layer, LayerSpec, make_layer

_MAGIC = b"TNCK"


class Net:
    """An ordered stack of layers built for a fixed ``(C, H, W)`` input shape.

    Shapes are checked at construction; parameters are only allocated by
    :meth:`init`, so large architectures can be shape-checked for free.
    """

    def __init__(self, specs: Iterable[LayerSpec], input_shape: tuple[int, int, int]):
        self.specs = list(specs)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers: list[Layer] = [make_layer(s) for s in self.specs]
        self.shapes: list[tuple[int, int, int]] = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape)
            except ValueError as exc:
                raise ValueError(f"layer {i + 1} ({layer.spec.kind}): {exc}") from exc
            if min(shape) < 1:
                raise ValueError(f"layer {i + 1} ({layer.spec.kind}) produces empty output {shape}")
            self.shapes.append(shape)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.shapes[-1] if self.shapes else self.input_shape

    def init(self, seed: int = 0) -> "Net":
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)
        return self

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match net input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Backpropagate ``grad_out``; parameter gradients accumulate into each layer."""
        g = np.asarray(grad_out, dtype=np.float64)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm) and layer.params:
                out[f"{i}.running_mean"] = layer.running_mean
                out[f"{i}.running_var"] = layer.running_var
        return out

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        idx, name = key.split(".", 1)
        setattr(self.layers[int(idx)], name, np.array(value, dtype=np.float64))

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params(), **self.buffers()}

    def copy(self) -> "Net":
        other = Net(self.specs, self.input_shape)
        for mine, theirs in zip(self.layers, other.layers):
            theirs.params = {k: v.copy() for k, v in mine.params.items()}
            theirs.zero_grad()
            if isinstance(mine, BatchNorm) and mine.params:
                theirs.running_mean = mine.running_mean.copy()
                theirs.running_var = mine.running_var.copy()
        return other


def save_checkpoint(net: Net, path: str | Path, extra: Optional[dict] = None) -> None:
    """JSON header (layer specs, tensor index) followed by a little-endian float32 blob."""
    state = net.state()
    index, offset = [], 0
    for name, arr in state.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {"input_shape": list(net.input_shape), "layers": [s.to_dict() for s in net.specs],
              "tensors": index, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = np.concatenate([a.ravel() for a in state.values()]) if state else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(hbytes)) + hbytes)
        fh.write(blob.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Net, dict]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tinynet checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen])
    blob = np.frombuffer(data[8 + hlen:], dtype="<f4").astype(np.float64)
    net = Net([LayerSpec.from_dict(d) for d in header["layers"]], tuple(header["input_shape"]))
    net.init(0)
    params = net.params()
    for t in header["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = blob[t["offset"]:t["offset"] + size].reshape(t["shape"])
        if t["name"] in params:
            params[t["name"]][...] = arr
        else:
            net.set_buffer(t["name"], arr)
    return net, header.get("extra", {})


def fold_batchnorm(net: Net) -> Net:
    """Merge each inference-mode BATCHNORM into the preceding CONV/TCONV/DENSE."""
    specs, layers = [], []
    for i, (spec, layer) in enumerate(zip(net.specs, net.layers)):
        if spec.kind != "BATCHNORM":
            specs.append(spec)
            layers.append(layer)
            continue
        if not layers or layers[-1].spec.kind not in ("CONV", "TCONV", "DENSE"):
            raise ValueError(f"layer {i + 1}: BATCHNORM does not follow CONV/TCONV/DENSE")
        if not layer.params:
            raise ValueError(f"layer {i + 1}: BATCHNORM has no parameters (net not initialised)")
        prev = layers[-1]
        scale = layer.params["gamma"] / np.sqrt(layer.running_var + layer.eps)
        shift = layer.params["beta"] - layer.running_mean * scale
        W = prev.params["W"]
        axis = {"CONV": 0, "TCONV": 1, "DENSE": 1}[prev.spec.kind]
        shape = [1] * W.ndim
        shape[axis] = -1
        folded = type(prev)(prev.spec)
        folded.in_shape, folded.out_shape = prev.in_shape, prev.out_shape
        folded.params = {"W": W * scale.reshape(shape), "b": prev.params["b"] * scale + shift}
        folded.zero_grad()
        layers[-1] = folded
    out = Net(specs, net.input_shape)
    for mine, src in zip(out.layers, layers):
        mine.params = {k: v.copy() for k, v in src.params.items()}
        mine.zero_grad()
        if isinstance(src, BatchNorm):
            mine.running_mean = src.running_mean.copy()
            mine.running_var = src.running_var.copy()
    return out
