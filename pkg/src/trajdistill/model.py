"""Functional MLP / ConvNet-D networks over a flat parameter vector."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    depth: int
    width: int
    input_shape: tuple[int, ...]
    num_classes: int
    norm: str = "instance"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in ("mlp", "convnet"):
            raise InputError(f"unknown architecture kind {self.kind!r}")
        if self.norm not in ("instance", "none"):
            raise InputError(f"unknown norm {self.norm!r}")
        if self.depth < 1 or self.width < 1 or self.num_classes < 1:
            raise InputError("depth, width and num_classes must be positive")
        if not self.input_shape or min(self.input_shape) < 1:
            raise InputError(f"bad input shape {self.input_shape}")
        if self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise InputError("convnet needs a (channels, height, width) input shape")
            _, h, w = self.input_shape
            if h % (2 ** self.depth) or w % (2 ** self.depth):
                raise InputError(f"convnet depth {self.depth} halves {h}x{w} to a non-integer size")

    def to_json(self) -> dict:
        return {"kind": self.kind, "depth": self.depth, "width": self.width,
                "input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "norm": self.norm}

    @classmethod
    def from_json(cls, obj: dict) -> "ArchSpec":
        return cls(kind=obj["kind"], depth=int(obj["depth"]), width=int(obj["width"]),
                   input_shape=tuple(obj["input_shape"]), num_classes=int(obj["num_classes"]),
                   norm=obj.get("norm", "instance"))

    @classmethod
    def parse(cls, text: str, input_shape, num_classes: int) -> "ArchSpec":
        """Parse the compact form ``convnet-d3-w16`` / ``mlp-d1-w64`` (optional ``-nnone``)."""
        m = re.fullmatch(r"(mlp|convnet)-d(\d+)-w(\d+)(?:-n(instance|none))?", text.strip())
        if m is None:
            raise InputError(f"cannot parse architecture {text!r}; expected e.g. convnet-d3-w16")
        kind, depth, width, norm = m.groups()
        if norm is None:
            norm = "instance" if kind == "convnet" else "none"
        return cls(kind, int(depth), int(width), tuple(input_shape), num_classes, norm)

    @property
    def tag(self) -> str:
        return f"{self.kind}-d{self.depth}-w{self.width}-n{self.norm}"


class LayoutEntry(NamedTuple):
    name: str
    shape: tuple[int, ...]
    offset: int
    length: int

    @property
    def layer(self) -> str:
        return self.name.split(".")[0]


def layout_for(spec: ArchSpec) -> tuple[LayoutEntry, ...]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if spec.kind == "mlp":
        fan = int(np.prod(spec.input_shape))
        for i in range(spec.depth):
            shapes += [(f"fc{i}.weight", (fan, spec.width)), (f"fc{i}.bias", (spec.width,))]
            fan = spec.width
    else:
        c, h, w = spec.input_shape
        for i in range(spec.depth):
            shapes += [(f"conv{i}.weight", (spec.width, c, 3, 3)), (f"conv{i}.bias", (spec.width,))]
            c, h, w = spec.width, h // 2, w // 2
        fan = c * h * w
    shapes += [("head.weight", (fan, spec.num_classes)), ("head.bias", (spec.num_classes,))]

    entries, offset = [], 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        entries.append(LayoutEntry(name, shape, offset, n))
        offset += n
    return tuple(entries)


def layout_to_json(layout) -> list:
    return [[e.name, list(e.shape), e.offset, e.length] for e in layout]


def layout_from_json(obj) -> tuple[LayoutEntry, ...]:
    return tuple(LayoutEntry(n, tuple(s), int(o), int(l)) for n, s, o, l in obj)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple[LayoutEntry, ...] = field(repr=False)

    def __post_init__(self):
        total = sum(e.length for e in self.layout)
        if self.values.ndim != 1 or self.values.size != total:
            raise ContractError(f"parameter vector of size {self.values.size} does not fit layout of size {total}")

    @property
    def size(self) -> int:
        return self.values.size

    def layers(self) -> list[str]:
        """Layer names in layout order (weight and bias share a layer)."""
        names: list[str] = []
        for e in self.layout:
            if e.layer not in names:
                names.append(e.layer)
        return names


def layer_ranges(layout) -> list[tuple[str, int, int]]:
    """(layer, start, stop) index ranges; weight and bias blocks are contiguous."""
    out: list[tuple[str, int, int]] = []
    for e in layout:
        if out and out[-1][0] == e.layer:
            out[-1] = (e.layer, out[-1][1], e.offset + e.length)
        else:
            out.append((e.layer, e.offset, e.offset + e.length))
    return out


def param_count(spec: ArchSpec) -> int:
    return sum(e.length for e in layout_for(spec))


def init_params(spec: ArchSpec, seed: int, dtype=None) -> ParamVector:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    layout = layout_for(spec)
    values = np.zeros(sum(e.length for e in layout), dtype=np.float64)
    for e in layout:
        if e.name.endswith(".weight"):
            fan_in = int(np.prod(e.shape[1:])) if len(e.shape) == 4 else e.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            values[e.offset:e.offset + e.length] = rng.uniform(-bound, bound, e.length)
    return ParamVector(values.astype(dtype or T.get_default_dtype()), layout)


def unflatten(params: ParamVector | Tensor, layout=None) -> dict[str, Tensor]:
    """Split a flat vector into named layer tensors (differentiable for Tensors)."""
    if isinstance(params, ParamVector):
        layout = params.layout
        flat = Tensor._const(params.values)
    else:
        flat = params
    if layout is None:
        raise ContractError("unflatten of a raw tensor needs a layout")
    total = sum(e.length for e in layout)
    if flat.ndim != 1 or flat.shape[0] != total:
        raise ContractError(f"vector of shape {flat.shape} does not match layout of size {total}")
    return {e.name: flat[e.offset:e.offset + e.length].reshape(e.shape) for e in layout}


def flatten(layers: dict, layout) -> ParamVector:
    parts = []
    for e in layout:
        if e.name not in layers:
            raise ContractError(f"missing layer tensor {e.name!r}")
        arr = layers[e.name].data if isinstance(layers[e.name], Tensor) else np.asarray(layers[e.name])
        if tuple(arr.shape) != e.shape:
            raise ContractError(f"{e.name}: shape {arr.shape} does not match layout {e.shape}")
        parts.append(arr.reshape(-1))
    if set(layers) != {e.name for e in layout}:
        raise ContractError("layer names do not match layout")
    return ParamVector(np.concatenate(parts), tuple(layout))


def forward(spec: ArchSpec, params: ParamVector | Tensor, batch) -> Tensor:
    """Logits [batch, num_classes]; differentiable w.r.t. params and batch."""
    x = batch if isinstance(batch, Tensor) else Tensor._const(np.asarray(batch))
    if spec.kind == "mlp":
        fits = int(np.prod(x.shape[1:])) == int(np.prod(spec.input_shape))
    else:
        fits = tuple(x.shape[1:]) == spec.input_shape
    if not fits:
        raise DimensionError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")
    w = unflatten(params, layout_for(spec))
    if spec.kind == "mlp":
        x = T.flatten(x)
        for i in range(spec.depth):
            x = T.relu(x @ w[f"fc{i}.weight"] + w[f"fc{i}.bias"])
    else:
        for i in range(spec.depth):
            x = T.conv2d(x, w[f"conv{i}.weight"]) + w[f"conv{i}.bias"].reshape(1, spec.width, 1, 1)
            if spec.norm == "instance":
                x = T.instance_norm(x)
            x = T.avg_pool2d(T.relu(x))
        x = T.flatten(x)
    return x @ w["head.weight"] + w["head.bias"]
