"""Layer-graph network descriptions, Kaiming-uniform init and the forward interpreter.

A :class:`NetworkSpec` is an ordered list of layers. Each layer consumes the
previous output; ``save`` stores its output under a name and ``skip`` on a
``concat`` layer appends a stored activation along the channel axis. Specs
are plain data so they round-trip through checkpoint manifests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from dmseg.autograd import tensor as T
from dmseg.errors import InvalidArgumentError, ShapeError, StateError

LAYER_KINDS = ("conv", "resblock", "upsample", "maxpool", "concat")


@dataclass
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    activation: str | None = None
    save: str | None = None
    skip: str | None = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k, ci, co = self.kernel, self.in_channels, self.out_channels
        if self.kind in ("conv", "upsample"):
            return {"weight": (co, ci, k, k, k), "bias": (co,)}
        if self.kind == "resblock":
            return {"weight1": (co, ci, k, k, k), "bias1": (co,), "weight2": (co, co, k, k, k), "bias2": (co,)}
        return {}


@dataclass
class NetworkSpec:
    name: str
    in_channels: int
    layers: list[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.validate()

    def validate(self) -> None:
        channels = self.in_channels
        saved = {"input": self.in_channels}
        for i, layer in enumerate(self.layers):
            where = f"{self.name} layer {i} ({layer.kind})"
            if layer.kind not in LAYER_KINDS:
                raise InvalidArgumentError(f"{where}: unknown layer kind")
            if layer.in_channels != channels:
                raise ShapeError(f"{where}: expects {layer.in_channels} channels, previous layer gives {channels}")
            if layer.kind == "resblock" and layer.in_channels != layer.out_channels:
                raise ShapeError(f"{where}: residual block must keep the channel count")
            if layer.kind == "concat":
                if layer.skip not in saved:
                    raise InvalidArgumentError(f"{where}: unknown skip {layer.skip!r}")
                if layer.out_channels != channels + saved[layer.skip]:
                    raise ShapeError(f"{where}: out_channels must be {channels + saved[layer.skip]}")
            if layer.kind == "maxpool" and layer.out_channels != layer.in_channels:
                raise ShapeError(f"{where}: pooling must keep the channel count")
            channels = layer.out_channels
            if layer.save:
                saved[layer.save] = channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels if self.layers else self.in_channels

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            for pname, shape in layer.param_shapes().items():
                shapes[f"{i}.{pname}"] = shape
        return shapes

    def to_dict(self) -> dict:
        return {"name": self.name, "in_channels": self.in_channels, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(d["name"], d["in_channels"], [LayerSpec(**l) for l in d["layers"]])


def kaiming_uniform_init(spec: NetworkSpec, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights ~ U(-b, b) with ``b = sqrt(6 / fan_in)``; biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


class Network:
    """A spec plus live parameter tensors."""

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.spec = spec
        if params is None:
            params = kaiming_uniform_init(spec, seed)
        expected = spec.param_shapes()
        if set(params) != set(expected):
            raise InvalidArgumentError(f"{spec.name}: parameter names do not match the spec")
        self.params: dict[str, T.Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name])
            if arr.shape != tuple(shape):
                raise ShapeError(f"{spec.name}: parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = T.Tensor(arr.copy(), requires_grad=True, name=name)
        self._output: T.Tensor | None = None

    @property
    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def astype(self, dtype) -> Network:
        return Network(self.spec, {k: v.data.astype(dtype) for k, v in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, x) -> T.Tensor:
        return self.forward(x)

    def forward(self, x) -> T.Tensor:
        x = T.as_tensor(x)
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"{self.spec.name}: input shape {x.shape} does not match "
                             f"(B, {self.spec.in_channels}, Z, Y, X)")
        saved = {"input": x}
        P = self.params
        for i, layer in enumerate(self.spec.layers):
            try:
                x = self._apply(i, layer, x, saved, P)
            except ShapeError as exc:
                raise ShapeError(f"{self.spec.name} layer {i} ({layer.kind}): {exc}") from exc
            if layer.save:
                saved[layer.save] = x
        self._output = x
        return x

    @staticmethod
    def _apply(i, layer: LayerSpec, x, saved, P):
        if layer.kind == "conv":
            if layer.stride > 1 and any(n % layer.stride for n in x.shape[2:]):
                raise ShapeError(f"spatial dims {x.shape[2:]} not divisible by stride {layer.stride}")
            y = T.conv3d(x, P[f"{i}.weight"], P[f"{i}.bias"], stride=layer.stride)
            return T.activate(y, layer.activation)
        if layer.kind == "resblock":
            h = T.relu(T.conv3d(x, P[f"{i}.weight1"], P[f"{i}.bias1"]))
            h = T.conv3d(h, P[f"{i}.weight2"], P[f"{i}.bias2"])
            return T.activate(x + h, layer.activation or "relu")
        if layer.kind == "upsample":
            y = T.conv3d(T.upsample_nearest(x, layer.stride or 2), P[f"{i}.weight"], P[f"{i}.bias"])
            return T.activate(y, layer.activation)
        if layer.kind == "maxpool":
            return T.max_pool3d(x, layer.stride or 2)
        if layer.kind == "concat":
            other = saved[layer.skip]
            if other.shape[2:] != x.shape[2:]:
                raise ShapeError(f"cannot concatenate {x.shape} with saved {layer.skip!r} {other.shape}")
            return T.concat([x, other], axis=1)
        raise InvalidArgumentError(f"unknown layer kind {layer.kind!r}")

    def backward(self, grad_output) -> None:
        """Back-propagate ``grad_output`` from the last forward pass."""
        if self._output is None:
            raise StateError(f"{self.spec.name}: backward called before forward")
        self._output.backward(grad_output)


def mnet_spec(width: int = 8, in_channels: int = 1, num_classes: int = 2) -> NetworkSpec:
    """Two-level residual 3D U-Net with a softmax head."""
    w = width
    return NetworkSpec("mnet", in_channels, [
        LayerSpec("conv", in_channels, w, activation="relu"),
        LayerSpec("resblock", w, w, save="skip1"),
        LayerSpec("conv", w, 2 * w, stride=2, activation="relu"),
        LayerSpec("resblock", 2 * w, 2 * w),
        LayerSpec("upsample", 2 * w, w, stride=2, activation="relu"),
        LayerSpec("concat", w, 2 * w, skip="skip1"),
        LayerSpec("conv", 2 * w, w, activation="relu"),
        LayerSpec("resblock", w, w),
        LayerSpec("conv", w, num_classes, kernel=1, activation="softmax"),
    ])


LRNET_HEADS = {"odm": "relu", "idm": "relu", "nidm": "relu", "nidms": "sigmoid", "snidm": "tanh"}


def lrnet_spec(variant: str = "nidm", width: int = 8, num_classes: int = 2) -> NetworkSpec:
    """Light-weight regression U-Net: one stride-2 downsampling, one upsampling.

    The output activation follows the distance-map variant (``nidms`` is the
    NI-DM target with a sigmoid head).
    """
    if variant not in LRNET_HEADS:
        raise InvalidArgumentError(f"unknown LR-Net variant {variant!r}")
    w = width
    return NetworkSpec(f"lrnet-{variant}", num_classes, [
        LayerSpec("conv", num_classes, w, stride=2, activation="relu"),
        LayerSpec("resblock", w, w),
        LayerSpec("conv", w, w, activation="relu"),
        LayerSpec("upsample", w, w, stride=2, activation="relu"),
        LayerSpec("concat", w, w + num_classes, skip="input"),
        LayerSpec("conv", w + num_classes, w, activation="relu"),
        LayerSpec("conv", w, num_classes, kernel=1, activation=LRNET_HEADS[variant]),
    ])
