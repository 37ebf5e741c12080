import logging
import typing as T

import numpy as np

from ..errors import ConfigurationError, ShapeError
from .layers import (
    ACTIVATIONS,
    ConvSpec,
    LayerTrace,
    PoolSpec,
    PoolTrace,
    conv_backward,
    conv_forward,
    conv_output_size,
    deconv_backward,
    deconv_forward,
    deconv_output_size,
    maxpool_backward,
    maxpool_forward,
    pool_output_size,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "pool", "deconv")


class LayerDef(T.NamedTuple):
    """One encoder or decoder stage.

    ``size`` is the kernel size (conv, deconv) or pooling window; ``stride`` is the
    convolution stride or the upsampling factor of a transposed convolution.
    """

    kind: str
    size: int
    channels: int = 0
    stride: int = 1
    activation: str = "relu"

    def to_dict(self) -> T.Dict[str, T.Any]:
        return self._asdict()


class SkipDef(T.NamedTuple):
    """Sum a 1x1-projected encoder map into a decoder map of equal spatial size."""

    source: int
    target: int


class Architecture:
    __slots__ = ("input_channels", "layers", "skip")

    def __init__(
        self,
        input_channels: int,
        layers: T.Sequence[LayerDef],
        skip: T.Optional[SkipDef] = None,
    ):
        self.input_channels = int(input_channels)
        self.layers = tuple(LayerDef(*layer) for layer in layers)
        self.skip = SkipDef(*skip) if skip is not None else None
        if self.input_channels < 1:
            raise ConfigurationError("Architecture needs at least one input channel")
        if not self.layers:
            raise ConfigurationError("Architecture needs at least one layer")
        for index, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ConfigurationError(f"Layer {index}: unknown kind `{layer.kind}`")
            if layer.size < 1 or layer.stride < 1:
                raise ConfigurationError(f"Layer {index}: sizes must be positive")
            if layer.kind != "pool" and layer.channels < 1:
                raise ConfigurationError(f"Layer {index}: needs output channels")
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(
                    f"Layer {index}: unknown activation `{layer.activation}`"
                )
        if self.layers[-1].kind == "pool":
            raise ConfigurationError("The last layer must produce feature channels")
        if self.skip is not None and not (
            0 <= self.skip.source < self.skip.target < len(self.layers)
        ):
            raise ConfigurationError(f"Invalid skip connection {tuple(self.skip)}")

    @classmethod
    def default(cls, input_channels: int = 3, feature_dim: int = 16) -> "Architecture":
        """32x32 -> conv3 -> 30 -> pool2 -> 15 -> conv2 -> 14 -> pool2 -> 7 -> x4 -> 32."""
        return cls(
            input_channels,
            [
                LayerDef("conv", 3, 16),
                LayerDef("pool", 2),
                LayerDef("conv", 2, 16),
                LayerDef("pool", 2),
                LayerDef("deconv", 8, feature_dim, stride=4, activation="none"),
            ],
        )

    @classmethod
    def with_skip(
        cls, input_channels: int = 3, feature_dim: int = 16
    ) -> "Architecture":
        """Default encoder; the decoder upsamples in two steps and fuses pool1."""
        return cls(
            input_channels,
            [
                LayerDef("conv", 3, 16),
                LayerDef("pool", 2),
                LayerDef("conv", 2, 16),
                LayerDef("pool", 2),
                LayerDef("deconv", 3, 16, stride=2),
                LayerDef("deconv", 4, feature_dim, stride=2, activation="none"),
            ],
            skip=SkipDef(source=1, target=4),
        )

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].channels

    def channels_after(self, index: int) -> int:
        channels = self.input_channels
        for layer in self.layers[: index + 1]:
            if layer.kind != "pool":
                channels = layer.channels
        return channels

    def output_shapes(self, height: int, width: int) -> T.List[T.Tuple[int, int, int]]:
        """Per-layer ``(H, W, C)``; raises ShapeError naming the offending layer."""
        shapes = []
        h, w, c = height, width, self.input_channels
        for index, layer in enumerate(self.layers):
            try:
                if layer.kind == "conv":
                    h = conv_output_size(h, layer.size, layer.stride)
                    w = conv_output_size(w, layer.size, layer.stride)
                    c = layer.channels
                elif layer.kind == "pool":
                    h = pool_output_size(h, layer.size)
                    w = pool_output_size(w, layer.size)
                else:
                    h = deconv_output_size(h, layer.size, layer.stride)
                    w = deconv_output_size(w, layer.size, layer.stride)
                    c = layer.channels
            except ShapeError as err:
                raise ShapeError(f"Layer {index} ({layer.kind}): {err}") from err
            shapes.append((h, w, c))
        if self.skip is not None:
            source, target = shapes[self.skip.source], shapes[self.skip.target]
            if source[:2] != target[:2]:
                raise ShapeError(
                    f"Skip connection joins layer {self.skip.source} {source[:2]} "
                    f"and layer {self.skip.target} {target[:2]}"
                )
        return shapes

    def validate(self, height: int, width: int):
        shapes = self.output_shapes(height, width)
        if shapes[-1][:2] != (height, width):
            raise ShapeError(
                f"Architecture maps {height}x{width} inputs to "
                f"{shapes[-1][0]}x{shapes[-1][1]} features"
            )

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "input_channels": self.input_channels,
            "layers": [layer.to_dict() for layer in self.layers],
            "skip": list(self.skip) if self.skip is not None else None,
        }

    @classmethod
    def from_dict(cls, data: T.Mapping[str, T.Any]) -> "Architecture":
        try:
            layers = [LayerDef(**layer) for layer in data["layers"]]
            skip = data.get("skip")
            return cls(
                data["input_channels"],
                layers,
                SkipDef(*skip) if skip is not None else None,
            )
        except (KeyError, TypeError) as err:
            raise ConfigurationError(f"Invalid architecture description: {err}") from err

    def __eq__(self, other) -> bool:
        return isinstance(other, Architecture) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"Architecture({self.to_dict()})"


class BackboneTrace(T.NamedTuple):
    input_shape: T.Tuple[int, ...]
    layers: T.List[T.Union[LayerTrace, PoolTrace]]
    skip: T.Optional[LayerTrace]

    def pattern(self) -> T.List[np.ndarray]:
        """ReLU on/off masks and pooling argmax indices (the piecewise-linear region)."""
        patterns = []
        for trace in self.layers + ([self.skip] if self.skip is not None else []):
            if isinstance(trace, PoolTrace):
                patterns.append(trace.argmax)
            elif trace.activation == "relu":
                patterns.append(trace.pre_activation > 0)
        return patterns


class Backbone:
    """Encoder-decoder producing ``(B, H, W, P)`` pixel-wise features."""

    def __init__(
        self,
        architecture: Architecture,
        params: T.Optional[T.Mapping[str, np.ndarray]] = None,
        rng: T.Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        self.architecture = architecture
        self.dtype = np.dtype(dtype)
        if params is None:
            params = self.initial_parameters(architecture, rng)
        self.params: T.Dict[str, np.ndarray] = {}
        expected = self.parameter_shapes(architecture)
        if set(params) != set(expected):
            raise ConfigurationError(
                f"Backbone parameters {sorted(params)} do not match the architecture "
                f"({sorted(expected)})"
            )
        for name, shape in expected.items():
            value = np.array(params[name], dtype=self.dtype)
            if value.shape != shape:
                raise ShapeError(
                    f"Parameter `{name}` has shape {value.shape}, expected {shape}"
                )
            self.params[name] = value

    @staticmethod
    def parameter_shapes(
        architecture: Architecture,
    ) -> T.Dict[str, T.Tuple[int, ...]]:
        shapes = {}
        channels = architecture.input_channels
        for index, layer in enumerate(architecture.layers):
            if layer.kind == "conv":
                shapes[f"layer{index}.kernel"] = (
                    layer.size,
                    layer.size,
                    channels,
                    layer.channels,
                )
            elif layer.kind == "deconv":
                shapes[f"layer{index}.kernel"] = (
                    layer.size,
                    layer.size,
                    layer.channels,
                    channels,
                )
            if layer.kind != "pool":
                shapes[f"layer{index}.bias"] = (layer.channels,)
                channels = layer.channels
        if architecture.skip is not None:
            shapes["skip.kernel"] = (
                1,
                1,
                architecture.channels_after(architecture.skip.source),
                architecture.channels_after(architecture.skip.target),
            )
            shapes["skip.bias"] = (architecture.channels_after(architecture.skip.target),)
        return shapes

    @classmethod
    def initial_parameters(
        cls, architecture: Architecture, rng: T.Optional[np.random.Generator] = None
    ) -> T.Dict[str, np.ndarray]:
        """He-normal kernels scaled by fan-in, zero biases."""
        rng = rng if rng is not None else np.random.default_rng()
        params = {}
        for name, shape in cls.parameter_shapes(architecture).items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape)
                continue
            a, b, first, second = shape
            # transposed kernels are stored (a, b, out, in)
            in_channels = second if _is_deconv(architecture, name) else first
            fan_in = a * b * in_channels
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return params

    @property
    def feature_dim(self) -> int:
        return self.architecture.feature_dim

    def _spec(self, index: int) -> ConvSpec:
        layer = self.architecture.layers[index]
        stride = layer.stride if layer.kind == "conv" else 1
        return ConvSpec(
            self.params[f"layer{index}.kernel"],
            self.params[f"layer{index}.bias"],
            stride=stride,
            activation=layer.activation,
        )

    def _skip_spec(self) -> ConvSpec:
        return ConvSpec(
            self.params["skip.kernel"], self.params["skip.bias"], activation="none"
        )

    def forward(self, images: np.ndarray) -> T.Tuple[np.ndarray, BackboneTrace]:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim != 4:
            raise ShapeError(f"Expected (B, H, W, C) images, got {images.shape}")
        self.architecture.validate(images.shape[1], images.shape[2])

        skip = self.architecture.skip
        skip_trace = None
        projected = None
        traces: T.List[T.Union[LayerTrace, PoolTrace]] = []
        z = images
        for index, layer in enumerate(self.architecture.layers):
            if layer.kind == "conv":
                z, trace = conv_forward(z, self._spec(index))
            elif layer.kind == "pool":
                z, trace = maxpool_forward(z, PoolSpec(layer.size))
            else:
                z, trace = deconv_forward(z, self._spec(index), layer.stride)
            traces.append(trace)
            if skip is not None and index == skip.source:
                projected, skip_trace = conv_forward(z, self._skip_spec())
            if skip is not None and index == skip.target:
                z = z + projected
        return z, BackboneTrace(images.shape, traces, skip_trace)

    def backward(
        self, grad_features: np.ndarray, trace: BackboneTrace
    ) -> T.Tuple[T.Dict[str, np.ndarray], np.ndarray]:
        """Returns parameter gradients by name and the gradient w.r.t. the images."""
        skip = self.architecture.skip
        grads: T.Dict[str, np.ndarray] = {}
        grad = np.asarray(grad_features, dtype=self.dtype)
        grad_projected = None
        for index in range(len(self.architecture.layers) - 1, -1, -1):
            layer = self.architecture.layers[index]
            if skip is not None and index == skip.target:
                grad_projected = grad
            if skip is not None and index == skip.source:
                kernel, bias, grad_source = conv_backward(
                    grad_projected, trace.skip, self._skip_spec()
                )
                grads["skip.kernel"], grads["skip.bias"] = kernel, bias
                grad = grad + grad_source
            layer_trace = trace.layers[index]
            if layer.kind == "pool":
                grad = maxpool_backward(grad, layer_trace, PoolSpec(layer.size))
                continue
            if layer.kind == "conv":
                kernel, bias, grad = conv_backward(grad, layer_trace, self._spec(index))
            else:
                kernel, bias, grad = deconv_backward(
                    grad, layer_trace, self._spec(index), layer.stride
                )
            grads[f"layer{index}.kernel"], grads[f"layer{index}.bias"] = kernel, bias
        return grads, grad


def _is_deconv(architecture: Architecture, name: str) -> bool:
    prefix = name.split(".")[0]
    if not prefix.startswith("layer"):
        return False
    index = int(prefix[len("layer") :])
    return architecture.layers[index].kind == "deconv"
