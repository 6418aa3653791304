"""Declarative encoder-decoder model with loadable-weight forward inference.

The encoder is the standard 18-layer residual topology whose first
convolution takes 6 channels when fed a stacked stereo pair (left image
first) instead of the usual 3.  The decoder upsamples through five stages
with skip concatenation and emits a single full-resolution map squashed to
(0, 1) by a sigmoid.  Parameter counts and shape propagation are exact and
serve as the single source of truth for the CLI summary table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pseudolidar.geometry import DisparityMap, StereoRig
from pseudolidar.raster import ImageBuffer

LAYER_KINDS = frozenset({
    "conv2d", "batchnorm", "relu", "maxpool", "basic-block",
    "upsample-nearest", "sigmoid", "concat-skip", "elu",
})

ENCODER_STAGE_CHANNELS = (64, 128, 256, 512)
DECODER_CHANNELS = (16, 32, 64, 128, 256)
BATCHNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Shape propagation failed; the message names the offending layer."""


class WeightError(ValueError):
    """A required tensor is missing or mis-shaped; the message names it."""


@dataclass(frozen=True)
class LayerSpec:
    """One declarative layer; basic-block is a composite residual unit."""

    name: str
    kind: str
    inputs: tuple[str, ...]
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    has_bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "batchnorm", "basic-block"):
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"{self.name}: channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"{self.name}: kernel and stride must be >= 1")

    @property
    def has_downsample(self) -> bool:
        return self.kind == "basic-block" and (
            self.stride != (1, 1) or self.in_channels != self.out_channels
        )


@dataclass(frozen=True)
class ArchSpec:
    """Ordered layer list with skip topology plus the expected input shape."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    feature_taps: tuple[str, ...] = ()

    @property
    def output(self) -> str:
        return self.layers[-1].name


class WeightStore:
    """Immutable name -> float32 tensor map."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        store = {}
        for name, arr in tensors.items():
            a = np.array(arr, dtype=np.float32, copy=True)
            a.setflags(write=False)
            store[name] = a
        self._tensors = store

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def raw(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def get(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in self._tensors:
            raise WeightError(f"missing weight tensor {name!r}")
        arr = self._tensors[name]
        if arr.shape != shape:
            raise WeightError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        return arr

    def items(self):
        return self._tensors.items()


# ---------------------------------------------------------------------------
# architecture construction

def _basic_block(name: str, inputs: tuple[str, ...], cin: int, cout: int,
                 stride: int) -> LayerSpec:
    return LayerSpec(name, "basic-block", inputs, cin, cout,
                     kernel=(3, 3), stride=(stride, stride), padding=(1, 1))


def build_encoder(stereo_input: bool, input_res: tuple[int, int] = (192, 640)) -> ArchSpec:
    """Residual encoder; the first conv takes 6 channels in stereo mode."""
    cin = 6 if stereo_input else 3
    h, w = input_res
    layers = [
        LayerSpec("encoder.conv1", "conv2d", ("input",), cin, 64,
                  kernel=(7, 7), stride=(2, 2), padding=(3, 3)),
        LayerSpec("encoder.bn1", "batchnorm", ("encoder.conv1",), 64, 64),
        LayerSpec("encoder.relu", "relu", ("encoder.bn1",)),
        LayerSpec("encoder.maxpool", "maxpool", ("encoder.relu",),
                  kernel=(3, 3), stride=(2, 2), padding=(1, 1)),
    ]
    prev = "encoder.maxpool"
    cprev = 64
    for stage, cout in enumerate(ENCODER_STAGE_CHANNELS, start=1):
        stride = 1 if stage == 1 else 2
        for block in range(2):
            name = f"encoder.layer{stage}.{block}"
            layers.append(_basic_block(name, (prev,), cprev, cout, stride if block == 0 else 1))
            prev, cprev = name, cout
    return ArchSpec(tuple(layers), (cin, h, w))


def build_network(stereo_input: bool, input_res: tuple[int, int] = (192, 640)) -> ArchSpec:
    """Full encoder-decoder; decoder mirrors the 5-stage upsample-skip layout."""
    enc = build_encoder(stereo_input, input_res)
    taps = ("encoder.relu", "encoder.layer1.1", "encoder.layer2.1",
            "encoder.layer3.1", "encoder.layer4.1")
    skip_channels = {4: 256, 3: 128, 2: 64, 1: 64}  # tap feeding each scale
    skip_names = {4: taps[3], 3: taps[2], 2: taps[1], 1: taps[0]}
    layers = list(enc.layers)
    prev, cprev = "encoder.layer4.1", 512
    for scale in range(4, -1, -1):
        cout = DECODER_CHANNELS[scale]
        name0 = f"decoder.upconv{scale}_0"
        layers.append(LayerSpec(name0, "conv2d", (prev,), cprev, cout,
                                kernel=(3, 3), stride=(1, 1), padding=(1, 1), has_bias=True))
        layers.append(LayerSpec(f"{name0}.elu", "elu", (name0,)))
        up = f"decoder.up{scale}"
        layers.append(LayerSpec(up, "upsample-nearest", (f"{name0}.elu",)))
        prev, cprev = up, cout
        if scale > 0:
            cat = f"decoder.cat{scale}"
            layers.append(LayerSpec(cat, "concat-skip", (up, skip_names[scale])))
            prev, cprev = cat, cout + skip_channels[scale]
        name1 = f"decoder.upconv{scale}_1"
        layers.append(LayerSpec(name1, "conv2d", (prev,), cprev, cout,
                                kernel=(3, 3), stride=(1, 1), padding=(1, 1), has_bias=True))
        layers.append(LayerSpec(f"{name1}.elu", "elu", (name1,)))
        prev, cprev = f"{name1}.elu", cout
    layers.append(LayerSpec("decoder.dispconv", "conv2d", (prev,), cprev, 1,
                            kernel=(3, 3), stride=(1, 1), padding=(1, 1), has_bias=True))
    layers.append(LayerSpec("decoder.sigmoid", "sigmoid", ("decoder.dispconv",)))
    return ArchSpec(tuple(layers), enc.input_shape, feature_taps=taps)


@dataclass(frozen=True)
class _Prim:
    """Expanded primitive node (internal execution graph)."""

    name: str
    kind: str  # primitive kinds plus 'add' for the residual join
    inputs: tuple[str, ...]
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    has_bias: bool = False


def _expand_block(layer: LayerSpec) -> list[_Prim]:
    n, src = layer.name, layer.inputs[0]
    cin, cout, stride = layer.in_channels, layer.out_channels, layer.stride
    prims = [
        _Prim(f"{n}.conv1", "conv2d", (src,), cin, cout, (3, 3), stride, (1, 1)),
        _Prim(f"{n}.bn1", "batchnorm", (f"{n}.conv1",), cout, cout),
        _Prim(f"{n}.relu1", "relu", (f"{n}.bn1",)),
        _Prim(f"{n}.conv2", "conv2d", (f"{n}.relu1",), cout, cout, (3, 3), (1, 1), (1, 1)),
        _Prim(f"{n}.bn2", "batchnorm", (f"{n}.conv2",), cout, cout),
    ]
    shortcut = src
    if layer.has_downsample:
        prims.append(_Prim(f"{n}.downsample.0", "conv2d", (src,), cin, cout,
                           (1, 1), stride, (0, 0)))
        prims.append(_Prim(f"{n}.downsample.1", "batchnorm",
                           (f"{n}.downsample.0",), cout, cout))
        shortcut = f"{n}.downsample.1"
    prims.append(_Prim(f"{n}.add", "add", (f"{n}.bn2", shortcut)))
    prims.append(_Prim(f"{n}.relu2", "relu", (f"{n}.add",)))
    return prims


def _expand(spec: ArchSpec) -> list[_Prim]:
    prims: list[_Prim] = []
    renames: dict[str, str] = {}  # block name -> its output primitive
    for layer in spec.layers:
        inputs = tuple(renames.get(i, i) for i in layer.inputs)
        if layer.kind == "basic-block":
            prims.extend(_expand_block(LayerSpec(layer.name, layer.kind, inputs,
                                                 layer.in_channels, layer.out_channels,
                                                 layer.kernel, layer.stride, layer.padding)))
            renames[layer.name] = f"{layer.name}.relu2"
        else:
            prims.append(_Prim(layer.name, layer.kind, inputs, layer.in_channels,
                               layer.out_channels, layer.kernel, layer.stride,
                               layer.padding, layer.has_bias))
    return prims


# ---------------------------------------------------------------------------
# counting and shape propagation

def _prim_params(p: _Prim) -> int:
    if p.kind == "conv2d":
        n = p.in_channels * p.out_channels * p.kernel[0] * p.kernel[1]
        return n + (p.out_channels if p.has_bias else 0)
    if p.kind == "batchnorm":
        return 2 * p.out_channels  # trainable scale and shift
    return 0


def param_count(spec: ArchSpec) -> tuple[int, list[tuple[str, int]]]:
    """Total trainable parameters plus a per-top-level-layer breakdown."""
    per_layer = []
    for layer in spec.layers:
        if layer.kind == "basic-block":
            n = sum(_prim_params(p) for p in _expand_block(layer))
        else:
            n = _prim_params(_Prim(layer.name, layer.kind, layer.inputs, layer.in_channels,
                                   layer.out_channels, layer.kernel, layer.stride,
                                   layer.padding, layer.has_bias))
        per_layer.append((layer.name, n))
    return sum(n for _, n in per_layer), per_layer


def layer_census(spec: ArchSpec) -> dict[str, int]:
    """Primitive layer counts (convs inside residual blocks included)."""
    census: dict[str, int] = {}
    for p in _expand(spec):
        if p.kind != "add":
            census[p.kind] = census.get(p.kind, 0) + 1
    census["basic-block"] = sum(1 for l in spec.layers if l.kind == "basic-block")
    return census


def _conv_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _propagate_prims(spec: ArchSpec) -> dict[str, tuple[int, int, int]]:
    shapes: dict[str, tuple[int, int, int]] = {"input": spec.input_shape}
    for p in _expand(spec):
        ins = [shapes[i] for i in p.inputs]
        c, h, w = ins[0]
        if p.kind == "conv2d":
            if c != p.in_channels:
                raise ShapeError(f"{p.name}: got {c} input channels, expected {p.in_channels}")
            out = (p.out_channels,
                   _conv_extent(h, p.kernel[0], p.stride[0], p.padding[0]),
                   _conv_extent(w, p.kernel[1], p.stride[1], p.padding[1]))
        elif p.kind == "maxpool":
            out = (c,
                   _conv_extent(h, p.kernel[0], p.stride[0], p.padding[0]),
                   _conv_extent(w, p.kernel[1], p.stride[1], p.padding[1]))
        elif p.kind == "upsample-nearest":
            out = (c, h * 2, w * 2)
        elif p.kind == "concat-skip":
            if any(s[1:] != ins[0][1:] for s in ins):
                raise ShapeError(f"{p.name}: cannot concatenate {ins}")
            out = (sum(s[0] for s in ins), h, w)
        elif p.kind == "add":
            if ins[0] != ins[1]:
                raise ShapeError(f"{p.name}: cannot add {ins[0]} and {ins[1]}")
            out = ins[0]
        else:  # batchnorm / relu / elu / sigmoid
            out = ins[0]
        if out[1] < 1 or out[2] < 1:
            raise ShapeError(f"{p.name}: output shape {out} has a degenerate extent")
        shapes[p.name] = out
    return shapes


def propagate_shapes(spec: ArchSpec) -> list[tuple[str, tuple[int, int, int]]]:
    """Output shape (C, H, W) of every top-level layer."""
    shapes = _propagate_prims(spec)
    out = []
    for layer in spec.layers:
        key = f"{layer.name}.relu2" if layer.kind == "basic-block" else layer.name
        out.append((layer.name, shapes[key]))
    return out


# ---------------------------------------------------------------------------
# inference kernels

def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
            stride: tuple[int, int], padding: tuple[int, int]) -> np.ndarray:
    cout, cin, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    oh = (x.shape[1] + 2 * ph - kh) // sh + 1
    ow = (x.shape[2] + 2 * pw - kw) // sw + 1
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (cin, oh, ow, kh, kw), (s0, s1 * sh, s2 * sw, s1, s2), writeable=False)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin * kh * kw)
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out.T.reshape(cout, oh, ow))


def _maxpool(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int],
             padding: tuple[int, int]) -> np.ndarray:
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    oh = (x.shape[1] + 2 * ph - kh) // sh + 1
    ow = (x.shape[2] + 2 * pw - kw) // sw + 1
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (x.shape[0], oh, ow, kh, kw), (s0, s1 * sh, s2 * sw, s1, s2), writeable=False)
    return win.max(axis=(3, 4))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _run_prim(p: _Prim, ins: list[np.ndarray], weights: WeightStore, dtype) -> np.ndarray:
    if p.kind == "conv2d":
        w = weights.get(f"{p.name}.weight",
                        (p.out_channels, p.in_channels, p.kernel[0], p.kernel[1])).astype(dtype)
        b = weights.get(f"{p.name}.bias", (p.out_channels,)).astype(dtype) if p.has_bias else None
        return _conv2d(ins[0], w, b, p.stride, p.padding)
    if p.kind == "batchnorm":
        c = (p.out_channels,)
        gamma = weights.get(f"{p.name}.weight", c).astype(dtype)[:, None, None]
        beta = weights.get(f"{p.name}.bias", c).astype(dtype)[:, None, None]
        mean = weights.get(f"{p.name}.running_mean", c).astype(dtype)[:, None, None]
        var = weights.get(f"{p.name}.running_var", c).astype(dtype)[:, None, None]
        return (ins[0] - mean) / np.sqrt(var + BATCHNORM_EPS) * gamma + beta
    if p.kind == "relu":
        return np.maximum(ins[0], 0)
    if p.kind == "elu":
        return _elu(ins[0])
    if p.kind == "maxpool":
        return _maxpool(ins[0], p.kernel, p.stride, p.padding)
    if p.kind == "upsample-nearest":
        return np.repeat(np.repeat(ins[0], 2, axis=1), 2, axis=2)
    if p.kind == "concat-skip":
        return np.concatenate(ins, axis=0)
    if p.kind == "add":
        return ins[0] + ins[1]
    if p.kind == "sigmoid":
        return _sigmoid(ins[0])
    raise ValueError(f"cannot execute layer kind {p.kind!r}")


def forward(spec: ArchSpec, weights: WeightStore, image: ImageBuffer,
            dtype=np.float32) -> tuple[DisparityMap, list[ImageBuffer]]:
    """Run inference; returns the normalized (0,1) map and the feature pyramid.

    Deterministic: identical inputs and weights give bitwise-identical
    outputs.  Inference runs in float32 by default; pass dtype=np.float64
    for oracle comparisons.
    """
    c, h, w = spec.input_shape
    if (image.channels, image.height, image.width) != (c, h, w):
        raise ValueError(
            f"input {image.channels}x{image.height}x{image.width} does not match "
            f"spec input shape {spec.input_shape}")
    _propagate_prims(spec)  # surfaces shape errors before touching weights
    values: dict[str, np.ndarray] = {
        "input": np.ascontiguousarray(image.data.transpose(2, 0, 1).astype(dtype))
    }
    renames: dict[str, str] = {l.name: f"{l.name}.relu2"
                               for l in spec.layers if l.kind == "basic-block"}
    for p in _expand(spec):
        values[p.name] = _run_prim(p, [values[i] for i in p.inputs], weights, dtype)
    out = values[renames.get(spec.output, spec.output)]
    if out.shape[0] != 1:
        raise ValueError(f"network output has {out.shape[0]} channels, expected 1")
    features = [ImageBuffer(values[renames.get(t, t)].transpose(1, 2, 0))
                for t in spec.feature_taps]
    return DisparityMap(out[0].astype(np.float64)), features


def stack_stereo(left: ImageBuffer, right: ImageBuffer) -> ImageBuffer:
    """6-channel network input: left image channels first, then right."""
    if left.data.shape != right.data.shape:
        raise ValueError("stereo pair shapes differ")
    return ImageBuffer(np.concatenate([left.data, right.data], axis=2))


def sigmoid_to_disparity(s: DisparityMap, min_depth: float = 0.1, max_depth: float = 100.0,
                         rig: StereoRig | None = None) -> DisparityMap:
    """Map a normalized (0,1) field to pixel disparity via inverse-depth interpolation.

    1/z runs linearly from 1/max_depth at s=0 to 1/min_depth at s=1, then
    d = baseline * fx / z.  The rig is required to fix the pixel scale.
    """
    if not 0 < min_depth < max_depth:
        raise ValueError(f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")
    if rig is None:
        raise ValueError("a stereo rig is required to convert to pixel units")
    inv_z = 1.0 / max_depth + s.values * (1.0 / min_depth - 1.0 / max_depth)
    return DisparityMap(rig.baseline_m * rig.left.fx * inv_z, s.valid)


def random_weights(spec: ArchSpec, seed: int = 0) -> WeightStore:
    """Seeded He-style initialization for every parameterized layer."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for p in _expand(spec):
        if p.kind == "conv2d":
            fan_in = p.in_channels * p.kernel[0] * p.kernel[1]
            shape = (p.out_channels, p.in_channels, p.kernel[0], p.kernel[1])
            tensors[f"{p.name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            if p.has_bias:
                tensors[f"{p.name}.bias"] = np.zeros(p.out_channels)
        elif p.kind == "batchnorm":
            tensors[f"{p.name}.weight"] = np.ones(p.out_channels)
            tensors[f"{p.name}.bias"] = np.zeros(p.out_channels)
            tensors[f"{p.name}.running_mean"] = np.zeros(p.out_channels)
            tensors[f"{p.name}.running_var"] = np.ones(p.out_channels)
    return WeightStore(tensors)
