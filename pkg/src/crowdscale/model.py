"""The context-aware counting network, its geometry-guided extension and
the three ablation variants.

Architecture: a 10-conv/3-pool VGG-style front-end produces base features
f_v at 1/8 resolution. For each scale j, f_v is average-pooled into a
k(j) x k(j) grid, mixed by a 1x1 conv, upsampled back (s_j), and contrast
features c_j = s_j - f_v drive sigmoid weight maps w_j. The fused feature
sum(w_j * s_j) / sum(w_j) is concatenated to f_v and decoded by six
dilation-2 3x3 convs plus a final 1x1 into a non-negative density map.

Variants:
  CAN         full model, weights from contrast features.
  ECAN        adds a single-channel front-end over the normalized
              perspective map; its features join each weight-net input.
  VGG_SIMPLE  decoder on f_v directly (no context).
  VGG_CONCAT  decoder on [f_v | s_1 .. s_S] (no weighting).
  VGG_NCONT   weights computed from s_j instead of c_j.
"""

from dataclasses import dataclass, field

import numpy as np

from . import formats
from . import tensor as T
from .errors import (ConfigurationError, DimensionError, FormatError,
                     UsageError)
from .tensor import Tensor4

VARIANTS = ("CAN", "ECAN", "VGG_SIMPLE", "VGG_CONCAT", "VGG_NCONT")

FRONTEND_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512)
FRONTEND_POOL_AFTER = (1, 3, 6)          # pool follows these layer indices
DECODER_CHANNELS = (512, 512, 512, 256, 128, 64)


@dataclass
class ModelConfig:
    variant: str = "CAN"
    scales: int = 4
    block_sizes: tuple = (1, 2, 3, 6)
    width_multiplier: float = 1.0
    seed: int = 0
    omega_single_channel: bool = False   # 1-channel broadcast weight maps
    dtype: str = "float32"               # "float64" for gradient verification

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        self.block_sizes = tuple(int(b) for b in self.block_sizes)
        if len(self.block_sizes) != self.scales:
            raise ConfigurationError(
                f"{self.scales} scales but {len(self.block_sizes)} block sizes")
        if any(b < 1 for b in self.block_sizes) or \
                any(a >= b for a, b in zip(self.block_sizes, self.block_sizes[1:])):
            raise ConfigurationError(f"block sizes must be strictly increasing >= 1, "
                                     f"got {self.block_sizes}")
        if not (0 < self.width_multiplier <= 1):
            raise ConfigurationError(f"width_multiplier must be in (0, 1], "
                                     f"got {self.width_multiplier}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64")

    def channels(self, base):
        c = int(round(base * self.width_multiplier))
        if c < 1:
            raise ConfigurationError(
                f"width_multiplier {self.width_multiplier} collapses {base} channels to zero")
        return c


@dataclass
class FeatureBundle:
    """Intermediate features of one forward pass."""
    f_v: Tensor4
    s: list = field(default_factory=list)
    c: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    f_fused: Tensor4 = None
    f_concat: Tensor4 = None
    f_g: Tensor4 = None
    weight_inputs: list = field(default_factory=list)


class ModelParams:
    """Named parameter set. Iteration order is the build order, which makes
    optimizer updates and weight files deterministic."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors          # dict name -> Tensor4, insertion-ordered

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def clone(self):
        return ModelParams(self.config,
                           {k: Tensor4(v.data.copy(), requires_grad=v.requires_grad)
                            for k, v in self.tensors.items()})


def _np_dtype(config):
    return np.float64 if config.dtype == "float64" else np.float32


def _conv_names(prefix, count):
    return [f"{prefix}.conv{i}" for i in range(count)]


def _frontend_plan(config, in_channels):
    plan = []
    c_in = in_channels
    for i, base in enumerate(FRONTEND_CHANNELS):
        c_out = config.channels(base)
        plan.append((i, c_in, c_out))
        c_in = c_out
    return plan


def _decoder_in_channels(config):
    c = config.channels(512)
    if config.variant == "VGG_SIMPLE":
        return c
    if config.variant == "VGG_CONCAT":
        return (1 + config.scales) * c
    return 2 * c


def build(config):
    """Initialize all parameters: fan-in-scaled Gaussian weights (std
    sqrt(2/fan_in)), zero biases, deterministic in the config seed."""
    rng = np.random.default_rng(config.seed)
    dtype = _np_dtype(config)
    tensors = {}

    def add_conv(name, c_in, c_out, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)
        tensors[name + ".weight"] = Tensor4(w, requires_grad=True)
        tensors[name + ".bias"] = Tensor4(np.zeros((1, c_out, 1, 1), dtype=dtype),
                                          requires_grad=True)

    for i, c_in, c_out in _frontend_plan(config, 3):
        add_conv(f"frontend.conv{i}", c_in, c_out, 3)

    c = config.channels(512)
    if config.variant != "VGG_SIMPLE":
        for j in range(config.scales):
            add_conv(f"context.scale{j}", c, c, 1)

    if config.variant in ("CAN", "ECAN", "VGG_NCONT"):
        w_out = 1 if config.omega_single_channel else c
        w_in = 2 * c if config.variant == "ECAN" else c
        for j in range(config.scales):
            add_conv(f"weights.scale{j}", w_in, w_out, 1)

    if config.variant == "ECAN":
        for i, c_in, c_out in _frontend_plan(config, 1):
            add_conv(f"geo_frontend.conv{i}", c_in, c_out, 3)
        # warm-start the geometry branch from the RGB front-end, averaging
        # the first layer over its three input channels
        for i, _, _ in _frontend_plan(config, 1):
            src_w = tensors[f"frontend.conv{i}.weight"].data
            if i == 0:
                src_w = init_single_channel_from_rgb(Tensor4(src_w)).data
            tensors[f"geo_frontend.conv{i}.weight"].data = src_w.copy()

    c_in = _decoder_in_channels(config)
    for i, base in enumerate(DECODER_CHANNELS):
        c_out = config.channels(base)
        add_conv(f"decoder.conv{i}", c_in, c_out, 3)
        c_in = c_out
    add_conv("decoder.conv6", c_in, 1, 1)

    return ModelParams(config, tensors)


def init_single_channel_from_rgb(rgb_first_layer):
    """Average a 3-input-channel first conv layer into a 1-channel one."""
    if rgb_first_layer.dims[1] != 3:
        raise DimensionError(f"expected 3 input channels, got {rgb_first_layer.dims}")
    return Tensor4(rgb_first_layer.data.mean(axis=1, keepdims=True))


def _frontend_stack(params, x, prefix):
    for i in range(len(FRONTEND_CHANNELS)):
        x = T.conv2d(x, params[f"{prefix}.conv{i}.weight"],
                     params[f"{prefix}.conv{i}.bias"], dilation=1)
        x = T.relu(x)
        if i in FRONTEND_POOL_AFTER:
            x = T.max_pool2(x)
    return x


def frontend_forward(params, image):
    """Base features f_v at 1/8 resolution."""
    n, ci, h, w = image.dims
    if ci != 3:
        raise DimensionError(f"expected 3-channel image, got {ci} channels")
    if h % 8 or w % 8:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by 8")
    return _frontend_stack(params, image, "frontend")


def geometry_forward(params, pmap_input):
    """Geometry features f_g from the normalized perspective map (as a
    (n,1,h,w) tensor scaled to the image range)."""
    if params.config.variant != "ECAN":
        raise ConfigurationError("geometry branch exists only in the ECAN variant")
    n, ci, h, w = pmap_input.dims
    if ci != 1:
        raise DimensionError(f"perspective input must have 1 channel, got {ci}")
    if h % 8 or w % 8:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by 8")
    return _frontend_stack(params, pmap_input, "geo_frontend")


def _scale_features(params, f_v, config):
    _, _, fh, fw = f_v.dims
    s = []
    for j, k in enumerate(config.block_sizes):
        pooled = T.adaptive_avg_pool(f_v, k)
        mixed = T.conv2d(pooled, params[f"context.scale{j}.weight"],
                         params[f"context.scale{j}.bias"])
        s.append(T.bilinear_upsample(mixed, fh, fw))
    return s


def geometry_weights(params, c_list, f_g):
    """ECAN weight maps from [c_j | f_g] per scale."""
    if params.config.variant != "ECAN":
        raise ConfigurationError("geometry_weights requires the ECAN variant")
    omega = []
    for j, c_j in enumerate(c_list):
        inp = T.concat_channels([c_j, f_g])
        pre = T.conv2d(inp, params[f"weights.scale{j}.weight"],
                       params[f"weights.scale{j}.bias"])
        omega.append(T.sigmoid(pre))
    return omega


def context_forward(params, f_v, f_g=None):
    """Scale-aware features, contrast features, weight maps and the fused
    contextual feature for the active variant."""
    config = params.config
    bundle = FeatureBundle(f_v=f_v, f_g=f_g)
    if config.variant == "VGG_SIMPLE":
        bundle.f_concat = f_v
        return bundle

    bundle.s = _scale_features(params, f_v, config)
    bundle.c = [T.sub(s_j, f_v) for s_j in bundle.s]

    if config.variant == "VGG_CONCAT":
        bundle.f_concat = T.concat_channels([f_v] + bundle.s)
        return bundle

    if config.variant == "ECAN":
        if f_g is None:
            raise UsageError("ECAN forward requires geometry features")
        bundle.weight_inputs = [T.concat_channels([c_j, f_g]) for c_j in bundle.c]
    elif config.variant == "VGG_NCONT":
        bundle.weight_inputs = list(bundle.s)
    else:
        bundle.weight_inputs = list(bundle.c)

    for j, w_in in enumerate(bundle.weight_inputs):
        pre = T.conv2d(w_in, params[f"weights.scale{j}.weight"],
                       params[f"weights.scale{j}.bias"])
        bundle.omega.append(T.sigmoid(pre))

    num = T.mul(bundle.s[0], bundle.omega[0])
    den = bundle.omega[0]
    for s_j, w_j in zip(bundle.s[1:], bundle.omega[1:]):
        num = T.add(num, T.mul(s_j, w_j))
        den = T.add(den, w_j)
    bundle.f_fused = T.div(num, den)
    bundle.f_concat = T.concat_channels([f_v, bundle.f_fused])
    return bundle


def decoder_forward(params, f_concat):
    """Dilated decoder producing a 1-channel non-negative density map."""
    expected = _decoder_in_channels(params.config)
    if f_concat.dims[1] != expected:
        raise ConfigurationError(f"decoder expects {expected} channels for variant "
                                 f"{params.config.variant}, got {f_concat.dims[1]}")
    x = f_concat
    for i in range(len(DECODER_CHANNELS)):
        x = T.conv2d(x, params[f"decoder.conv{i}.weight"],
                     params[f"decoder.conv{i}.bias"], dilation=2)
        x = T.relu(x)
    x = T.conv2d(x, params["decoder.conv6.weight"], params["decoder.conv6.bias"])
    return T.relu(x)


def forward(params, image, pmap_input=None, return_bundle=False):
    """Full forward pass: image (n,3,h,w) -> density (n,1,h/8,w/8)."""
    config = params.config
    if config.variant == "ECAN":
        if pmap_input is None:
            raise UsageError("ECAN requires a perspective-map input")
        f_g = geometry_forward(params, pmap_input)
    else:
        f_g = None
    f_v = frontend_forward(params, image)
    bundle = context_forward(params, f_v, f_g=f_g)
    density = decoder_forward(params, bundle.f_concat)
    if return_bundle:
        return density, bundle
    return density


def save_params(params, path):
    """Write all parameters as CANW records, in build order."""
    formats.write_canw(path, {name: t.data for name, t in params.items()})


def load_params(path, config, partial=False):
    """Build a model from `config` and merge records from a CANW file.

    With partial=False every model parameter must be present in the file;
    with partial=True present records are merged and the rest keep their
    initialization (e.g. loading a converted front-end only).
    """
    records = formats.read_canw(path)
    params = build(config)
    dtype = _np_dtype(config)
    for name, t in params.items():
        if name not in records:
            if partial:
                continue
            raise FormatError(f"weight file {path} is missing record {name!r}")
        rec = records[name]
        if rec.shape != t.data.shape:
            raise FormatError(f"record {name!r} has shape {rec.shape}, "
                              f"model expects {t.data.shape}")
        t.data = np.ascontiguousarray(rec.astype(dtype))
    return params
