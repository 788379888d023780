"""The two-input fusion network: shared feature extraction, unity fusion
attention, 1x1 feature fusion and a four-layer reconstruction head.

Layer plan (all stride 1, "same" padding):

=========  ======  =====  ======  ==========
layer      kernel  in     out     activation
=========  ======  =====  ======  ==========
feb1       3       3      64      LeakyReLU
feb2-7     3       64     64      LeakyReLU
spatial    7       2      1       none
ffb        1       128    64      none
icb1-3     3       64     64      LeakyReLU
icb4       3       64     3       sigmoid
=========  ======  =====  ======  ==========
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

FEATURES = 64
ABLATION_MODES = ("UFA", "NO-SA", "NO-CA", "NO-UFA")
INIT_SCHEME = "kaiming-normal-fan-in/zero-bias"


def layer_plan():
    """(name, out_channels, in_channels, kernel) for every conv, in forward order."""
    plan = [("feb1", FEATURES, 3, 3)]
    plan += [(f"feb{i}", FEATURES, FEATURES, 3) for i in range(2, 8)]
    plan += [("spatial", 1, 2, 7), ("ffb", FEATURES, 2 * FEATURES, 1)]
    plan += [(f"icb{i}", FEATURES, FEATURES, 3) for i in range(1, 4)]
    plan += [("icb4", 3, FEATURES, 3)]
    return plan


FEB_LAYERS = [f"feb{i}" for i in range(1, 8)]
ICB_LAYERS = [f"icb{i}" for i in range(1, 5)]


@dataclass
class AttentionMaps:
    channel_maps: list  # K tensors (N, 64, 1, 1)
    spatial_maps: list  # K tensors (N, 1, H, W); empty when spatial attention is disabled


class FusionNetwork:
    """Parameter set plus ablation mode.

    ``params`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to Tensors.
    """

    def __init__(self, params, ablation="UFA", leaky_slope=T.LEAKY_SLOPE, init_scheme=INIT_SCHEME, seed=None):
        if ablation not in ABLATION_MODES:
            raise ValueError(f"ablation must be one of {ABLATION_MODES}, got {ablation!r}")
        for name, o, i, k in layer_plan():
            w, b = params.get(f"{name}.weight"), params.get(f"{name}.bias")
            if w is None or b is None:
                raise KeyError(f"missing parameters for layer {name}")
            if w.shape != (o, i, k, k) or b.data.size != o:
                raise ShapeError(f"{name}: expected kernel {(o, i, k, k)}, got {w.shape}")
        self.params = params
        self.ablation = ablation
        self.leaky_slope = leaky_slope
        self.init_scheme = init_scheme
        self.seed = seed

    @classmethod
    def initialize(cls, seed=0, ablation="UFA", leaky_slope=T.LEAKY_SLOPE, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = {}
        for name, o, i, k in layer_plan():
            fan_in = i * k * k
            if name in FEB_LAYERS or name in ICB_LAYERS[:3]:
                gain = np.sqrt(2.0 / (1.0 + leaky_slope ** 2))
            else:
                gain = 1.0
            w = rng.standard_normal((o, i, k, k)) * (gain / np.sqrt(fan_in))
            params[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True, dtype=dtype)
            params[f"{name}.bias"] = Tensor(np.zeros((1, o, 1, 1), dtype=dtype), requires_grad=True, dtype=dtype)
        return cls(params, ablation=ablation, leaky_slope=leaky_slope, seed=seed)

    def astype(self, dtype):
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype) for k, v in self.params.items()}
        return FusionNetwork(params, self.ablation, self.leaky_slope, self.init_scheme, self.seed)

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["feb1.weight"].dtype

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, images):
        return forward(images, self)

    def conv(self, name, x):
        w = self.params[f"{name}.weight"]
        return T.conv2d(x, w, self.params[f"{name}.bias"], padding=T.same_padding(w.shape[2]))


def _as_tensor(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def extract_features(image, net):
    """FEB1-7, each conv + LeakyReLU: (N, 3, H, W) -> (N, 64, H, W)."""
    image = _as_tensor(image, net.dtype)
    if image.shape[1] != 3:
        raise ShapeError(f"feature extraction expects 3 input channels, got {image.shape[1]}")
    x = image
    for name in FEB_LAYERS:
        x = T.leaky_relu(net.conv(name, x), net.leaky_slope)
    return x


def channel_attention(features):
    """Global average pool each branch, then softmax across branches."""
    if len(features) < 2:
        raise ValueError("channel attention needs at least two feature maps")
    return T.softmax_over_set([T.global_avg_pool(f) for f in features])


def spatial_attention(features, weight, bias=None):
    """Channel avg/max pool -> shared 7x7 conv -> softmax across branches."""
    if len(features) < 2:
        raise ValueError("spatial attention needs at least two feature maps")
    pad = T.same_padding(weight.shape[2])
    logits = []
    for f in features:
        pooled = T.concat_channels([T.channel_pool(f, "avg"), T.channel_pool(f, "max")])
        logits.append(T.conv2d(pooled, weight, bias, padding=pad))
    return T.softmax_over_set(logits)


def _attend(features, net):
    mode = net.ablation
    channel_maps, spatial_maps = [], []
    if mode in ("UFA", "NO-SA"):
        channel_maps = channel_attention(features)
        features = [T.mul(m, f) for m, f in zip(channel_maps, features)]
    if mode in ("UFA", "NO-CA"):
        spatial_maps = spatial_attention(features, net.params["spatial.weight"], net.params["spatial.bias"])
        features = [T.mul(m, f) for m, f in zip(spatial_maps, features)]
    return features, AttentionMaps(channel_maps, spatial_maps)


def ufa_fuse(features, net, _maps=None):
    """Fuse K=2 feature maps into one 64-channel map per the network's ablation mode."""
    features = list(features)
    expected_in = net.params["ffb.weight"].shape[1]
    if len(features) * FEATURES != expected_in:
        raise ValueError(f"the fusion block takes {expected_in // FEATURES} inputs, got {len(features)}")
    for f in features[1:]:
        if f.shape != features[0].shape:
            raise ShapeError(f"branch shapes differ: {features[0].shape} vs {f.shape}")
    if net.ablation == "NO-UFA":
        attended, maps = features, AttentionMaps([], [])
    else:
        attended, maps = _attend(features, net)
    if _maps is not None:
        _maps.append(maps)
    return net.conv("ffb", T.concat_channels(attended))


def reconstruct(fused, net):
    """ICB1-3 conv + LeakyReLU, ICB4 conv + sigmoid: (N, 64, H, W) -> (N, 3, H, W)."""
    if fused.shape[1] != FEATURES:
        raise ShapeError(f"reconstruction expects {FEATURES} channels, got {fused.shape[1]}")
    x = fused
    for name in ICB_LAYERS[:3]:
        x = T.leaky_relu(net.conv(name, x), net.leaky_slope)
    return T.sigmoid(net.conv("icb4", x))


def _forward(images, net, maps=None):
    images = [_as_tensor(im, net.dtype) for im in images]
    if len(images) != 2:
        raise ValueError(f"the network fuses exactly two images, got {len(images)}")
    if images[0].shape != images[1].shape:
        raise ShapeError(f"input images differ in shape: {images[0].shape} vs {images[1].shape}")
    n = images[0].shape[0]
    # shared weights: run both branches as one batch
    feats = T.split_batch(extract_features(T.concat_batch(images), net), [n] * len(images))
    return reconstruct(ufa_fuse(feats, net, maps), net)


def forward(images, net):
    """Fuse two (N, 3, H, W) images in [0, 1] into one (N, 3, H, W) image."""
    return _forward(images, net)


def dump_attention(images, net):
    """Run a forward pass and return the attention maps it computed."""
    maps = []
    _forward(images, net, maps)
    return maps[0]
