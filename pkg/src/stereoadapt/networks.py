"""The five trainable networks: two translation generators, two patch
discriminators, and the multi-scale stereo matcher.

All public forward interfaces are unbatched ([3, H, W] images); the batch
dimension is added internally.  A single handle's parameters must not be
mutated during a forward pass (the training engine serializes updates).
"""

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ContractViolationError, NonFiniteValueError
from .geometry import DisparityMap, FeatureMap
from .kernels import correlation as _correlation

CHECKPOINT_VERSION = 1

# tap name -> downsampling scale of the generator feature it exposes
GENERATOR_TAP_SCALES = {"down1": 2, "down2": 4, "res": 4, "up1": 2, "up2": 1}


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 16
    num_residual_blocks: int = 4
    tap_layers: tuple = ("down1", "down2", "res", "up1", "up2")
    accepts_noise: bool = False

    def __post_init__(self):
        if not self.tap_layers:
            raise ContractViolationError("tap_layers must be non-empty")
        unknown = [t for t in self.tap_layers if t not in GENERATOR_TAP_SCALES]
        if unknown:
            raise ContractViolationError(f"unknown tap layers: {unknown}")

    @property
    def tap_scales(self):
        return tuple(GENERATOR_TAP_SCALES[t] for t in self.tap_layers)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 16


@dataclass(frozen=True)
class MatcherSpec:
    base_channels: int = 16
    max_displacement: int = 16
    # pyramid scales, finest first; fixed by the decoder topology
    pyramid_scales: tuple = (1, 2, 4, 8, 16)


@dataclass
class NoiseMap:
    """Zero-mean unit-variance Gaussian map [1, H, W], reproducible from seed."""

    data: torch.Tensor
    seed: int

    def __post_init__(self):
        if self.data.dim() != 3 or self.data.shape[0] != 1:
            raise ContractViolationError(f"noise must be [1,H,W], got {tuple(self.data.shape)}")


def make_noise(seed: int, height: int, width: int) -> NoiseMap:
    rng = np.random.default_rng(seed)
    data = torch.from_numpy(rng.standard_normal((1, height, width)).astype(np.float32))
    return NoiseMap(data, seed)


@dataclass
class TranslationOutput:
    image: torch.Tensor  # [3, H, W] in [-1, 1]
    features: list  # FeatureMap per tap layer


@dataclass
class StereoOutput:
    disparities: list  # DisparityMap per pyramid scale, full resolution first
    correlation_features: list  # FeatureMap per aggregation tap

    def at_scale(self, scale: int) -> DisparityMap:
        for d in self.disparities:
            if d.scale == scale:
                return d
        raise KeyError(scale)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


def _conv_norm_relu(in_ch, out_ch, kernel, stride=1, pad=0):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=pad),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class TranslationGenerator(nn.Module):
    """Encoder / residual / decoder image translator with named feature taps."""

    STRIDE = 4

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        in_ch = 4 if spec.accepts_noise else 3
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_ch, c, 7),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
        )
        self.down1 = _conv_norm_relu(c, 2 * c, 3, stride=2, pad=1)
        self.down2 = _conv_norm_relu(2 * c, 4 * c, 3, stride=2, pad=1)
        self.res = nn.Sequential(*[ResidualBlock(4 * c) for _ in range(spec.num_residual_blocks)])
        self.up1 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * c, 2 * c, 3, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
        )
        self.up2 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * c, c, 3, padding=1),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, 3, 7), nn.Tanh())
        self.apply(init_weights)

    def forward(self, image: torch.Tensor, noise: NoiseMap = None) -> TranslationOutput:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ContractViolationError(f"expected [3,H,W] image, got {tuple(image.shape)}")
        _, h, w = image.shape
        if h % self.STRIDE or w % self.STRIDE:
            raise ContractViolationError(f"image size {h}x{w} not divisible by stride {self.STRIDE}")
        if self.spec.accepts_noise and noise is None:
            raise ContractViolationError("this generator requires a noise map")
        if not self.spec.accepts_noise and noise is not None:
            raise ContractViolationError("this generator does not accept noise")
        x = image
        if noise is not None:
            if noise.data.shape[1:] != image.shape[1:]:
                raise ContractViolationError("noise spatial size must match the input image")
            x = torch.cat([image, noise.data.to(image.dtype)], dim=0)
        x = x.unsqueeze(0)
        stage_out = {}
        x = self.stem(x)
        for name in ("down1", "down2", "res", "up1", "up2"):
            x = getattr(self, name)(x)
            stage_out[name] = x
        out = self.head(x).squeeze(0)
        feats = [
            FeatureMap(stage_out[t].squeeze(0), GENERATOR_TAP_SCALES[t])
            for t in self.spec.tap_layers
        ]
        return TranslationOutput(out, feats)


class PatchDiscriminator(nn.Module):
    """Convolutional real/fake classifier emitting one logit per local patch."""

    STRIDE = 4

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        self.model = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=1, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 1, 4, stride=1, padding=1),
        )
        self.apply(init_weights)

    def logit_grid_shape(self, height: int, width: int):
        # two stride-2 blocks then two stride-1 4x4 convs with padding 1
        return height // 4 - 2, width // 4 - 2

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ContractViolationError(f"expected [3,H,W] image, got {tuple(image.shape)}")
        if not bool(torch.isfinite(image.detach()).all()):
            raise NonFiniteValueError("discriminator input must be finite")
        return self.model(image.unsqueeze(0)).squeeze(0).squeeze(0)


def _conv_lrelu(in_ch, out_ch, kernel, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2),
        nn.LeakyReLU(0.1, inplace=True),
    )


class StereoMatcher(nn.Module):
    """Correlation-based disparity network with a 5-level output pyramid.

    Shared encoder on each view, 1-D correlation at 1/4 resolution, a stack
    of correlation-aggregation blocks (whose outputs are the exposed
    correlation features), and a decoder predicting non-negative disparity
    at every scale.  No normalization layers: photometric statistics of the
    inputs must reach the correlation.
    """

    STRIDE = 16

    def __init__(self, spec: MatcherSpec):
        super().__init__()
        self.spec = spec
        m = spec.base_channels
        d = spec.max_displacement
        self.enc1 = _conv_lrelu(3, m, 7, stride=2)
        self.enc2 = _conv_lrelu(m, 2 * m, 5, stride=2)
        self.redir = _conv_lrelu(2 * m, m, 1)
        self.agg1 = _conv_lrelu(d + 1 + m, 2 * m, 3)
        self.agg2 = _conv_lrelu(2 * m, 4 * m, 3, stride=2)
        self.agg3 = _conv_lrelu(4 * m, 8 * m, 3, stride=2)
        self.pred16 = nn.Conv2d(8 * m, 1, 3, padding=1)
        self.deconv16 = nn.ConvTranspose2d(8 * m, 4 * m, 4, stride=2, padding=1)
        self.iconv8 = _conv_lrelu(8 * m + 1, 4 * m, 3)
        self.pred8 = nn.Conv2d(4 * m, 1, 3, padding=1)
        self.deconv8 = nn.ConvTranspose2d(4 * m, 2 * m, 4, stride=2, padding=1)
        self.iconv4 = _conv_lrelu(4 * m + 1, 2 * m, 3)
        self.pred4 = nn.Conv2d(2 * m, 1, 3, padding=1)
        self.deconv4 = nn.ConvTranspose2d(2 * m, m, 4, stride=2, padding=1)
        self.iconv2 = _conv_lrelu(2 * m + 1, m, 3)
        self.pred2 = nn.Conv2d(m, 1, 3, padding=1)
        self.deconv2 = nn.ConvTranspose2d(m, m // 2, 4, stride=2, padding=1)
        self.iconv1 = _conv_lrelu(m // 2 + 4, m // 2, 3)
        self.pred1 = nn.Conv2d(m // 2, 1, 3, padding=1)
        # no normalization layers anywhere, so the DCGAN-style 0.02 init
        # would shrink activations geometrically; use fan-in scaling instead
        self.apply(init_weights_kaiming)

    @staticmethod
    def _up_disp(d):
        # doubling the resolution doubles the per-pixel shift
        return F.interpolate(d, scale_factor=2, mode="bilinear", align_corners=False) * 2.0

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> StereoOutput:
        if left.shape != right.shape:
            raise ContractViolationError(
                f"left {tuple(left.shape)} vs right {tuple(right.shape)}"
            )
        if left.dim() != 3 or left.shape[0] != 3:
            raise ContractViolationError(f"expected [3,H,W] images, got {tuple(left.shape)}")
        _, h, w = left.shape
        if h % self.STRIDE or w % self.STRIDE:
            raise ContractViolationError(f"image size {h}x{w} not divisible by stride {self.STRIDE}")

        l1 = self.enc1(left.unsqueeze(0))
        l2 = self.enc2(l1)
        r2 = self.enc2(self.enc1(right.unsqueeze(0)))
        corr = _correlation(l2.squeeze(0), r2.squeeze(0), self.spec.max_displacement).unsqueeze(0)
        a1 = self.agg1(torch.cat([corr, self.redir(l2)], dim=1))
        a2 = self.agg2(a1)
        a3 = self.agg3(a2)

        d16 = F.softplus(self.pred16(a3))
        x8 = torch.cat([self.deconv16(a3), a2, self._up_disp(d16)], dim=1)
        x8 = self.iconv8(x8)
        d8 = F.softplus(self.pred8(x8))
        x4 = torch.cat([self.deconv8(x8), a1, self._up_disp(d8)], dim=1)
        x4 = self.iconv4(x4)
        d4 = F.softplus(self.pred4(x4))
        x2 = torch.cat([self.deconv4(x4), l1, self._up_disp(d4)], dim=1)
        x2 = self.iconv2(x2)
        d2 = F.softplus(self.pred2(x2))
        x1 = torch.cat([self.deconv2(x2), left.unsqueeze(0), self._up_disp(d2)], dim=1)
        x1 = self.iconv1(x1)
        d1 = F.softplus(self.pred1(x1))

        disparities = [
            DisparityMap(d.squeeze(0).squeeze(0), s)
            for d, s in zip((d1, d2, d4, d8, d16), self.spec.pyramid_scales)
        ]
        feats = [FeatureMap(a.squeeze(0), s) for a, s in zip((a1, a2, a3), (4, 8, 16))]
        return StereoOutput(disparities, feats)


def init_weights(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def init_weights_kaiming(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_normal_(module.weight, a=0.1, mode="fan_in", nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


_NET_CLASSES = {
    "generator": (TranslationGenerator, GeneratorSpec),
    "discriminator": (PatchDiscriminator, DiscriminatorSpec),
    "matcher": (StereoMatcher, MatcherSpec),
}


def net_kind(net: nn.Module) -> str:
    for kind, (cls, _) in _NET_CLASSES.items():
        if isinstance(net, cls):
            return kind
    raise ContractViolationError(f"unknown network type {type(net).__name__}")


def save_net(net: nn.Module, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": net_kind(net),
        "spec": asdict(net.spec),
        "state": net.state_dict(),
    }
    torch.save(payload, path)


def load_net(path, expect_kind: str = None) -> nn.Module:
    """Rebuild a network from a self-describing checkpoint file."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a network checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']} != {CHECKPOINT_VERSION}"
        )
    kind = payload["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path} holds a {kind}, expected a {expect_kind}")
    cls, spec_cls = _NET_CLASSES[kind]
    spec_dict = dict(payload["spec"])
    for key, value in spec_dict.items():
        if isinstance(value, list):
            spec_dict[key] = tuple(value)
    net = cls(spec_cls(**spec_dict))
    net.load_state_dict(payload["state"])
    return net


def parameter_fingerprint(net: nn.Module) -> str:
    """Stable digest of every parameter value; used to assert that a training
    sub-step touched only its own network group."""
    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
