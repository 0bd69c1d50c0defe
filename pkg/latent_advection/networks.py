"""Encoder, decoder and field-extraction networks, bundled with their configuration.

The encoder is a plain stack of same-padded convolutions, so each latent pixel
depends only on a fixed input neighbourhood. Decoder and field extractor share
one U-net topology: max-pool downsampling, resize-convolution upsampling
(bilinear x2 then convolution) and skip tensors that are resized, not cropped,
before channel concatenation.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import config
from .advection import FieldSequence, LatentState
from .models import BundleSpec, EncoderConfig, UNetConfig
from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    leaky_relu,
    max_pool2,
    resize_bilinear,
    slice_channels,
)

BUNDLE_MAGIC = b"LADVMODL"
BUNDLE_VERSION = 1
_HEADER = struct.Struct("<8sII")


class BundleFormatError(ValueError):
    """Raised when a bundle file is malformed or from another format version."""


# =================================================================================================
# LAYERS
# =================================================================================================


class Conv2d:
    """Same-padded convolution with seeded He-style uniform initialisation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        slope: float | None = None,
        dtype=None,
    ) -> None:
        dtype = dtype or config.DTYPE
        fan_in = kernel * kernel * in_channels
        gain = np.sqrt(2.0 / (1.0 + slope**2)) if slope is not None else 1.0
        bound = gain * np.sqrt(3.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(kernel, kernel, in_channels, out_channels))
        self.weight = Tensor(weight.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def receptive_field(cfg: EncoderConfig) -> int:
    """Width of the input window that can influence one latent pixel."""
    return 1 + (len(cfg.hidden_channels) + 1) * (cfg.kernel - 1)


class Encoder:
    """phi: image patch (B, H, W, C) -> latent (B, H, W, 1)."""

    def __init__(self, cfg: EncoderConfig, in_channels: int, rng: np.random.Generator, dtype=None) -> None:
        self.config = cfg
        self.in_channels = in_channels
        self.hidden: list[Conv2d] = []
        width = in_channels
        for ch in cfg.hidden_channels:
            self.hidden.append(Conv2d(width, ch, cfg.kernel, rng, slope=cfg.slope, dtype=dtype))
            width = ch
        self.head = Conv2d(width, 1, cfg.kernel, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"encoder expects {self.in_channels} channels, got {x.shape[-1]}")
        h = x
        for layer in self.hidden:
            h = leaky_relu(layer(h), self.config.slope)
        return self.head(h)

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.hidden for p in layer.parameters()]
        return params + self.head.parameters()


class UNet:
    """psi / eta: U-net mapping (B, H, W, Cin) -> (B, H, W, out_channels), H and W divisible by 8."""

    def __init__(self, cfg: UNetConfig, in_channels: int, rng: np.random.Generator, dtype=None) -> None:
        self.config = cfg
        self.in_channels = in_channels
        k, s = cfg.kernel, cfg.slope

        def conv(cin: int, cout: int) -> Conv2d:
            return Conv2d(cin, cout, k, rng, slope=s, dtype=dtype)

        self.input_layer = conv(in_channels, cfg.input_channels)
        width = cfg.input_channels

        self.down: list[list[Conv2d]] = []
        for ch in cfg.down_channels:
            stage = [conv(width, ch)] + [conv(ch, ch) for _ in range(cfg.layers_per_stage - 1)]
            self.down.append(stage)
            width = ch

        self.bottleneck = [conv(width, cfg.bottleneck_channels), conv(cfg.bottleneck_channels, cfg.bottleneck_channels)]
        width = cfg.bottleneck_channels

        # Each up stage: resize-conv, concat with the resized skip, then the remaining convs.
        # With one layer per stage the concatenated width feeds the next stage directly.
        self.up: list[list[Conv2d]] = []
        for ch, skip in zip(cfg.up_channels, reversed(cfg.down_channels)):
            stage = [conv(width, ch)]
            width = ch + skip
            for _ in range(cfg.layers_per_stage - 1):
                stage.append(conv(width, ch))
                width = ch
            self.up.append(stage)

        self.output_layer = conv(width, cfg.output_channels)
        self.head = Conv2d(cfg.output_channels, cfg.out_channels, k, rng, dtype=dtype)

    @property
    def factor(self) -> int:
        return 2 ** self.config.depth

    def check_extents(self, height: int, width: int) -> None:
        if height % self.factor or width % self.factor:
            raise ShapeError(f"U-net extents must be divisible by {self.factor}, got {height}x{width}")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"U-net expects {self.in_channels} channels, got {x.shape[-1]}")
        self.check_extents(x.shape[1], x.shape[2])
        slope = self.config.slope

        h = leaky_relu(self.input_layer(x), slope)
        skips = []
        for stage in self.down:
            for layer in stage:
                h = leaky_relu(layer(h), slope)
            skips.append(h)
            h = max_pool2(h)
        for layer in self.bottleneck:
            h = leaky_relu(layer(h), slope)
        for stage, skip in zip(self.up, reversed(skips)):
            h = resize_bilinear(h, 2 * h.shape[1], 2 * h.shape[2])
            h = leaky_relu(stage[0](h), slope)
            if skip.shape[1:3] != h.shape[1:3]:
                skip = resize_bilinear(skip, h.shape[1], h.shape[2])
            h = concat_channels([h, skip])
            for layer in stage[1:]:
                h = leaky_relu(layer(h), slope)
        h = leaky_relu(self.output_layer(h), slope)
        return self.head(h)

    def layers(self) -> list[Conv2d]:
        out = [self.input_layer]
        for stage in self.down:
            out.extend(stage)
        out.extend(self.bottleneck)
        for stage in self.up:
            out.extend(stage)
        return out + [self.output_layer, self.head]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]


class IdentityCodec:
    """Stand-in for phi or psi that passes tensors through unchanged."""

    def __call__(self, x: Tensor) -> Tensor:
        return x

    def parameters(self) -> list[Tensor]:
        return []


Codec = Union[Encoder, UNet, IdentityCodec]


# =================================================================================================
# MODEL BUNDLE
# =================================================================================================


@dataclass
class ModelBundle:
    """theta_1 (encoder), theta_2 (decoder), theta_3 (field extractor) plus their spec."""

    spec: BundleSpec
    encoder: Codec
    decoder: Codec
    field_extractor: UNet

    @classmethod
    def build(cls, spec: BundleSpec, dtype=None) -> ModelBundle:
        """Initialise all parameters from ``spec.seed``."""
        rng = np.random.default_rng(spec.seed)
        if spec.codec == "learned":
            encoder: Codec = Encoder(spec.encoder, spec.in_channels, rng, dtype=dtype)
            decoder: Codec = UNet(spec.decoder, 1, rng, dtype=dtype)
        else:
            encoder = decoder = IdentityCodec()
        field_extractor = UNet(spec.field_extractor, spec.in_channels, rng, dtype=dtype)
        bundle = cls(spec, encoder, decoder, field_extractor)
        bundle.check_shapes(spec.patch_height, spec.patch_width)
        return bundle

    # ---------------------------------------------------------------------
    # Parameters
    # ---------------------------------------------------------------------

    @property
    def frozen_fields(self) -> bool:
        return self.spec.zero_fields

    @property
    def dtype(self) -> np.dtype:
        return self.field_extractor.head.weight.dtype

    def all_parameters(self) -> list[Tensor]:
        """Every parameter in declaration order (theta_1, theta_2, theta_3)."""
        return self.encoder.parameters() + self.decoder.parameters() + self.field_extractor.parameters()

    def parameters(self) -> list[Tensor]:
        """Trainable parameters; the field extractor drops out when fields are frozen at zero."""
        if self.frozen_fields:
            return self.encoder.parameters() + self.decoder.parameters()
        return self.all_parameters()

    def zero_parameters(self) -> None:
        for p in self.all_parameters():
            p.data[...] = 0

    # ---------------------------------------------------------------------
    # Maps
    # ---------------------------------------------------------------------

    def encode(self, x: Tensor) -> LatentState:
        if x.shape[-1] != self.spec.in_channels:
            raise ShapeError(f"bundle expects {self.spec.in_channels} channels, got {x.shape[-1]}")
        return LatentState(self.encoder(x))

    def decode(self, z: LatentState) -> Tensor:
        return self.decoder(z.values)

    def extract_fields(self, x: Tensor) -> FieldSequence:
        n = self.spec.n_evolution
        if self.frozen_fields:
            b, h, w, _ = x.shape
            return FieldSequence.zeros(n, b, h, w, self.spec.dt, dtype=x.dtype)
        raw = self.field_extractor(x)
        return FieldSequence(tuple(slice_channels(raw, 2 * s, 2 * s + 2) for s in range(n)), self.spec.dt)

    def check_shapes(self, height: int, width: int) -> dict[str, tuple[int, ...]]:
        """Shape inference for a patch of the given extents, without evaluating the networks."""
        self.field_extractor.check_extents(height, width)
        if isinstance(self.decoder, UNet):
            self.decoder.check_extents(height, width)
        c, n = self.spec.in_channels, self.spec.n_evolution
        latent_c = 1 if self.spec.codec == "learned" else c
        return {
            "image": (height, width, c),
            "latent": (height, width, latent_c),
            "fields": (n, height, width, 2),
        }

    # ---------------------------------------------------------------------
    # Serialisation
    # ---------------------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        """Write magic, version, JSON spec, then little-endian float32 parameters in order.

        Parameters of any other dtype are rounded to float32 on the way out, so a
        float64 bundle does not reload bit-identically. A warning is logged when
        that happens.
        """
        path = Path(path)
        wide = sorted({str(p.dtype) for p in self.all_parameters() if p.dtype != np.float32})
        if wide:
            logging.warning("Bundle parameters are %s; %s stores them as float32", ", ".join(wide), path.name)
        spec_bytes = self.spec.model_dump_json().encode("utf-8")
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, len(spec_bytes)))
            fh.write(spec_bytes)
            for p in self.all_parameters():
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        logging.info("Saved model bundle to %s (%d parameters)", path, sum(p.size for p in self.all_parameters()))
        return path

    @classmethod
    def load(cls, path: str | Path, dtype=None) -> ModelBundle:
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise BundleFormatError(f"{path}: truncated header")
        magic, version, spec_len = _HEADER.unpack_from(raw)
        if magic != BUNDLE_MAGIC:
            raise BundleFormatError(f"{path}: not a model bundle (magic {magic!r})")
        if version != BUNDLE_VERSION:
            raise BundleFormatError(f"{path}: bundle version {version}, this build reads {BUNDLE_VERSION}")
        start = _HEADER.size + spec_len
        spec = BundleSpec.model_validate_json(raw[_HEADER.size : start])
        bundle = cls.build(spec, dtype=dtype)
        payload = np.frombuffer(raw, dtype="<f4", offset=start)
        expected = sum(p.size for p in bundle.all_parameters())
        if payload.size != expected:
            raise BundleFormatError(f"{path}: payload holds {payload.size} values, spec needs {expected}")
        offset = 0
        for p in bundle.all_parameters():
            p.data[...] = payload[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        return bundle
