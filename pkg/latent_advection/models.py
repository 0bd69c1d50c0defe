"""Pydantic models for the latent_advection application."""

from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# =================================================================================================
# NETWORK CONFIGURATION
# =================================================================================================


def _check_widths(widths: List[int]) -> List[int]:
    if any(c < 1 for c in widths):
        raise ValueError(f"channel counts must be >= 1, got {widths}")
    return widths


def _check_kernel(kernel: int) -> int:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel extent must be odd and positive, got {kernel}")
    return kernel


class EncoderConfig(BaseModel):
    """Stack of same-padded convolutions ending in a single-channel latent."""

    model_config = ConfigDict(extra="forbid")

    hidden_channels: List[int] = Field(min_length=1)
    kernel: int = 3
    slope: float = Field(0.2, ge=0.0, lt=1.0)

    @field_validator("hidden_channels")
    @classmethod
    def check_widths(cls, v: List[int]) -> List[int]:
        return _check_widths(v)

    @field_validator("kernel")
    @classmethod
    def check_kernel(cls, v: int) -> int:
        return _check_kernel(v)


class UNetConfig(BaseModel):
    """Three-stage U-net with resize-convolution upsampling and resize-concatenation skips."""

    model_config = ConfigDict(extra="forbid")

    input_channels: int = Field(ge=1)
    down_channels: List[int] = Field(min_length=3, max_length=3)
    bottleneck_channels: int = Field(ge=1)
    output_channels: int = Field(ge=1)
    out_channels: int = Field(1, ge=1)
    kernel: int = 3
    slope: float = Field(0.2, ge=0.0, lt=1.0)
    layers_per_stage: int = Field(2, ge=1)

    @field_validator("down_channels")
    @classmethod
    def check_widths(cls, v: List[int]) -> List[int]:
        return _check_widths(v)

    @field_validator("kernel")
    @classmethod
    def check_kernel(cls, v: int) -> int:
        return _check_kernel(v)

    @property
    def up_channels(self) -> List[int]:
        """Up stages mirror the down stages."""
        return list(reversed(self.down_channels))

    @property
    def depth(self) -> int:
        return len(self.down_channels)


class BundleSpec(BaseModel):
    """Everything needed to rebuild the three networks of a model bundle."""

    model_config = ConfigDict(extra="forbid")

    in_channels: int = Field(ge=1)
    n_evolution: int = Field(ge=1)
    dt: float = Field(gt=0.0)
    patch_height: int = Field(ge=8)
    patch_width: int = Field(ge=8)
    codec: Literal["learned", "identity"] = "learned"
    encoder: Optional[EncoderConfig] = None
    decoder: Optional[UNetConfig] = None
    field_extractor: UNetConfig
    zero_fields: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self) -> BundleSpec:
        if self.codec == "learned" and (self.encoder is None or self.decoder is None):
            raise ValueError("learned codecs need both encoder and decoder configs")
        if self.decoder is not None and self.decoder.out_channels != self.in_channels:
            raise ValueError(
                f"decoder emits {self.decoder.out_channels} channels but images have {self.in_channels}"
            )
        if self.field_extractor.out_channels != 2 * self.n_evolution:
            raise ValueError(
                f"field extractor must emit 2*N = {2 * self.n_evolution} channels, "
                f"got {self.field_extractor.out_channels}"
            )
        for extent in (self.patch_height, self.patch_width):
            if extent % 8:
                raise ValueError(f"patch extents must be divisible by 8, got {extent}")
        return self


# =================================================================================================
# TRAINING CONFIGURATION
# =================================================================================================


class LossWeights(BaseModel):
    """Weights of the auxiliary loss terms; the dynamics term has weight 1."""

    ae: float = Field(1.0, ge=0.0)
    magnitude: float = Field(0.01, ge=0.0)
    smooth: float = Field(0.01, ge=0.0)


class OptimizerSettings(BaseModel):
    """Adam hyperparameters with a stepwise exponential rate decay."""

    alpha: float = Field(1e-4, gt=0.0)
    gamma: float = Field(0.8, gt=0.0, le=1.0)
    decay_interval: int = Field(10000, ge=1)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)


class TrainConfig(BaseModel):
    """Flat training configuration; keys without defaults must appear in the file.

    Descriptions quote the values of the example1 preset.
    """

    model_config = ConfigDict(extra="forbid")

    encoder_hidden: List[int] = Field(description="encoder hidden widths [32, 64, 128, 64, 32, 16, 8]")
    decoder_input: int = Field(ge=1, description="decoder input layer width 16")
    decoder_down: List[int] = Field(min_length=3, max_length=3, description="decoder down stages [16, 32, 64]")
    decoder_bottleneck: int = Field(ge=1, description="decoder bottleneck width 128")
    decoder_output: int = Field(ge=1, description="decoder output layer width 16")
    field_input: int = Field(ge=1, description="field extractor input layer width 16")
    field_down: List[int] = Field(min_length=3, max_length=3, description="field extractor down stages [16, 32, 64]")
    field_bottleneck: int = Field(ge=1, description="field extractor bottleneck width 128")
    field_output: int = Field(ge=1, description="field extractor output layer width 16")
    n_evolution: int = Field(ge=1, description="evolution steps N 10")
    stride_h: int = Field(ge=1, description="patch scan stride S_H 1")
    stride_w: int = Field(ge=1, description="patch scan stride S_W 1")
    lambda_ae: float = Field(ge=0.0, description="auto-encoder weight 1.0")
    lambda_magnitude: float = Field(ge=0.0, description="field magnitude weight 0.01")
    lambda_smooth: float = Field(ge=0.0, description="field smoothness weight 0.01")
    alpha: float = Field(gt=0.0, description="initial learning rate 1e-4")
    gamma: float = Field(gt=0.0, le=1.0, description="rate decay per interval 0.8")

    batch_size: int = Field(16, ge=1, description="patch pairs per iteration 16")
    iterations: int = Field(30000, ge=1, description="training iterations 30000")
    seed: int = Field(0, description="seed for initialisation and shuffling 0")
    dt: float = Field(0.1, gt=0.0, description="time step 0.1")
    patch_height: int = Field(256, ge=8, description="patch height 256")
    patch_width: int = Field(256, ge=8, description="patch width 256")
    encoder_kernel: int = Field(3, description="encoder kernel 3")
    decoder_kernel: int = Field(3, description="decoder kernel 3")
    field_kernel: int = Field(5, description="field extractor kernel 5")
    leaky_slope: float = Field(0.2, ge=0.0, lt=1.0, description="leaky ReLU slope 0.2")
    beta1: float = Field(0.9, description="Adam beta1 0.9")
    beta2: float = Field(0.999, description="Adam beta2 0.999")
    epsilon: float = Field(1e-8, description="Adam epsilon 1e-8")
    decay_interval: int = Field(10000, ge=1, description="iterations per decay 10000")
    log_every: int = Field(100, ge=1, description="iterations between metrics rows 100")
    zero_fields: bool = Field(False, description="clamp the field extractor to zero fields (ablation) false")

    def loss_weights(self) -> LossWeights:
        return LossWeights(ae=self.lambda_ae, magnitude=self.lambda_magnitude, smooth=self.lambda_smooth)

    def optimizer_settings(self) -> OptimizerSettings:
        return OptimizerSettings(
            alpha=self.alpha,
            gamma=self.gamma,
            decay_interval=self.decay_interval,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
        )

    def field_config(self) -> UNetConfig:
        return UNetConfig(
            input_channels=self.field_input,
            down_channels=self.field_down,
            bottleneck_channels=self.field_bottleneck,
            output_channels=self.field_output,
            out_channels=2 * self.n_evolution,
            kernel=self.field_kernel,
            slope=self.leaky_slope,
        )

    def bundle_spec(self, in_channels: int, codec: Literal["learned", "identity"] = "learned") -> BundleSpec:
        encoder = decoder = None
        if codec == "learned":
            encoder = EncoderConfig(
                hidden_channels=self.encoder_hidden, kernel=self.encoder_kernel, slope=self.leaky_slope
            )
            decoder = UNetConfig(
                input_channels=self.decoder_input,
                down_channels=self.decoder_down,
                bottleneck_channels=self.decoder_bottleneck,
                output_channels=self.decoder_output,
                out_channels=in_channels,
                kernel=self.decoder_kernel,
                slope=self.leaky_slope,
            )
        return BundleSpec(
            in_channels=in_channels,
            n_evolution=self.n_evolution,
            dt=self.dt,
            patch_height=self.patch_height,
            patch_width=self.patch_width,
            codec=codec,
            encoder=encoder,
            decoder=decoder,
            field_extractor=self.field_config(),
            zero_fields=self.zero_fields,
            seed=self.seed,
        )


class MetricsRow(BaseModel):
    """One row of the training metrics log."""

    iter: int
    loss_total: float
    loss_dyn: float
    loss_ae: float
    loss_mag: float
    loss_smooth: float
    lr: float


# =================================================================================================
# DATA DESCRIPTIONS
# =================================================================================================


class DatasetManifest(BaseModel):
    """Image pair description: one file per channel per endpoint."""

    model_config = ConfigDict(extra="forbid")

    name: str = "dataset"
    x0: List[str] = Field(min_length=1)
    x1: List[str] = Field(min_length=1)
    pixel_scale: Optional[float] = None

    @model_validator(mode="after")
    def _same_channels(self) -> DatasetManifest:
        if len(self.x0) != len(self.x1):
            raise ValueError(f"x0 lists {len(self.x0)} channel files but x1 lists {len(self.x1)}")
        return self


class SynthRequest(BaseModel):
    """Parameters of a synthetic ground-truth scene."""

    kind: Literal["translation", "rotation", "source-sink"]
    height: int = Field(ge=2)
    width: int = Field(ge=2)
    n_steps: int = Field(ge=1)
    dt: float = Field(0.1, gt=0.0)
    seed: int = 0
    max_shift: float = Field(2.0, ge=0.0, le=2.0)
