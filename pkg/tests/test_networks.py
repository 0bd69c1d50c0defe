import logging

import numpy as np
import pytest
from pydantic import ValidationError

from latent_advection.checks import toy_spec
from latent_advection.models import BundleSpec, EncoderConfig, UNetConfig
from latent_advection.networks import (
    BUNDLE_MAGIC,
    BundleFormatError,
    Encoder,
    IdentityCodec,
    ModelBundle,
    UNet,
    receptive_field,
)
from latent_advection.tensor import ShapeError, Tensor, conv2d, resize_bilinear


def identity_spec(zero_fields=False, n_steps=2):
    return BundleSpec(
        in_channels=1,
        n_evolution=n_steps,
        dt=0.1,
        patch_height=8,
        patch_width=8,
        codec="identity",
        field_extractor=UNetConfig(
            input_channels=4, down_channels=[4, 4, 4], bottleneck_channels=4, output_channels=4, out_channels=2 * n_steps
        ),
        zero_fields=zero_fields,
    )


def test_receptive_field_of_eight_layer_encoder():
    assert receptive_field(EncoderConfig(hidden_channels=[32, 64, 128, 64, 32, 16, 8])) == 17


def test_encoder_is_local(rng):
    encoder = Encoder(EncoderConfig(hidden_channels=[4, 4]), 1, rng, dtype=np.float64)
    x = rng.normal(size=(1, 16, 16, 1))
    base = encoder(Tensor(x)).numpy()
    x[0, 0, 0, 0] += 1.0
    moved = encoder(Tensor(x)).numpy()
    # three layers of 3x3 reach three pixels out
    np.testing.assert_array_equal(moved[0, 4:, :], base[0, 4:, :])
    np.testing.assert_array_equal(moved[0, :, 4:], base[0, :, 4:])
    assert not np.array_equal(moved[0, :4, :4], base[0, :4, :4])


def test_encoder_output_shape(rng):
    encoder = Encoder(EncoderConfig(hidden_channels=[4, 8]), 3, rng)
    assert encoder(Tensor(np.zeros((2, 8, 8, 3)))).shape == (2, 8, 8, 1)
    with pytest.raises(ShapeError):
        encoder(Tensor(np.zeros((2, 8, 8, 1))))


def test_unet_shape_contract(rng):
    cfg = UNetConfig(input_channels=4, down_channels=[4, 8, 8], bottleneck_channels=8, output_channels=4, out_channels=6)
    net = UNet(cfg, 2, rng)
    assert net(Tensor(np.zeros((1, 16, 24, 2)))).shape == (1, 16, 24, 6)
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 12, 16, 2))))


def test_unet_rejects_even_kernel():
    with pytest.raises(ValidationError):
        UNetConfig(input_channels=4, down_channels=[4, 8, 8], bottleneck_channels=8, output_channels=4, kernel=4)


def test_bundle_spec_checks_field_channels():
    spec = toy_spec(n_steps=3)
    data = spec.model_dump()
    data["field_extractor"]["out_channels"] = 4
    with pytest.raises(ValidationError):
        BundleSpec(**data)


def test_bundle_spec_needs_divisible_patch():
    data = toy_spec().model_dump()
    data["patch_height"] = 12
    with pytest.raises(ValidationError):
        BundleSpec(**data)


def test_build_is_seeded():
    a = ModelBundle.build(toy_spec(seed=3), dtype=np.float64)
    b = ModelBundle.build(toy_spec(seed=3), dtype=np.float64)
    c = ModelBundle.build(toy_spec(seed=4), dtype=np.float64)
    for p, q in zip(a.all_parameters(), b.all_parameters()):
        np.testing.assert_array_equal(p.numpy(), q.numpy())
    assert not np.array_equal(a.all_parameters()[0].numpy(), c.all_parameters()[0].numpy())


def test_biases_start_at_zero(toy_bundle):
    assert not np.any(toy_bundle.field_extractor.head.bias.numpy())


def test_bundle_maps_have_documented_shapes(toy_bundle, rng):
    x = Tensor(rng.normal(size=(2, 16, 16, 1)))
    z = toy_bundle.encode(x)
    fields = toy_bundle.extract_fields(x)
    assert z.shape == (2, 16, 16, 1)
    assert len(fields) == 3
    assert fields[0].shape == (2, 16, 16, 2)
    assert toy_bundle.decode(z).shape == (2, 16, 16, 1)
    assert toy_bundle.check_shapes(16, 16) == {
        "image": (16, 16, 1),
        "latent": (16, 16, 1),
        "fields": (3, 16, 16, 2),
    }


def test_check_shapes_rejects_bad_extents(toy_bundle):
    with pytest.raises(ShapeError):
        toy_bundle.check_shapes(20, 16)


def test_encode_rejects_wrong_channels(toy_bundle):
    with pytest.raises(ShapeError):
        toy_bundle.encode(Tensor(np.zeros((1, 16, 16, 2))))


def test_identity_codec_passes_through(rng):
    bundle = ModelBundle.build(identity_spec(), dtype=np.float64)
    assert isinstance(bundle.encoder, IdentityCodec)
    x = Tensor(rng.normal(size=(1, 8, 8, 1)))
    np.testing.assert_array_equal(bundle.decode(bundle.encode(x)).numpy(), x.numpy())
    assert bundle.parameters() == bundle.field_extractor.parameters()


def test_frozen_fields_drop_field_parameters(rng):
    bundle = ModelBundle.build(toy_spec().model_copy(update={"zero_fields": True}), dtype=np.float64)
    assert len(bundle.parameters()) == len(bundle.encoder.parameters()) + len(bundle.decoder.parameters())
    fields = bundle.extract_fields(Tensor(rng.normal(size=(1, 16, 16, 1))))
    assert not np.any(fields.as_array())


def test_save_and_load(tmp_path, toy_bundle):
    path = toy_bundle.save(tmp_path / "model.bin")
    assert path.read_bytes()[:8] == BUNDLE_MAGIC
    loaded = ModelBundle.load(path, dtype=np.float64)
    assert loaded.spec == toy_bundle.spec
    for p, q in zip(toy_bundle.all_parameters(), loaded.all_parameters()):
        np.testing.assert_array_equal(p.numpy().astype(np.float32), q.numpy().astype(np.float32))


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "model.bin"
    path.write_bytes(b"NOTAMODEL" + bytes(32))
    with pytest.raises(BundleFormatError):
        ModelBundle.load(path)


def test_load_rejects_truncated_payload(tmp_path, toy_bundle):
    path = toy_bundle.save(tmp_path / "model.bin")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(BundleFormatError):
        ModelBundle.load(path)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_up_stages_follow_layers_per_stage(rng, layers):
    cfg = UNetConfig(
        input_channels=4,
        down_channels=[4, 8, 8],
        bottleneck_channels=8,
        output_channels=4,
        out_channels=2,
        layers_per_stage=layers,
    )
    net = UNet(cfg, 1, rng, dtype=np.float64)
    assert [len(stage) for stage in net.down] == [layers] * 3
    assert [len(stage) for stage in net.up] == [layers] * 3
    assert net(Tensor(rng.normal(size=(1, 16, 16, 1)))).shape == (1, 16, 16, 2)


def test_single_layer_up_stage_consumes_the_concatenation(rng):
    cfg = UNetConfig(
        input_channels=4, down_channels=[4, 8, 6], bottleneck_channels=8, output_channels=4, layers_per_stage=1
    )
    net = UNet(cfg, 1, rng)
    # up widths mirror the down widths; each next stage sees up width + skip width
    assert [stage[0].weight.shape[2] for stage in net.up] == [8, 6 + 6, 8 + 8]
    assert net.output_layer.weight.shape[2] == 4 + 4


def test_save_warns_about_float32_rounding(tmp_path, toy_bundle, caplog):
    with caplog.at_level(logging.WARNING):
        toy_bundle.save(tmp_path / "model.bin")
    assert "float64" in caplog.text
    assert "float32" in caplog.text


def test_float32_bundle_saves_quietly(tmp_path, caplog):
    bundle = ModelBundle.build(toy_spec(), dtype=np.float32)
    with caplog.at_level(logging.WARNING):
        path = bundle.save(tmp_path / "model.bin")
    assert not [r for r in caplog.records if r.levelno >= logging.WARNING]
    loaded = ModelBundle.load(path, dtype=np.float32)
    for p, q in zip(bundle.all_parameters(), loaded.all_parameters()):
        np.testing.assert_array_equal(p.numpy(), q.numpy())


def lag_autocorrelation(image, lag):
    """Normalised autocorrelation at ``lag`` pixels, averaged over both image axes."""
    centred = image - image.mean()
    across = (centred[:, :-lag] * centred[:, lag:]).mean()
    down = (centred[:-lag] * centred[lag:]).mean()
    return (across + down) / (2.0 * (centred**2).mean())


def zero_insertion_upsample(x):
    """x2 upsampling the way a stride-2 transposed convolution spreads its input."""
    b, h, w, c = x.shape
    out = np.zeros((b, 2 * h, 2 * w, c))
    out[:, ::2, ::2] = x
    return out


def test_resize_convolution_has_no_checkerboard(rng):
    # a smooth random latent on a positive offset, as the decoder sees between stages
    coarse = Tensor(rng.normal(size=(1, 3, 3, 1)))
    latent = resize_bilinear(coarse, 8, 8).numpy() + 2.0
    kernel = Tensor(np.ones((3, 3, 1, 1)) + rng.uniform(-0.1, 0.1, size=(3, 3, 1, 1)))

    resized = conv2d(resize_bilinear(Tensor(latent), 16, 16), kernel).numpy()[0, 1:-1, 1:-1, 0]
    deconv = conv2d(Tensor(zero_insertion_upsample(latent)), kernel).numpy()[0, 1:-1, 1:-1, 0]

    r1, r2, r3 = (lag_autocorrelation(resized, lag) for lag in (1, 2, 3))
    assert r1 > r2 > r3

    d1, d2, d3 = (lag_autocorrelation(deconv, lag) for lag in (1, 2, 3))
    assert d2 > d1
    assert d2 > d3
