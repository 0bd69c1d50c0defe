import numpy as np
import pytest
from PIL import Image

from latent_advection.data import (
    ImageFormatError,
    ImagePair,
    NormalizationRecord,
    denormalize,
    load_image,
    load_pair,
    normalize,
    normalize_pair,
    save_image,
    scan_patches,
    window_count,
)
from latent_advection.models import DatasetManifest
from latent_advection.tensor import ShapeError


def test_scan_reproduces_transition_dataset_count():
    pair = ImagePair(np.zeros((256, 1024)), np.zeros((256, 1024)))
    assert len(scan_patches(pair, 256, 256, 1, 1)) == 768


def test_scan_reproduces_large_dataset_count():
    assert window_count(1024, 256, 10) ** 2 == 5776
    pair = ImagePair(np.zeros((1024, 1024)), np.zeros((1024, 1024)))
    assert len(scan_patches(pair, 256, 256, 10, 10)) == 5776


def test_patch_equal_to_image_gives_one_pair():
    pair = ImagePair(np.zeros((16, 24)), np.ones((16, 24)))
    assert len(scan_patches(pair, 16, 24, 3, 5)) == 1


def test_patch_larger_than_image():
    with pytest.raises(ShapeError):
        window_count(8, 16, 1)


def test_patch_order_is_row_major():
    pair = ImagePair(np.zeros((20, 20)), np.zeros((20, 20)))
    ds = scan_patches(pair, 8, 8, 4, 4)
    assert (ds.n_rows, ds.n_cols) == (3, 3)
    assert [ds[i].origin for i in range(4)] == [(0, 0), (0, 4), (0, 8), (4, 0)]
    with pytest.raises(IndexError):
        ds[9]


def test_patches_share_pair_normalisation(rng):
    x0 = rng.uniform(0.2, 0.4, size=(12, 12))
    x1 = rng.uniform(0.3, 0.9, size=(12, 12))
    patch = scan_patches(ImagePair(x0, x1), 8, 8, 2, 2)[1]
    lo = min(x0[0:8, 2:10].min(), x1[0:8, 2:10].min())
    hi = max(x0[0:8, 2:10].max(), x1[0:8, 2:10].max())
    assert patch.record == NormalizationRecord(lo, hi)
    assert min(patch.x0.min(), patch.x1.min()) == pytest.approx(-1.0)
    assert max(patch.x0.max(), patch.x1.max()) == pytest.approx(1.0)


def test_normalize_round_trip(rng):
    values = rng.uniform(3.0, 7.0, size=(5, 5, 1))
    scaled, record = normalize(values)
    assert scaled.min() == pytest.approx(-1.0) and scaled.max() == pytest.approx(1.0)
    np.testing.assert_allclose(denormalize(scaled, record), values)


def test_constant_patch_normalises_to_zero():
    x0, x1, record = normalize_pair(np.full((4, 4), 0.3), np.full((4, 4), 0.3))
    assert record.degenerate
    assert not np.any(x0) and not np.any(x1)
    np.testing.assert_allclose(denormalize(x0, record), 0.3)


def test_reads_eight_bit_pgm(tmp_path):
    path = tmp_path / "tiny.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_image(path)
    assert img.shape == (2, 2, 1)
    np.testing.assert_allclose(img[..., 0], [[0.0, 1.0], [128 / 255, 64 / 255]])


def test_sixteen_bit_png_round_trip(tmp_path, rng):
    values = rng.uniform(0.0, 1.0, size=(6, 5))
    path = save_image(tmp_path / "x.png", values, bit_depth=16)
    np.testing.assert_allclose(load_image(path)[..., 0], values, atol=0.5 / 65535 + 1e-12)


def test_save_image_clips(tmp_path):
    path = save_image(tmp_path / "x.png", np.array([[-1.0, 2.0]]))
    np.testing.assert_allclose(load_image(path)[..., 0], [[0.0, 1.0]])


def test_rejects_colour_images(tmp_path):
    path = tmp_path / "rgb.png"
    Image.new("RGB", (4, 4)).save(path)
    with pytest.raises(ImageFormatError):
        load_image(path)


def test_missing_file(tmp_path):
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "absent.png")


def test_channel_files_must_agree(tmp_path):
    a = save_image(tmp_path / "a.png", np.zeros((4, 4)))
    b = save_image(tmp_path / "b.png", np.zeros((4, 5)))
    with pytest.raises(ImageFormatError):
        load_image([a, b])


def test_multichannel_pair(tmp_path, rng):
    files = [save_image(tmp_path / f"{name}.png", rng.uniform(size=(4, 4))) for name in ("a0", "a1", "b0", "b1")]
    manifest = DatasetManifest(x0=[str(files[0]), str(files[1])], x1=[str(files[2]), str(files[3])])
    pair = load_pair(manifest)
    assert pair.shape == (4, 4, 2)
    assert pair.channels == 2


def test_pair_shapes_must_match():
    with pytest.raises(ShapeError):
        ImagePair(np.zeros((4, 4)), np.zeros((4, 5)))


def test_pair_rejects_non_finite():
    x = np.zeros((4, 4))
    x[1, 1] = np.nan
    with pytest.raises(ValueError):
        ImagePair(x, np.zeros((4, 4)))
