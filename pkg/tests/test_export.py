import csv
import io
import json
import math
import struct

import numpy as np
import pytest
from PIL import Image

from latent_advection.data import ImagePair, NormalizationRecord, apply_normalization, denormalize, load_image
from latent_advection.export import (
    FIELD_MAGIC,
    ExportError,
    decode_field,
    encode_csv,
    encode_field,
    encode_png,
    endpoint_metrics,
    export_artifacts,
    quiver_rows,
    read_field_file,
)
from latent_advection.inference import ImageInference
from latent_advection.synthetic import make_synthetic


def small_result(channels=1, with_fields=True):
    frames = np.linspace(0.0, 1.0, 3 * 8 * 8 * channels).reshape(3, 8, 8, channels)
    fields = np.zeros((2, 8, 8, 2))
    fields[..., 0] = 0.5
    return ImageInference(
        frames=frames,
        dt=0.1,
        fields=fields if with_fields else None,
        patch_shape=(8, 8),
        tile_origins=[(0, 0)],
    )


def test_field_file_layout(rng):
    field = rng.normal(size=(3, 4, 5, 2)).astype(np.float32)
    raw = encode_field(field)
    magic, version, n, h, w = struct.unpack_from("<4sIIII", raw)
    assert (magic, version, n, h, w) == (FIELD_MAGIC, 1, 3, 4, 5)
    assert len(raw) == 20 + 3 * 4 * 5 * 2 * 4
    np.testing.assert_array_equal(decode_field(raw), field)
    # components interleave per pixel
    first = np.frombuffer(raw, dtype="<f4", offset=20, count=2)
    np.testing.assert_array_equal(first, field[0, 0, 0])


def test_single_step_field_gets_n_of_one(rng):
    raw = encode_field(rng.normal(size=(4, 4, 2)))
    assert decode_field(raw).shape == (1, 4, 4, 2)


def test_decode_rejects_bad_magic():
    with pytest.raises(ExportError):
        decode_field(b"NOPE" + bytes(16))


def test_decode_rejects_short_payload(rng):
    raw = encode_field(rng.normal(size=(1, 2, 2, 2)))
    with pytest.raises(ExportError):
        decode_field(raw[:-4])


def test_encode_field_rejects_wrong_shape():
    with pytest.raises(ValueError):
        encode_field(np.zeros((4, 4, 3)))


def test_png_is_clipped_grayscale():
    img = Image.open(io.BytesIO(encode_png(np.array([[-0.5, 0.5], [1.0, 2.0]]), bit_depth=8)))
    assert img.mode == "L"
    np.testing.assert_array_equal(np.asarray(img), [[0, 128], [255, 255]])


def test_png_defaults_to_sixteen_bits():
    img = Image.open(io.BytesIO(encode_png(np.array([[0.0, 0.5], [1.0, 2.0]]))))
    np.testing.assert_array_equal(np.asarray(img).astype(np.int64), [[0, 32768], [65535, 65535]])


def test_quiver_subsampling():
    field = np.zeros((8, 8, 2))
    field[4, 4] = [1.5, -2.0]
    rows = quiver_rows(field, every=4)
    assert len(rows) == 4
    assert (4, 4, 1.5, -2.0) in rows


def test_csv_keeps_float_precision():
    text = encode_csv(["a", "b"], [(1, 0.1 + 0.2)]).decode()
    assert text == "a,b\n1,0.30000000000000004\n"


def test_endpoint_metrics_for_exact_frames():
    result = small_result()
    reference = ImagePair(result.frames[0], result.frames[-1])
    metrics = endpoint_metrics(result, reference)
    assert metrics["frame0_rmse"] == 0.0
    assert metrics["terminal_rmse"] == 0.0
    assert metrics["terminal_psnr_db"] == float("inf")


def test_endpoint_psnr():
    result = small_result()
    reference = ImagePair(result.frames[0], result.frames[-1] + 0.1)
    assert endpoint_metrics(result, reference)["terminal_psnr_db"] == pytest.approx(20.0)


def test_export_writes_every_artifact(tmp_path):
    written = export_artifacts(small_result(), tmp_path / "out")
    names = sorted(p.name for p in written)
    assert names == [
        "field_000.bin",
        "field_000.csv",
        "field_001.bin",
        "field_001.csv",
        "frame_000.png",
        "frame_000.tif",
        "frame_001.png",
        "frame_001.tif",
        "frame_002.png",
        "frame_002.tif",
        "metrics.json",
        "streamlines.csv",
    ]
    metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert metrics["method"] == "latent"
    assert metrics["n_steps"] == 2
    assert metrics["total_time"] == pytest.approx(0.2)
    np.testing.assert_allclose(read_field_file(tmp_path / "out" / "field_001.bin")[0, ..., 0], 0.5)


def test_streamlines_move_with_the_field(tmp_path):
    export_artifacts(small_result(), tmp_path, seeds=np.array([[0.25, 0.5]]))
    lines = (tmp_path / "streamlines.csv").read_text().splitlines()
    assert lines[0] == "id,step,x,y"
    last = lines[-1].split(",")
    assert float(last[2]) == pytest.approx(0.35)
    assert float(last[3]) == pytest.approx(0.5)


def test_multichannel_frames_are_split(tmp_path):
    written = export_artifacts(small_result(channels=2, with_fields=False), tmp_path)
    names = {p.name for p in written}
    assert {"frame_000_c0.png", "frame_000_c1.png", "frame_002_c1.png", "frame_002_c1.tif"} <= names
    assert not any(n.startswith("field_") for n in names)


def test_exported_frames_renormalise_to_the_network_output(tmp_path, rng):
    record = NormalizationRecord(0.2, 0.9)
    outputs = rng.uniform(-1.0, 1.0, size=(3, 8, 8, 1))
    result = small_result()
    result.frames = denormalize(outputs, record)
    export_artifacts(result, tmp_path)
    for j in range(3):
        exact = apply_normalization(load_image(tmp_path / f"frame_{j:03d}.tif"), record)
        np.testing.assert_allclose(exact, outputs[j], rtol=0, atol=1e-6)
        # 16-bit PNGs stay within half a quantisation step
        quantised = apply_normalization(load_image(tmp_path / f"frame_{j:03d}.png"), record)
        bound = 0.5 / 65535 * 2.0 / (record.hi - record.lo)
        assert np.abs(quantised - outputs[j]).max() <= bound + 1e-12


def test_latents_are_written_when_present(tmp_path):
    result = small_result()
    result.latents = np.random.default_rng(0).normal(size=(3, 8, 8, 1))
    names = {p.name for p in export_artifacts(result, tmp_path)}
    assert {"latent_000.png", "latent_002.png"} <= names


def test_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExportError):
        export_artifacts(small_result(), blocker / "out")


def test_quiver_csv_of_a_rotation_is_tangent(tmp_path):
    h, w = 32, 40
    scene = make_synthetic("rotation", h, w, n_steps=2, seed=5)
    cx, cy = scene.parameters["center"]
    sign = scene.parameters["sign"]
    result = ImageInference(frames=np.zeros((3, h, w, 1)), dt=0.1, fields=scene.field_array())
    export_artifacts(result, tmp_path, quiver_every=3)

    with (tmp_path / "field_000.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(range(0, h, 3)) * len(range(0, w, 3))
    checked = 0
    for row in rows:
        x, y = int(row["col"]) / (w - 1), int(row["row"]) / (h - 1)
        if math.hypot(x - cx, y - cy) < 0.1:
            continue
        want = math.atan2(sign * (x - cx), -sign * (y - cy))
        got = math.atan2(float(row["wy"]), float(row["wx"]))
        gap = abs((got - want + math.pi) % (2 * math.pi) - math.pi)
        assert math.degrees(gap) <= 2.0, row
        checked += 1
    assert checked > 100
