import numpy as np
import pytest
import torch

from gscodec.gaussians import GaussianSet
from gscodec.geometry import Camera
from gscodec.io import (
    CAMERA_FILE, SH_C0, format_camera, load_bundle, parse_camera, read_cameras, read_ply, read_ppm,
    save_bundle, write_ply, write_ppm,
)
from gscodec.synthetic import generate_synthetic


def test_ppm_round_trip_is_exact_on_the_8bit_grid(tmp_path):
    img = torch.randint(0, 256, (3, 5, 7)).float() / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n") and len(raw) == 11 + 105
    assert torch.equal(read_ppm(tmp_path / "a.ppm"), img)


def test_ppm_header_comments_and_errors(tmp_path):
    px = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6 # made by hand\n2 2\n255\n" + px)
    img = read_ppm(tmp_path / "c.ppm")
    assert img.shape == (3, 2, 2)
    assert torch.equal(img[:, 0, 0], torch.tensor([0.0, 1.0, 2.0]) / 255)
    (tmp_path / "d.ppm").write_bytes(b"P5\n2 2\n255\n" + px)
    with pytest.raises(ValueError, match="binary PPM"):
        read_ppm(tmp_path / "d.ppm")
    (tmp_path / "e.ppm").write_bytes(b"P6\n2 2\n255\n" + px[:-1])
    with pytest.raises(ValueError, match="pixel bytes"):
        read_ppm(tmp_path / "e.ppm")
    (tmp_path / "f.ppm").write_bytes(b"P6\n2 2\n65535\n" + px)
    with pytest.raises(ValueError, match="maxval"):
        read_ppm(tmp_path / "f.ppm")


def test_camera_line_round_trip():
    cam = generate_synthetic(0, 1)[0].cameras[0]
    back = parse_camera(format_camera(cam))
    assert back.intrinsics == cam.intrinsics and (back.near, back.far) == (cam.near, cam.far)
    assert np.array_equal(back.rotation, cam.rotation) and np.array_equal(back.translation, cam.translation)
    with pytest.raises(ValueError, match="18 numbers"):
        parse_camera("1 2 3")


def test_bundle_round_trip_and_validation(tmp_path):
    sc = generate_synthetic(3, 1)[0]
    depths = torch.stack([v.depth for v in sc.views])
    save_bundle(tmp_path / "s", sc.images, sc.cameras, depths)
    b = load_bundle(tmp_path / "s")
    assert b.images.shape == sc.images.shape
    assert (b.images - sc.images).abs().max() <= 0.5 / 255 + 1e-7
    assert torch.equal(b.depths, depths)
    assert [c.intrinsics for c in b.cameras] == [c.intrinsics for c in sc.cameras]
    (tmp_path / "s" / "view01.ppm").unlink()
    with pytest.raises(ValueError, match="1 images but 2 cameras"):
        load_bundle(tmp_path / "s")
    (tmp_path / "s" / CAMERA_FILE).unlink()
    with pytest.raises(FileNotFoundError):
        load_bundle(tmp_path / "s")


def test_camera_file_skips_comments(tmp_path):
    cam = Camera(1, 2, 3, 4, np.eye(3), np.ones(3), 0.5, 9.0)
    (tmp_path / "c.txt").write_text("# header\n" + format_camera(cam) + "\n\n")
    assert len(read_cameras(tmp_path / "c.txt")) == 1


def test_ply_export_uses_standard_names_and_encodings(tmp_path):
    g = torch.Generator().manual_seed(0)
    gs = GaussianSet(torch.randn(5, 3, generator=g), torch.rand(5, 3, generator=g) + 0.1,
                     torch.nn.functional.normalize(torch.randn(5, 4, generator=g), dim=1),
                     torch.rand(5, generator=g) * 0.8 + 0.1, torch.rand(5, 3, generator=g))
    write_ply(tmp_path / "g.ply", gs)
    names, table = read_ply(tmp_path / "g.ply")
    assert names[:3] == ["x", "y", "z"] and "f_dc_0" in names and names[-4:] == ["rot_0", "rot_1", "rot_2", "rot_3"]
    col = {n: table[:, i] for i, n in enumerate(names)}
    np.testing.assert_allclose(col["x"], gs.centers[:, 0].numpy(), rtol=1e-6)
    np.testing.assert_allclose(0.5 + SH_C0 * col["f_dc_1"], gs.colors[:, 1].numpy(), atol=1e-6)
    np.testing.assert_allclose(1 / (1 + np.exp(-col["opacity"])), gs.opacities.numpy(), atol=1e-6)
    np.testing.assert_allclose(np.exp(col["scale_2"]), gs.scales[:, 2].numpy(), rtol=1e-6)
