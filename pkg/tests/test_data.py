"""Dataset generation, PPM/manifest formats, and image quality metrics."""

import numpy as np
import pytest

from glyphgen import data


def test_small_batch_has_distinct_shape_color_pairs():
    ds = data.generate_dataset(4, seed=0)
    pairs = set(zip(ds.shape_ids.tolist(), ds.color_ids.tolist()))
    assert len(pairs) == 4
    assert set(ds.shape_ids.tolist()) == {0, 1, 2, 3}
    assert set(ds.color_ids.tolist()) == {0, 1, 2, 3}


def test_class_balance_within_one():
    ds = data.generate_dataset(1000, seed=3)
    for ids in (ds.shape_ids, ds.color_ids, ds.pos_ids):
        counts = np.bincount(ids, minlength=4)
        assert counts.max() - counts.min() <= 1
        assert np.all(np.abs(counts - 250) <= 1)


def test_generation_is_deterministic():
    a = data.generate_dataset(16, seed=5)
    b = data.generate_dataset(16, seed=5)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.class_ids, b.class_ids)
    c = data.generate_dataset(16, seed=6)
    assert not np.array_equal(a.images, c.images)


def test_splits_differ_and_prefix_is_stable():
    tr = data.generate_dataset(16, seed=5, split="train")
    va = data.generate_dataset(16, seed=5, split="val")
    assert not np.array_equal(tr.images, va.images)
    # Growing n extends the set without rewriting the prefix.
    big = data.generate_dataset(32, seed=5, split="train")
    assert np.array_equal(tr.images, big.images[:16])


def test_invalid_arguments():
    with pytest.raises(ValueError, match="n must be"):
        data.generate_dataset(0, seed=0)
    with pytest.raises(ValueError, match="split"):
        data.generate_dataset(4, seed=0, split="test")


def test_images_in_range_and_labeled_quadrant_holds_mass():
    ds = data.generate_dataset(64, seed=1)
    assert ds.images.dtype == np.float32
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    for i in range(len(ds)):
        img = ds.images[i].sum(axis=2)
        qr, qc = ds.pos_ids[i] // 2, ds.pos_ids[i] % 2
        inside = img[qr * 8:(qr + 1) * 8, qc * 8:(qc + 1) * 8].sum()
        assert inside > 0.8 * img.sum()


def test_color_channels_match_label():
    ds = data.generate_dataset(64, seed=2)
    for i in range(len(ds)):
        img = ds.images[i]
        rgb = data.COLOR_RGB[ds.color_ids[i]]
        lit = img.reshape(-1, 3)[img.sum(axis=2).reshape(-1) > 0.5]
        # Every lit pixel is a scalar multiple of the label color.
        scale = lit.max(axis=1, keepdims=True)
        assert np.allclose(lit, scale * rgb, atol=1e-6)


def test_class_id_roundtrip():
    for cid in range(data.N_CLASSES):
        s, c, p = data.decompose_class(cid)
        assert data.class_id(s, c, p) == cid


def test_ppm_roundtrip_and_header(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3)).astype(np.float32)
    path = tmp_path / "x.ppm"
    data.write_ppm(str(path), img)
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n16 16\n255\n")
    assert len(raw) == len(b"P6\n16 16\n255\n") + 16 * 16 * 3
    back = data.read_ppm(str(path))
    # Byte-exact under re-quantization: writing the readback reproduces bytes.
    data.write_ppm(str(tmp_path / "y.ppm"), back)
    assert (tmp_path / "y.ppm").read_bytes() == raw
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-6


def test_ppm_full_scale_maps_to_255(tmp_path):
    img = np.ones((2, 2, 3), dtype=np.float32)
    path = tmp_path / "w.ppm"
    data.write_ppm(str(path), img)
    assert path.read_bytes().endswith(bytes([255] * 12))


def test_ppm_reader_handles_comments_and_rejects_junk(tmp_path):
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    path = tmp_path / "c.ppm"
    with open(path, "wb") as f:
        f.write(b"P6\n# a comment\n2 2\n255\n")
        f.write(img.tobytes())
    assert data.read_ppm(str(path)).shape == (2, 2, 3)
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
    with pytest.raises(ValueError, match="P6"):
        data.read_ppm(str(bad))
    trunc = tmp_path / "trunc.ppm"
    trunc.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ValueError, match="truncated"):
        data.read_ppm(str(trunc))


def test_manifest_roundtrip(tmp_path):
    rows = [(0, "circle", "red", "tl", "img_00000.ppm"),
            (1, "cross", "yellow", "br", "img_00001.ppm")]
    path = tmp_path / "manifest.tsv"
    data.write_manifest(str(path), rows)
    assert data.read_manifest(str(path)) == rows
    text = path.read_text()
    assert text.splitlines()[0] == "0\tcircle\tred\ttl\timg_00000.ppm"


def test_export_dataset(tmp_path):
    ds = data.generate_dataset(6, seed=9)
    data.export_dataset(ds, str(tmp_path / "out"))
    rows = data.read_manifest(str(tmp_path / "out" / "manifest.tsv"))
    assert len(rows) == 6
    img0 = data.read_ppm(str(tmp_path / "out" / rows[0][4]))
    assert np.abs(img0 - ds.images[0]).max() <= 0.5 / 255.0 + 1e-6
    assert rows[3][1] == data.SHAPES[ds.shape_ids[3]]


def test_psnr_identity_and_uniform_offset():
    rng = np.random.default_rng(1)
    x = rng.random((16, 16, 3)) * 0.8 + 0.1
    assert data.psnr(x, x) == 99.0
    assert abs(data.psnr(x, x + 0.1) - 20.0) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        data.psnr(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)))


def test_ssim_identity_and_inversion():
    x = np.full((16, 16, 3), 0.3)
    assert abs(data.ssim(x, x) - 1.0) < 1e-12
    ds = data.generate_dataset(1, seed=0)
    img = ds.images[0].astype(np.float64)
    assert data.ssim(img, 1.0 - img) < 1.0
    assert abs(data.ssim(img, img) - 1.0) < 1e-12


def test_ssim_window_count_is_nine_at_base_size():
    # 16x16 with 8x8 windows at stride 4: offsets {0,4,8} each axis.
    x = np.zeros((16, 16, 3))
    y = x.copy()
    y[:8, :8] = 1.0  # perturb some windows only
    v = data.ssim(x, y)
    assert 0.0 < v < 1.0


def test_render_shapes_are_distinct():
    rng = np.random.default_rng(0)
    glyphs = [data.render_glyph(s, 0, 0, np.random.default_rng(0)) for s in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(glyphs[i] - glyphs[j]).max() > 0.2
    assert rng is not None
