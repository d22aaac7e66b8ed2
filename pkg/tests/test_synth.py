import json

import numpy as np
import pytest

from safire.core import check_partition, read_mask_png
from safire.synth import (PostProcessConfig, SynthConfig, add_noise, adjust_contrast, adjust_gamma,
                          gaussian_blur, generate_dataset, generate_sample, jpeg_roundtrip,
                          partition_to_binary, postprocess)


def test_single_source_all_background():
    img, part = generate_sample(1, 64, 1)
    assert img.shape == (64, 64, 3) and np.all(part == 0)


def test_three_sources_area_and_labels():
    for seed in range(4):
        img, part = generate_sample(seed, 256, 3)
        check_partition(part)
        counts = np.bincount(part.ravel())
        assert counts.size == 3 and counts.min() >= 0.02 * part.size
        assert img.min() >= 0 and img.max() <= 1


def test_determinism_and_bad_args():
    a = generate_sample(5, 64, 2)
    b = generate_sample(5, 64, 2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        generate_sample(0, 60, 2)
    with pytest.raises(ValueError):
        generate_sample(0, 64, 7)


def test_strong_signatures_separated():
    cfg = SynthConfig.strong()
    for seed in range(10):
        _, _, sigs = generate_sample(seed, 64, 3, cfg, return_signatures=True)
        for i in range(3):
            for j in range(i):
                assert sigs[i].distance(sigs[j], ("noise_sigma",)) >= 0.4 - 1e-12


def test_partition_to_binary():
    assert partition_to_binary(np.zeros((2, 2), int)).sum() == 0
    p = np.array([[0, 1], [2, 0]])
    np.testing.assert_array_equal(partition_to_binary(p), [[0, 1], [1, 0]])
    p2 = np.array([[0, 1], [1, 0]])
    np.testing.assert_array_equal(partition_to_binary(p2), p2)


def test_postprocess_identities():
    g = np.random.default_rng(0)
    img = g.random((16, 16, 3))
    assert np.array_equal(postprocess(img, PostProcessConfig.disabled(), 3), img)
    assert np.array_equal(adjust_gamma(img, 1.0), img)
    assert np.array_equal(adjust_contrast(img, 1.0), img)
    assert np.array_equal(gaussian_blur(img, 0.0), img)
    assert np.array_equal(jpeg_roundtrip(img, 100), img)
    assert np.array_equal(add_noise(img, 0.0, g), img)


def test_noise_statistics():
    img = np.full((128, 128, 3), 0.5)
    out = add_noise(img, 0.05, np.random.default_rng(1))
    assert abs(out.std() - 0.05) < 0.005


def test_jpeg_is_real_roundtrip():
    g = np.random.default_rng(2)
    img = g.random((32, 32, 3))
    out = jpeg_roundtrip(img, 50)
    assert out.shape == img.shape and not np.array_equal(out, img)
    assert np.abs(out - img).mean() < 0.3


def test_postprocess_deterministic_and_clamped():
    img = np.random.default_rng(3).random((32, 32, 3))
    cfg = PostProcessConfig(p_blur=1, p_noise=1, p_contrast=1, p_gamma=1, p_jpeg=1)
    a, b = postprocess(img, cfg, 9), postprocess(img, cfg, 9)
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1
    with pytest.raises(ValueError):
        PostProcessConfig(p_blur=1.5)


def test_generate_dataset_layout(tmp_path):
    m = generate_dataset(tmp_path, 3, 11, size=32, n_sources=(1, 3))
    for sub in ("images", "partitions", "binary"):
        assert len(list((tmp_path / sub).glob("*.png"))) == 3
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["master_seed"] == 11 and len(man["samples"]) == 3
    rec = m["samples"][0]
    part = read_mask_png(tmp_path / "partitions" / rec["file"], kind="partition")
    assert part.max() + 1 == rec["n_sources"] or rec["n_sources"] == 1
    np.testing.assert_array_equal(read_mask_png(tmp_path / "binary" / rec["file"]), part != 0)
    generate_dataset(tmp_path / "again", 3, 11, size=32, n_sources=(1, 3))
    for f in ("images/00001.png", "partitions/00002.png"):
        assert (tmp_path / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
