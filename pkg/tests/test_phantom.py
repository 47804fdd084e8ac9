from dataclasses import replace

import numpy as np
import pytest

from ddmm.errors import ValidationError
from ddmm.metrics import dice
from ddmm.phantom import (
    PhantomConfig,
    encode_mask,
    foreground_census,
    generate_phantom,
    ingest_folder,
    make_splits,
    mask_pixels,
    oracle_segment,
    read_gray,
    to_pixels,
    write_pgm,
)


@pytest.fixture
def cfg():
    return PhantomConfig(size=32)


def test_generation_is_a_pure_function_of_seed_and_index(cfg):
    a_img, a_mask = generate_phantom(cfg, 3)
    b_img, b_mask = generate_phantom(cfg, 3)
    assert a_img.tobytes() == b_img.tobytes()
    assert a_mask.tobytes() == b_mask.tobytes()
    c_img, _ = generate_phantom(cfg, 4)
    d_img, _ = generate_phantom(replace(cfg, seed=1), 3)
    assert not np.array_equal(a_img, c_img)
    assert not np.array_equal(a_img, d_img)


def test_output_types(cfg):
    image, mask = generate_phantom(cfg, 0)
    assert image.shape == (1, 32, 32) and image.dtype == np.float32
    assert mask.shape == (1, 32, 32) and mask.dtype == np.uint8
    assert image.min() >= -1.0 and image.max() <= 1.0
    assert set(np.unique(mask).tolist()) == {0, 1}


def test_noise_free_mask_is_exactly_the_lung_pixels(cfg):
    clean = replace(cfg, noise_sigma=0.0, rib_count=(0, 0))
    for index in range(5):
        image, mask = generate_phantom(clean, index)
        lung = np.float32(clean.to_model(clean.lung_level))
        np.testing.assert_array_equal(mask[0] == 1, image[0] == lung)


def test_config_validation():
    with pytest.raises(ValidationError):
        PhantomConfig(size=2)
    with pytest.raises(ValidationError):
        PhantomConfig(lung_level=0.8)
    with pytest.raises(ValidationError):
        PhantomConfig(rib_gain=0.3)
    with pytest.raises(ValidationError):
        PhantomConfig(rib_count=(4, 2))
    with pytest.raises(ValidationError):
        generate_phantom(PhantomConfig(), -1)


def test_too_small_grid_cannot_draw_lungs():
    with pytest.raises(ValidationError, match="redraws"):
        generate_phantom(PhantomConfig(size=8), 0)


def test_foreground_fraction_quick(cfg):
    fractions = foreground_census(cfg, 200)
    assert fractions.min() >= 0.08 and fractions.max() <= 0.45
    assert 0.15 <= fractions.mean() <= 0.30


@pytest.mark.slow
def test_foreground_fraction_census(cfg):
    fractions = foreground_census(cfg, 10_000)
    assert fractions.min() >= 0.08 and fractions.max() <= 0.45
    assert 0.15 <= fractions.mean() <= 0.30


@pytest.mark.parametrize("n_labeled, n_train", [(100, 80), (951, 761)])
def test_split_sizes(n_labeled, n_train):
    split = make_splits(PhantomConfig(size=16), n_labeled, 0)
    assert len(split.labeled_train) == n_train
    assert len(split.labeled_test) == n_labeled - n_train
    names = set(split.labeled_train.names) | set(split.labeled_test.names)
    assert len(names) == n_labeled
    assert not set(split.labeled_train.names) & set(split.labeled_test.names)


def test_splits_are_deterministic_and_pool_is_unlabeled():
    a = make_splits(PhantomConfig(size=16), 10, 4)
    b = make_splits(PhantomConfig(size=16), 10, 4)
    assert a.labeled_train.names == b.labeled_train.names
    assert a.labeled_train.images.tobytes() == b.labeled_train.images.tobytes()
    assert a.unlabeled.masks is None
    assert a.unlabeled.names == [f"phantom-{i:06d}" for i in range(10, 14)]
    assert set(np.unique(a.labeled_train.masks).tolist()) <= {-1.0, 1.0}


def test_split_rejects_tiny_sets():
    with pytest.raises(ValidationError):
        make_splits(PhantomConfig(size=16), 4, 0)


def test_oracle_segments_noise_free_phantoms(cfg):
    clean = replace(cfg, noise_sigma=0.0)
    scores = [dice(oracle_segment(img, clean), mask) for img, mask in (generate_phantom(clean, i) for i in range(20))]
    assert min(scores) >= 0.99


def test_oracle_segments_noisy_phantoms(cfg):
    scores = [dice(oracle_segment(img, cfg), mask) for img, mask in (generate_phantom(cfg, i) for i in range(100))]
    assert np.mean(scores) >= 0.95


def test_oracle_on_a_bright_image_is_empty(cfg):
    assert oracle_segment(np.ones((1, 32, 32)), cfg).sum() == 0


def test_pixel_conversions():
    assert to_pixels(np.array([[[-1.0, 0.0, 1.0]]])).tolist() == [[0, 128, 255]]
    assert mask_pixels(encode_mask(np.array([[1, 0]]))).tolist() == [[255, 0]]


def _write_folder(root, n, size=16):
    (root / "images").mkdir()
    (root / "masks").mkdir()
    for i in range(n):
        image, mask = generate_phantom(PhantomConfig(size=size), i)
        write_pgm(root / "images" / f"case{i}.pgm", to_pixels(image))
        write_pgm(root / "masks" / f"case{i}.pgm", mask_pixels(mask))


def test_ingest_folder_pairs_by_stem(tmp_path):
    _write_folder(tmp_path, 3)
    data = ingest_folder(tmp_path / "images", tmp_path / "masks", 16)
    assert len(data) == 3
    assert data.names == ["file:case0", "file:case1", "file:case2"]
    _, mask = generate_phantom(PhantomConfig(size=16), 1)
    np.testing.assert_array_equal(data.binary_masks()[1], mask)
    image, _ = generate_phantom(PhantomConfig(size=16), 1)
    assert np.abs(data.images[1] - image).max() <= 1.0 / 127.5


def test_ingest_resizes_and_crops(tmp_path):
    (tmp_path / "images").mkdir()
    write_pgm(tmp_path / "images" / "wide.pgm", np.full((20, 24), 200, dtype=np.uint8))
    data = ingest_folder(tmp_path / "images", None, 8)
    assert data.images.shape == (1, 1, 8, 8)
    assert data.masks is None
    assert np.allclose(data.images, 200 / 127.5 - 1.0)


def test_ingest_rejects_non_binary_mask(tmp_path):
    _write_folder(tmp_path, 3)
    bad = np.zeros((16, 16), dtype=np.uint8)
    bad[3, 3] = 17
    write_pgm(tmp_path / "masks" / "case1.pgm", bad)
    with pytest.raises(ValidationError, match=r"case1\.pgm.*17"):
        ingest_folder(tmp_path / "images", tmp_path / "masks", 16)


def test_ingest_rejects_missing_mask(tmp_path):
    _write_folder(tmp_path, 2)
    (tmp_path / "masks" / "case0.pgm").unlink()
    with pytest.raises(ValidationError, match="case0"):
        ingest_folder(tmp_path / "images", tmp_path / "masks", 16)


def test_pgm_maxval_must_be_255(tmp_path):
    path = tmp_path / "deep.pgm"
    path.write_bytes(b"P5\n2 2\n100\n" + bytes([0, 50, 100, 25]))
    with pytest.raises(ValidationError, match="maxval"):
        read_gray(path)


def test_ingest_rejects_empty_folder(tmp_path):
    with pytest.raises(ValidationError):
        ingest_folder(tmp_path, None, 16)
