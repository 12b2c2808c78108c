import numpy as np
import pytest
from scipy import ndimage

from spikeforge.data import (Dataset, dataset_bytes, gen_box_dataset, gen_mask_dataset,
                             load_dataset, load_or_generate, save_dataset, split)
from spikeforge.metrics import dice


def test_box_dataset_is_deterministic():
    a, b = gen_box_dataset(20, seed=4), gen_box_dataset(20, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.targets, b.targets)
    assert not np.array_equal(a.images, gen_box_dataset(20, seed=5).images)


def test_box_dataset_prefix_property():
    small, big = gen_box_dataset(5, seed=1), gen_box_dataset(12, seed=1)
    assert np.array_equal(small.images, big.images[:5])


def test_box_samples_satisfy_invariants():
    data = gen_box_dataset(200, seed=0)
    assert data.images.shape == (200, 1, 64, 64) and data.targets.shape == (200, 4)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
    for img, box in data:
        x0, y0, x1, y1 = box
        assert 0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0


def test_boxes_tightly_bound_the_shape():
    # noise-free images: the shape is exactly the bright region
    data = gen_box_dataset(100, seed=2, noise=0.0)
    for img, box in data:
        bright = img[0] > img[0].min() + 0.2
        rows = np.flatnonzero(bright.any(axis=1))
        cols = np.flatnonzero(bright.any(axis=0))
        found = np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1]) / 64
        assert np.all(np.abs(found - box) <= 1 / 64 + 1e-6)


def test_mean_box_area_lies_in_configured_range():
    boxes = gen_box_dataset(10_000, seed=0, size=32).targets
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    assert 0.05 <= area.mean() <= 0.4


def test_mask_dataset_is_deterministic():
    a, b = gen_mask_dataset(10, seed=3), gen_mask_dataset(10, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.targets, b.targets)


def test_masks_are_single_four_connected_components():
    data = gen_mask_dataset(1000, seed=0)
    assert data.images.shape == (1000, 1, 32, 32)
    assert set(np.unique(data.targets)) <= {0.0, 1.0}
    for _, mask in data:
        _, count = ndimage.label(mask[0])  # default structure is 4-connectivity
        assert count == 1


def test_threshold_baseline_reaches_half_dice():
    data = gen_mask_dataset(500, seed=1)
    scores = [dice(img > 0.5, mask) for img, mask in data]
    assert np.mean(scores) >= 0.5


@pytest.mark.parametrize("gen", [gen_box_dataset, gen_mask_dataset])
def test_generators_reject_empty(gen):
    with pytest.raises(ValueError):
        gen(0, seed=0)


def test_split_sizes_and_disjointness():
    data = gen_box_dataset(800, seed=0, size=16)
    train, test = split(data, 0.9, seed=1)
    assert (len(train), len(test)) == (720, 80)
    rows = lambda d: {d.images[i].tobytes() + d.targets[i].tobytes() for i in range(len(d))}
    assert rows(train) | rows(test) == rows(data)
    assert not rows(train) & rows(test)


def test_split_is_seeded():
    data = gen_box_dataset(50, seed=0, size=16)
    a, _ = split(data, 0.8, seed=7)
    b, _ = split(data, 0.8, seed=7)
    c, _ = split(data, 0.8, seed=8)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5])
def test_split_rejects_bad_fraction(fraction):
    with pytest.raises(ValueError):
        split(gen_box_dataset(10, 0, size=16), fraction)


def test_task_is_inferred_from_targets():
    assert gen_box_dataset(2, 0, size=16).task == "locnet"
    assert gen_mask_dataset(2, 0).task == "cae"


# -- SFDS files ----------------------------------------------------------------

@pytest.mark.parametrize("gen", [gen_box_dataset, gen_mask_dataset])
def test_dataset_file_round_trip(tmp_path, gen):
    data = gen(7, seed=2)
    path = tmp_path / "d.sfds"
    save_dataset(path, data)
    back = load_dataset(path)
    assert np.array_equal(back.images, data.images)
    assert np.array_equal(back.targets, data.targets)


def test_dataset_file_header_is_little_endian():
    data = gen_box_dataset(3, seed=0, size=16)
    buf = dataset_bytes(data)
    assert buf[:4] == b"SFDS"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == 3


def test_dataset_file_errors(tmp_path):
    data = gen_box_dataset(3, seed=0, size=16)
    buf = dataset_bytes(data)
    cases = {"magic": b"XXXX" + buf[4:], "version": buf[:4] + (9).to_bytes(4, "little") + buf[8:],
             "truncated": buf[:-7], "trailing": buf + b"\0"}
    for name, payload in cases.items():
        path = tmp_path / f"{name}.sfds"
        path.write_bytes(payload)
        with pytest.raises(ValueError):
            load_dataset(path)


def test_cache_reuses_file(tmp_path):
    a = load_or_generate("locnet", 4, 1, tmp_path, size=16)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    b = load_or_generate("locnet", 4, 1, tmp_path, size=16)
    assert np.array_equal(a.images, b.images)
    load_or_generate("locnet", 4, 1, tmp_path, size=32)
    assert len(list(tmp_path.iterdir())) == 2


def test_dataset_indexing():
    data = gen_mask_dataset(4, seed=0)
    sample = data[1]
    assert sample.image.shape == (1, 32, 32) and sample.mask.shape == (1, 32, 32)
    assert isinstance(data[1:3], Dataset) and len(data[1:3]) == 2
