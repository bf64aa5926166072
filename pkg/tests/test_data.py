import numpy as np
import pytest

from metadapt.data import (
    Dataset,
    FoldSplit,
    SynthSpec,
    hflip,
    hflip_augment,
    load_dataset,
    sample_episode,
    save_dataset,
    split_classes,
    synth_dataset,
    synth_images,
)
from metadapt.errors import DatasetFormatError, DatasetTruncatedError, DatasetVersionError, PreconditionError

SMALL = SynthSpec(num_classes=10, samples_per_class=12)


def test_generator_is_deterministic():
    a, b = synth_images(SMALL, 3), synth_images(SMALL, 3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, synth_images(SMALL, 4))
    assert a.shape == (10, 12, 3, 16, 16) and a.dtype == np.float32


def test_degenerate_generator_repeats_the_template():
    imgs = synth_images(SynthSpec(num_classes=4, samples_per_class=5, noise_level=0.0, transform_jitter=0.0), 0)
    for c in range(4):
        assert (imgs[c] == imgs[c, :1]).all()
    assert not np.array_equal(imgs[0, 0], imgs[1, 0])


def test_spec_validation():
    with pytest.raises(PreconditionError):
        synth_images(SynthSpec(num_classes=0), 0)
    with pytest.raises(PreconditionError):
        synth_images(SynthSpec(noise_level=-1.0), 0)


def test_nearest_centroid_beats_chance():
    imgs = synth_images(SynthSpec(num_classes=10, samples_per_class=20), 1).reshape(10, 20, -1)
    centroids = imgs[:, :10].mean(axis=1)
    held = imgs[:, 10:].reshape(-1, imgs.shape[-1])
    labels = np.repeat(np.arange(10), 10)
    pred = ((held[:, None] - centroids[None]) ** 2).sum(-1).argmin(axis=1)
    assert (pred == labels).mean() > 1 / 5


def test_splits_are_class_disjoint():
    parts = split_classes(50, 0)
    assert [len(parts[s]) for s in ("train", "val", "test")] == [30, 10, 10]
    sets = [set(parts[s]) for s in ("train", "val", "test")]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert set().union(*sets) == set(range(50))
    ds = synth_dataset(SMALL, 0)
    np.testing.assert_array_equal(ds["val"].source_classes, split_classes(10, 0)["val"])


def test_fsds_round_trip(tmp_path):
    ds = synth_dataset(SMALL, 2)["val"]
    save_dataset(ds, tmp_path / "v.fsds")
    back = load_dataset(tmp_path / "v.fsds")
    np.testing.assert_array_equal(back.images, ds.images)
    assert back.split == "val" and back.num_classes == ds.num_classes


def test_fsds_errors(tmp_path):
    ds = Dataset(np.zeros((2, 3, 1, 4, 4)), split="test")
    p = tmp_path / "d.fsds"
    save_dataset(ds, p)
    raw = p.read_bytes()
    (tmp_path / "magic.fsds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "magic.fsds")
    (tmp_path / "short.fsds").write_bytes(raw[:-4])
    with pytest.raises(DatasetTruncatedError):
        load_dataset(tmp_path / "short.fsds")
    (tmp_path / "ver.fsds").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(DatasetVersionError):
        load_dataset(tmp_path / "ver.fsds")


def test_episode_sizes_and_labels():
    ds = synth_dataset(SMALL, 0)["train"]
    rng = np.random.default_rng(0)
    ep = sample_episode(ds, 5, 1, 6, rng)
    assert ep.support_size == 5 and len(ep.query_y) == 30
    ep = sample_episode(ds, 5, 5, 6, rng)
    assert ep.support_size == 25 and len(ep.query_y) == 30
    assert sorted(set(ep.support_y)) == list(range(5))
    assert (np.diff(ep.classes) > 0).all()
    # labels follow sorted class ids and images are the stored samples
    flat = ds.flat_images()
    np.testing.assert_array_equal(ep.support_x, flat[ep.support_ids])
    np.testing.assert_array_equal(ep.support_ids // ds.samples_per_class, ep.classes[ep.support_y])
    assert not set(ep.support_ids) & set(ep.query_ids)
    with pytest.raises(PreconditionError):
        sample_episode(ds, 7, 1, 1, rng)
    with pytest.raises(PreconditionError):
        sample_episode(ds, 5, 6, 7, rng)


def test_episode_sampling_determinism_and_variety():
    ds = synth_dataset(SMALL, 0)["train"]
    a = sample_episode(ds, 5, 1, 6, np.random.default_rng(5))
    b = sample_episode(ds, 5, 1, 6, np.random.default_rng(5))
    np.testing.assert_array_equal(a.support_ids, b.support_ids)
    np.testing.assert_array_equal(a.query_x, b.query_x)
    differ = 0
    for s in range(100):
        x = sample_episode(ds, 5, 1, 6, np.random.default_rng(1000 + s))
        y = sample_episode(ds, 5, 1, 6, np.random.default_rng(5000 + s))
        differ += sorted(x.support_ids) != sorted(y.support_ids)
    assert differ >= 99


def test_hflip():
    ds = synth_dataset(SMALL, 0)["train"]
    ep = sample_episode(ds, 5, 1, 2, np.random.default_rng(0))
    aug = hflip_augment(ep)
    assert aug.support_size == 10
    np.testing.assert_array_equal(aug.support_x[5:], ep.support_x[..., ::-1])
    np.testing.assert_array_equal(aug.support_y, np.tile(ep.support_y, 2))
    np.testing.assert_array_equal(aug.query_x, ep.query_x)
    assert aug.support_flipped.tolist() == [False] * 5 + [True] * 5
    np.testing.assert_array_equal(hflip(hflip(ep.support_x)), ep.support_x)
    sym = np.ones((1, 1, 4, 4), dtype=np.float32)
    sym[..., 1:3] = 2.0
    np.testing.assert_array_equal(hflip(sym), sym)


def test_fold_split():
    ds = synth_dataset(SMALL, 0)["train"]
    folds = FoldSplit.make(ds, 0)
    ids_w, ids_a = folds.ids(ds, "w"), folds.ids(ds, "alpha")
    assert not ids_w & ids_a
    assert len(ids_w | ids_a) == ds.num_classes * ds.samples_per_class
    assert all(len(folds.pool_w[c]) == len(folds.pool_alpha[c]) == 6 for c in range(ds.num_classes))
    ep = sample_episode(ds, 5, 1, 3, np.random.default_rng(0), pool=folds.pool_w)
    assert set(ep.sample_ids().tolist()) <= ids_w
    with pytest.raises(PreconditionError):
        FoldSplit.make(ds, 0, ratio=1.0)
