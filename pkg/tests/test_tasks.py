import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metacritic.container import ArrayWriter, FormatError, write_container
from metacritic.tasks import (CORPUS_MAGIC, FileCorpus, GaussianBlobs, PatternGlyphs, TaskFamily,
                              load_episode_file, make_family, nearest_prototype_accuracy, save_corpus)


@pytest.fixture(params=["blobs", "glyphs"])
def family(request):
    return GaussianBlobs(seed=3) if request.param == "blobs" else PatternGlyphs(seed=3)


def test_episode_counts(family):
    ep = family.sample_episode("train", 0, way=5, shot=1, query=15)
    assert len(ep.x_support) == 5 and len(ep.x_target) == 75
    assert ep.x_support.shape[1:] == family.sample_shape
    for y, per_class in ((ep.y_support, 1), (ep.y_target, 15)):
        np.testing.assert_array_equal(np.bincount(y, minlength=5), per_class)
        assert set(np.unique(y)) == set(range(5))


def test_episode_determinism(family):
    a = family.sample_episode("val", 7, 5, 2, 3)
    b = family.sample_episode("val", 7, 5, 2, 3)
    assert a.equal(b)
    assert not a.equal(family.sample_episode("val", 8, 5, 2, 3))


def test_splits_disjoint(family):
    pools = [set(family.pool(s)) for s in ("train", "val", "test")]
    assert not (pools[0] & pools[1] or pools[0] & pools[2] or pools[1] & pools[2])


def test_overlapping_splits_rejected():
    with pytest.raises(ValueError, match="c1"):
        FileCorpus({"c0": np.ones((2, 1)), "c1": np.ones((2, 1))}, {"train": ["c0", "c1"], "val": ["c1"]})


def test_way_exceeding_pool_rejected():
    fam = GaussianBlobs(seed=0, split_sizes=(10, 3, 3))
    with pytest.raises(ValueError, match="way=4"):
        fam.sample_episode("val", 0, 4, 1, 1)


def test_label_assignment_varies_across_episodes(family):
    assignments = {family.sample_episode("train", i, 5, 1, 1).classes for i in range(10)}
    assert len(assignments) >= 2


def test_labels_are_consistent_with_classes():
    fam = GaussianBlobs(seed=1, noise=0.0)
    ep = fam.sample_episode("test", 4, 5, 2, 3)
    # with zero noise every sample equals its class prototype
    for label, cid in enumerate(ep.classes):
        proto = fam.prototypes[cid]
        assert np.all(np.abs(ep.x_support[ep.y_support == label] - proto).max(axis=1) == 0)
        assert np.all(np.abs(ep.x_target[ep.y_target == label] - proto).max(axis=1) == 0)


def test_zero_noise_nearest_prototype_is_perfect():
    fam = GaussianBlobs(seed=2, noise=0.0)
    for i in range(5):
        assert nearest_prototype_accuracy(fam.sample_episode("train", i, 5, 1, 15)) == 1.0


def test_low_noise_nearest_prototype_exceeds_95_percent():
    fam = GaussianBlobs(seed=0, noise=0.1, spread=1.0)
    accs = [nearest_prototype_accuracy(fam.sample_episode("test", i, 5, 1, 15)) for i in range(100)]
    assert np.mean(accs) > 0.95


def test_glyphs_are_binary_images():
    ep = PatternGlyphs(seed=0).sample_episode("train", 0, 5, 1, 2)
    assert ep.x_support.shape == (5, 1, 14, 14)
    assert set(np.unique(ep.x_support)) <= {0.0, 1.0}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 5), st.integers(1, 3), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_episode_invariants_hold_for_any_index(seed, way, shot, query, index):
    ep = GaussianBlobs(seed=seed, split_sizes=(6, 5, 5)).sample_episode("train", index, way, shot, query)
    assert ep.x_support.shape == (way * shot, 16) and ep.x_target.shape == (way * query, 16)
    np.testing.assert_array_equal(np.bincount(ep.y_target, minlength=way), query)
    assert len(set(ep.classes)) == way


def test_corpus_round_trip(tmp_path):
    fam = GaussianBlobs(seed=5, split_sizes=(12, 4, 4))
    corpus = fam.materialize(8)
    path = tmp_path / "c.bin"
    save_corpus(path, corpus)
    loaded = load_episode_file(path)
    assert [len(loaded.pool(s)) for s in ("train", "val", "test")] == [12, 4, 4]
    for split in ("train", "val", "test"):
        for i in range(3):
            assert corpus.sample_episode(split, i, 4, 2, 3).equal(loaded.sample_episode(split, i, 4, 2, 3))
    assert make_family("file_corpus", path=str(path)).pool("val") == loaded.pool("val")


def test_missing_declared_class_is_named(tmp_path):
    writer = ArrayWriter()
    rec = writer.add(np.ones((3, 2)))
    header = {"kind": "file_corpus", "manifest": {"train": ["alpha", "beta"]},
              "classes": [{"id": "alpha", "samples": rec}]}
    write_container(tmp_path / "c.bin", CORPUS_MAGIC, header, writer)
    with pytest.raises(FormatError, match="beta"):
        load_episode_file(tmp_path / "c.bin")


@pytest.mark.parametrize("header,pattern", [
    ({"kind": "images", "manifest": {}}, "kind"),
    ({"kind": "file_corpus"}, "manifest"),
    ({"kind": "file_corpus", "manifest": {"holdout": []}}, "holdout"),
    ({"kind": "file_corpus", "manifest": {}, "classes": [{"id": "a"}]}, "record 0"),
    ({"kind": "file_corpus", "manifest": {}, "classes": [{"id": "a", "samples": {"shape": [2, 2], "offset": 10 ** 6}}]},
     "record 0"),
])
def test_malformed_corpus_rejected(tmp_path, header, pattern):
    path = tmp_path / "c.bin"
    write_container(path, CORPUS_MAGIC, header, ArrayWriter())
    with pytest.raises(FormatError, match=pattern):
        load_episode_file(path)


def test_wrong_magic_and_truncation(tmp_path):
    path = tmp_path / "c.bin"
    save_corpus(path, GaussianBlobs(seed=0, split_sizes=(5, 5, 5)).materialize(4))
    raw = path.read_bytes()
    (tmp_path / "m").write_bytes(b"METACKPT" + raw[8:])
    (tmp_path / "t").write_bytes(raw[:20])
    for name in ("m", "t"):
        with pytest.raises(FormatError):
            load_episode_file(tmp_path / name)


def test_class_with_too_few_samples_rejected():
    corpus = GaussianBlobs(seed=0, split_sizes=(5, 5, 5)).materialize(3)
    with pytest.raises(ValueError, match="samples"):
        corpus.sample_episode("train", 0, 5, 2, 2)


def test_unknown_family_kind():
    with pytest.raises(ValueError):
        make_family("imagenet")
    with pytest.raises(ValueError):
        make_family("file_corpus")


def test_base_family_is_abstract():
    with pytest.raises(NotImplementedError):
        TaskFamily({"train": ["a"]}).sample_shape
