import numpy as np
import pytest

from endosr.data import (DatasetManifest, ManifestEntry, PairSample, build_manifest, cache_path, derive_seed,
                         iter_pairs, list_images, load_pair, split_manifest)
from endosr.errors import DatasetError, StorageError
from endosr.imagecore import DegradationConfig, degrade, divisible_crop, read_png, write_png


def fake_manifest(counts):
    entries = [ManifestEntry(f"{label}/{i:03d}.png", label) for label, n in counts.items() for i in range(n)]
    return DatasetManifest("/nowhere", tuple(entries))


def tiny_tree(root, classes=5, per_class=10, size=(4, 4)):
    for c in range(classes):
        for i in range(per_class):
            write_png(root / f"class{c}" / f"img{i:02d}.png", np.full(size + (3,), (c + 1) / 10))
    return root


def test_build_manifest_counts(tmp_path):
    m = build_manifest(tiny_tree(tmp_path))
    assert len(m) == 50
    assert m.classes == tuple(f"class{c}" for c in range(5))
    assert [e.path for e in m.entries] == sorted(e.path for e in m.entries)


def test_build_manifest_deterministic(tmp_path):
    tiny_tree(tmp_path, 2, 3)
    assert build_manifest(tmp_path).to_jsonl() == build_manifest(tmp_path).to_jsonl()


def test_min_resolution_filter(tmp_path):
    write_png(tmp_path / "a" / "big.png", np.zeros((1024, 1280, 3)))
    write_png(tmp_path / "a" / "small.png", np.zeros((576, 720, 3)))
    write_png(tmp_path / "b" / "small.png", np.zeros((20, 20, 3)))
    m = build_manifest(tmp_path, min_resolution=(1280, 1024))
    assert [e.path for e in m.entries] == ["a/big.png"]


def test_empty_manifest_reports_classes(tmp_path):
    write_png(tmp_path / "polyps" / "x.png", np.zeros((8, 8, 3)))
    with pytest.raises(DatasetError, match="polyps: 1 found, 1 below"):
        build_manifest(tmp_path, min_resolution=(100, 100))
    with pytest.raises(DatasetError):
        build_manifest(tmp_path / "missing")


def test_class_filter(tmp_path):
    tiny_tree(tmp_path, 3, 2)
    m = build_manifest(tmp_path, class_filter=["class1"])
    assert m.classes == ("class1",)


def test_manifest_round_trip(tmp_path):
    tiny_tree(tmp_path, 2, 5)
    m = split_manifest(build_manifest(tmp_path), (0.6, 0.2, 0.2), n_folds=2)
    m.write(tmp_path / "m.jsonl")
    back = DatasetManifest.read(tmp_path / "m.jsonl", tmp_path)
    assert back.entries == m.entries
    assert back.to_jsonl() == m.to_jsonl()


def test_duplicate_paths_rejected():
    with pytest.raises(DatasetError):
        DatasetManifest("/", (ManifestEntry("a/x.png", "a"), ManifestEntry("a/x.png", "a")))


def test_validation_constant_across_folds():
    m = fake_manifest({"c": 100})
    vals = [frozenset(e.path for e in split_manifest(m, (0.8, 0.1, 0.1), k, 5).subset("val")) for k in range(5)]
    assert len(vals[0]) == 10
    assert all(v == vals[0] for v in vals)


def test_test_folds_partition_pool():
    m = fake_manifest({"a": 30, "b": 20})
    splits = [split_manifest(m, (0.8, 0.1, 0.1), k, 5, seed=3) for k in range(5)]
    val = {e.path for e in splits[0].subset("val")}
    pool = {e.path for e in m.entries} - val
    tests = [{e.path for e in s.subset("test")} for s in splits]
    assert set().union(*tests) == pool
    for i in range(5):
        for j in range(i + 1, 5):
            assert not tests[i] & tests[j]
    for s, t in zip(splits, tests):
        train = {e.path for e in s.subset("train")}
        assert train == pool - t


def test_train_rotates_by_fold():
    m = fake_manifest({"a": 25})
    t0 = {e.path for e in split_manifest(m, fold_index=0).subset("train")}
    t1 = {e.path for e in split_manifest(m, fold_index=1).subset("train")}
    assert t0 != t1


def test_stratification_within_one_image():
    m = fake_manifest({"a": 37, "b": 50, "c": 13})
    s = split_manifest(m, (0.8, 0.1, 0.1), 0, n_folds=1, seed=9)
    counts = s.counts()
    for label, n in (("a", 37), ("b", 50), ("c", 13)):
        assert abs(counts.get((label, "val"), 0) - 0.1 * n) <= 1
        assert abs(counts.get((label, "test"), 0) - 0.1 * n) <= 1
        assert abs(counts.get((label, "train"), 0) - 0.8 * n) <= 1


def test_split_errors():
    m = fake_manifest({"a": 3})
    with pytest.raises(DatasetError):
        split_manifest(m, n_folds=5)
    with pytest.raises(DatasetError):
        split_manifest(m, (0.5, 0.2, 0.2), n_folds=1)
    with pytest.raises(DatasetError):
        split_manifest(m, fold_index=5, n_folds=3)


def test_split_seed_changes_assignment():
    m = fake_manifest({"a": 40})
    a = split_manifest(m, seed=0).subset("val")
    b = split_manifest(m, seed=1).subset("val")
    assert a != b


@pytest.mark.parametrize("scale,hr_wh,lr_wh", [(8, (1280, 1024), (160, 128)), (12, (1272, 1020), (106, 85))])
def test_load_pair_dimensions(tmp_path, scale, hr_wh, lr_wh):
    write_png(tmp_path / "c" / "x.png", np.full((1024, 1280, 3), 0.4))
    pair = load_pair(ManifestEntry("c/x.png", "c"), tmp_path, DegradationConfig(scale=scale))
    assert pair.hr.shape[:2] == (hr_wh[1], hr_wh[0])
    assert pair.lr.shape[:2] == (lr_wh[1], lr_wh[0])
    assert pair.scale == scale


def test_load_pair_deterministic_and_per_entry_noise(tmp_path):
    img = np.random.default_rng(0).random((32, 32, 3))
    write_png(tmp_path / "c" / "a.png", img)
    write_png(tmp_path / "c" / "b.png", img)
    cfg = DegradationConfig(scale=4, noise_sigma=0.05, seed=5)
    a1 = load_pair(ManifestEntry("c/a.png", "c"), tmp_path, cfg)
    a2 = load_pair(ManifestEntry("c/a.png", "c"), tmp_path, cfg)
    b = load_pair(ManifestEntry("c/b.png", "c"), tmp_path, cfg)
    assert a1.lr.tobytes() == a2.lr.tobytes()
    assert a1.lr.tobytes() != b.lr.tobytes()
    hr = divisible_crop(read_png(tmp_path / "c" / "a.png"), 4)
    want = degrade(hr, DegradationConfig(scale=4, noise_sigma=0.05, seed=derive_seed(5, "c/a.png")))
    np.testing.assert_array_equal(a1.lr, want)


def test_load_pair_cache(tmp_path):
    write_png(tmp_path / "data" / "c" / "a.png", np.random.default_rng(1).random((16, 16, 3)))
    entry = ManifestEntry("c/a.png", "c")
    cfg = DegradationConfig(scale=4)
    pair = load_pair(entry, tmp_path / "data", cfg, cache_dir=tmp_path / "cache")
    cached = cache_path(tmp_path / "cache", 4, "c/a.png")
    assert cached == tmp_path / "cache" / "4x" / "c" / "a.png.png"
    assert cached.exists()
    again = load_pair(entry, tmp_path / "data", cfg, cache_dir=tmp_path / "cache")
    assert np.max(np.abs(again.lr - pair.lr)) <= 0.5 / 255 + 1e-12


def test_load_pair_unreadable(tmp_path):
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "bad.png").write_bytes(b"not a png")
    with pytest.raises(StorageError, match="bad.png"):
        load_pair(ManifestEntry("c/bad.png", "c"), tmp_path, DegradationConfig(scale=2))


def test_pair_sample_checks_scale():
    with pytest.raises(DatasetError):
        PairSample(np.zeros((4, 4, 3)), np.zeros((8, 12, 3)), "c", "x")


def test_iter_pairs_preserves_order(tmp_path):
    tiny_tree(tmp_path, 2, 3, size=(8, 8))
    m = build_manifest(tmp_path)
    cfg = DegradationConfig(scale=2)
    got = [p.source_path for p in iter_pairs(m.entries, tmp_path, cfg, prefetch=2)]
    assert got == [e.path for e in m.entries]
    assert [p.source_path for p in iter_pairs(m.entries, tmp_path, cfg, prefetch=0)] == got


def test_iter_pairs_surfaces_errors(tmp_path):
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "bad.png").write_bytes(b"xx")
    with pytest.raises(StorageError):
        list(iter_pairs([ManifestEntry("c/bad.png", "c")], tmp_path, DegradationConfig(scale=2)))


def test_list_images_includes_root_files(tmp_path):
    write_png(tmp_path / "top.png", np.zeros((4, 4, 3)))
    write_png(tmp_path / "k" / "inner.png", np.zeros((4, 4, 3)))
    got = [(e.path, e.class_label) for e in list_images(tmp_path)]
    assert got == [("k/inner.png", "k"), ("top.png", "")]
