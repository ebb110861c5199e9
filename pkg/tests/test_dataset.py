from pathlib import Path

import numpy as np
import pytest

from lungseg.dataset import (
    Manifest,
    SampleRecord,
    batch_iter,
    load_sample,
    merge_manifests,
    read_manifest,
    scan_dataset,
    split,
    split_counts,
    write_manifest,
    write_skipped_report,
)
from lungseg.errors import DataIOError, UsageError
from lungseg.imaging import write_gray, write_mask, write_phantom_set


def fake_records(n, source="synthetic", prefix="s"):
    masks = (Path("l.png"), Path("r.png")) if source == "montgomery" else (Path("m.png"),)
    return [SampleRecord(f"{prefix}{i:04d}", Path(f"{prefix}{i}.png"), masks, source) for i in range(n)]


@pytest.fixture
def montgomery_tree(tmp_path):
    root = tmp_path / "MontgomerySet"
    for sub in ("CXR_png", "ManualMask/leftMask", "ManualMask/rightMask"):
        (root / sub).mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(3):
        stem = f"MCUCXR_{i:04d}_0"
        write_gray(root / "CXR_png" / f"{stem}.png", rng.integers(0, 256, (40, 36), dtype=np.uint8))
        left = np.zeros((40, 36), np.uint8)
        left[10:30, 4:14] = 1
        right = np.zeros((40, 36), np.uint8)
        right[10:30, 22:32] = 1
        write_mask(root / "ManualMask" / "leftMask" / f"{stem}.png", left)
        write_mask(root / "ManualMask" / "rightMask" / f"{stem}.png", right)
    write_gray(root / "CXR_png" / "MCUCXR_9999_1.png", np.zeros((40, 36), np.uint8))
    return root


def test_scan_montgomery(montgomery_tree):
    man = scan_dataset(montgomery_tree, "montgomery")
    assert len(man) == 3
    assert all(len(r.masks) == 2 and r.source == "montgomery" for r in man.records)
    assert [p for p, _ in man.skipped] == [str(montgomery_tree / "CXR_png" / "MCUCXR_9999_1.png")]
    assert "MCUCXR_9999_1" not in {r.id for r in man.records}


def test_scan_shenzhen(tmp_path):
    root = tmp_path / "ChinaSet"
    (root / "CXR_png").mkdir(parents=True)
    (root / "mask").mkdir()
    for i in range(2):
        write_gray(root / "CXR_png" / f"CHNCXR_{i:04d}_0.png", np.zeros((8, 8), np.uint8))
    write_mask(root / "mask" / "CHNCXR_0000_0_mask.png", np.ones((8, 8), np.uint8))
    man = scan_dataset(root, "shenzhen")
    assert [r.id for r in man.records] == ["CHNCXR_0000_0"]
    assert len(man.records[0].masks) == 1 and len(man.skipped) == 1


def test_scan_generic_and_errors(tmp_path):
    write_phantom_set(tmp_path / "g", 4, 32, seed=0)
    write_gray(tmp_path / "g" / "orphan.pgm", np.zeros((32, 32), np.uint8))
    man = scan_dataset(tmp_path / "g", "generic")
    assert len(man) == 4 and man.skipped[0][0].endswith("orphan.pgm")
    with pytest.raises(DataIOError):
        scan_dataset(tmp_path / "missing", "generic")
    (tmp_path / "empty").mkdir()
    write_gray(tmp_path / "empty" / "lonely.png", np.zeros((4, 4), np.uint8))
    with pytest.raises(UsageError, match="lonely.png"):
        scan_dataset(tmp_path / "empty", "generic")
    with pytest.raises(UsageError):
        scan_dataset(tmp_path / "g", "jsrt")


def test_record_invariants():
    with pytest.raises(UsageError):
        SampleRecord("a", Path("a.png"), (Path("m.png"),), "montgomery")
    with pytest.raises(UsageError):
        SampleRecord("a", Path("a.png"), (Path("m.png"), Path("n.png")), "shenzhen")
    with pytest.raises(UsageError):
        Manifest(fake_records(2) + fake_records(1))


# -- split ----------------------------------------------------------------------

def test_split_100():
    man = split(Manifest(fake_records(100)), seed=0)
    counts = man.counts()
    assert (counts["train"], counts["val"], counts["test"]) == (72, 8, 20)
    assert counts["unassigned"] == 0
    ids = [set(r.id for r in man.subset(s)) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == {r.id for r in man.records}


def test_split_deterministic_and_seed_sensitive():
    base = Manifest(fake_records(50))
    a = [r.split for r in split(base, 3).records]
    assert a == [r.split for r in split(base, 3).records]
    assert a != [r.split for r in split(base, 4).records]


@pytest.mark.parametrize("n,expected", [
    (3, (2, 0, 1)),       # test round(0.6)=1, val round(0.2)=0
    (10, (7, 1, 2)),      # val round(0.8)=1
    (138, (99, 11, 28)),  # test round(27.6)=28, val round(11.0)=11
    (615, (443, 49, 123)),  # val round(49.2)=49
    (753, (542, 60, 151)),  # test round(150.6)=151, val round(60.2)=60
    (47, (34, 4, 9)),     # test round(9.4)=9, val round(3.8)=4
    (57, (41, 5, 11)),    # test round(11.4)=11, val 0.1*46 = 4.6 -> 5
    (55, (40, 4, 11)),    # val 0.1*44 = 4.4 -> 4
    (56, (40, 5, 11)),    # test 11.2 -> 11, val 0.1*45 = 4.5 exactly -> 5 (half up)
])
def test_split_counts_hand_values(n, expected):
    assert split_counts(n) == expected


def test_split_pooled_dataset_sizes():
    pooled = merge_manifests(Manifest(fake_records(138, "montgomery", "MCU")),
                             Manifest(fake_records(615, "shenzhen", "CHN")))
    man = split(pooled, seed=1)
    assert sum(man.counts()[s] for s in ("train", "val", "test")) == 753


def test_split_too_small():
    with pytest.raises(UsageError):
        split(Manifest(fake_records(2)), seed=0)


# -- loading / batches ----------------------------------------------------------

def test_load_montgomery_union_then_dilate(montgomery_tree):
    rec = scan_dataset(montgomery_tree, "montgomery").records[0]
    img, mask = load_sample(rec, 40, dilate_iterations=1)
    assert img.shape == (40, 40) and 0.0 <= img.min() and img.max() <= 1.0
    assert set(np.unique(mask)) == {0, 1}
    _, undilated = load_sample(rec, 40, dilate_iterations=0)
    assert mask.sum() > undilated.sum() and (mask >= undilated).all()


def test_load_generic_no_dilation(tmp_path):
    pairs = write_phantom_set(tmp_path, 1, 32, seed=5)
    rec = scan_dataset(tmp_path, "generic").records[0]
    _, mask = load_sample(rec, 32, dilate_iterations=3)
    from lungseg.imaging import read_mask
    np.testing.assert_array_equal(mask, read_mask(pairs[0][1]))


@pytest.fixture
def phantom_manifest(tmp_path):
    write_phantom_set(tmp_path / "p", 10, 32, seed=1)
    man = scan_dataset(tmp_path / "p", "generic")
    return Manifest([r.__class__(r.id, r.image, r.masks, r.source, "train") for r in man.records])


def test_batch_sizes_and_content(phantom_manifest):
    batches = list(batch_iter(phantom_manifest, "train", 4, epoch_seed=0, size=32))
    assert [b[0].shape[0] for b in batches] == [4, 4, 2]
    for img, m in batches:
        assert img.shape[1:] == (1, 32, 32) and m.shape == img.shape
        assert set(np.unique(m.data)) <= {0.0, 1.0}
        assert img.data.min() >= 0 and img.data.max() <= 1


def test_batch_determinism_and_coverage(phantom_manifest):
    def run(seed, aug):
        return [(i.data.tobytes(), m.data.tobytes())
                for i, m in batch_iter(phantom_manifest, "train", 3, seed, augment=aug, size=32)]

    assert run(5, True) == run(5, True)
    assert run(5, True) != run(6, True)
    imgs = np.concatenate([i.data for i, _ in batch_iter(phantom_manifest, "train", 3, 7, size=32)])
    ref = np.stack([load_sample(r, 32)[0] for r in phantom_manifest.records]).astype(np.float32)
    # every member exactly once: sorting rows by content must reproduce the reference set
    key = lambda a: sorted(x.tobytes() for x in a.reshape(len(a), -1))
    assert key(imgs) == key(ref)


def test_batch_cache_matches_uncached(phantom_manifest):
    cache = {}
    a = [b[0].data for b in batch_iter(phantom_manifest, "train", 4, 1, size=32, cache=cache)]
    b = [b[0].data for b in batch_iter(phantom_manifest, "train", 4, 1, size=32, cache=cache)]
    assert len(cache) == 10 and all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_batch_errors(phantom_manifest, tmp_path):
    with pytest.raises(UsageError):
        next(batch_iter(phantom_manifest, "test", 4, 0, size=32))
    broken = Manifest([SampleRecord("x", tmp_path / "gone.png", (tmp_path / "gone_mask.png",), "generic", "train")])
    with pytest.raises(DataIOError, match="gone.png"):
        next(batch_iter(broken, "train", 1, 0, size=32))


def test_manifest_tsv_round_trip(montgomery_tree, tmp_path):
    man = split(scan_dataset(montgomery_tree, "montgomery"), seed=0)
    write_manifest(man, tmp_path / "m.tsv")
    text = (tmp_path / "m.tsv").read_text()
    assert "id\timage_path\tmask_paths\tsource\tsplit" in text
    back = read_manifest(tmp_path / "m.tsv")
    assert back.records == man.records
    assert back.provenance["seed"] == "0"
    write_skipped_report(man, tmp_path / "skipped.txt")
    assert "MCUCXR_9999_1.png\tmissing left mask" in (tmp_path / "skipped.txt").read_text()
