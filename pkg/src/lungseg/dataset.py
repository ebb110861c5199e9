"""Dataset discovery, train/val/test splitting and batch streaming.

Supported directory layouts (``root`` is what the user passes in):

``montgomery``
    ``CXR_png/<stem>.png`` with ``ManualMask/leftMask/<stem>.png`` and
    ``ManualMask/rightMask/<stem>.png``.
``shenzhen``
    ``CXR_png/<stem>.png`` with one mask in ``mask/`` or ``masks/``, named
    ``<stem>_mask.png`` or ``<stem>.png``.
``generic``
    ``<stem>.png`` next to ``<stem>_mask.png`` anywhere under ``root``
    (``.pgm`` works in place of ``.png``).

When ``CXR_png/`` is absent the images are looked up directly in ``root``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import Tensor
from .errors import DataIOError, FormatError, UsageError
from .imaging import AugmentParams, augment as augment_pair, dilate, normalize, read_gray, read_mask, resize, union_masks

LAYOUTS = ("montgomery", "shenzhen", "generic")
SOURCES = ("montgomery", "shenzhen", "generic", "synthetic")
SPLITS = ("train", "val", "test", "unassigned")
IMAGE_EXTS = (".png", ".pgm")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image: Path
    masks: tuple[Path, ...]
    source: str
    split: str = "unassigned"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise UsageError(f"unknown source tag {self.source!r}")
        if self.split not in SPLITS:
            raise UsageError(f"unknown split {self.split!r}")
        want = 2 if self.source == "montgomery" else 1
        if len(self.masks) != want:
            raise UsageError(f"{self.source} record {self.id} needs {want} mask path(s), got {len(self.masks)}")


@dataclass
class Manifest:
    records: list[SampleRecord]
    provenance: dict[str, str] = field(default_factory=dict)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise UsageError(f"duplicate sample ids in manifest: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def counts(self) -> dict[str, int]:
        return {s: len(self.subset(s)) for s in SPLITS}


def merge_manifests(*manifests: Manifest) -> Manifest:
    """Pool several scans into one manifest (ids must stay unique)."""
    records = [r for m in manifests for r in m.records]
    roots = ";".join(m.provenance.get("roots", "") for m in manifests if m.provenance.get("roots"))
    return Manifest(records, {"roots": roots}, [s for m in manifests for s in m.skipped])


# -- scanning -----------------------------------------------------------------

def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTS and not p.stem.endswith("_mask"))


def _first_existing(candidates) -> Path | None:
    for c in candidates:
        if c.is_file():
            return c
    return None


def _with_exts(base: Path, stem: str) -> list[Path]:
    return [base / f"{stem}{ext}" for ext in IMAGE_EXTS]


def scan_dataset(root, layout: str) -> Manifest:
    root = Path(root)
    if layout not in LAYOUTS:
        raise UsageError(f"unknown layout {layout!r}; expected one of {', '.join(LAYOUTS)}")
    if not root.is_dir():
        raise DataIOError(f"dataset root {root} does not exist")

    records: list[SampleRecord] = []
    skipped: list[tuple[str, str]] = []
    if layout == "generic":
        for img in sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTS):
            if img.stem.endswith("_mask"):
                continue
            mask = _first_existing(_with_exts(img.parent, f"{img.stem}_mask"))
            if mask is None:
                skipped.append((str(img), "no <stem>_mask file"))
                continue
            rid = img.relative_to(root).with_suffix("").as_posix()
            records.append(SampleRecord(rid, img, (mask,), "generic"))
    else:
        img_dir = root / "CXR_png" if (root / "CXR_png").is_dir() else root
        for img in _images_in(img_dir):
            stem = img.stem
            if layout == "montgomery":
                left = _first_existing(_with_exts(root / "ManualMask" / "leftMask", stem))
                right = _first_existing(_with_exts(root / "ManualMask" / "rightMask", stem))
                if left is None or right is None:
                    side = "left" if left is None else "right"
                    skipped.append((str(img), f"missing {side} mask"))
                    continue
                records.append(SampleRecord(stem, img, (left, right), "montgomery"))
            else:
                candidates = []
                for sub in ("mask", "masks", "ManualMask"):
                    candidates += _with_exts(root / sub, f"{stem}_mask") + _with_exts(root / sub, stem)
                mask = _first_existing(candidates)
                if mask is None:
                    skipped.append((str(img), "no matching mask"))
                    continue
                records.append(SampleRecord(stem, img, (mask,), "shenzhen"))

    if not records:
        report = "\n".join(f"{p}\t{why}" for p, why in skipped) or "(no images found)"
        raise UsageError(f"no image/mask pairs found under {root} ({layout} layout)\n{report}")
    return Manifest(records, {"roots": str(root), "layout": layout}, skipped)


# -- splitting ----------------------------------------------------------------

def _round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)) // 1)


def split_counts(n: int, test_frac: float = 0.2, val_frac_of_train: float = 0.1) -> tuple[int, int, int]:
    """(train, val, test) sizes; fractions are applied exactly, rounding half up."""
    n_test = _round_half_up(Fraction(str(test_frac)) * n)
    n_val = _round_half_up(Fraction(str(val_frac_of_train)) * (n - n_test))
    return n - n_test - n_val, n_val, n_test


def split(manifest: Manifest, seed: int, test_frac: float = 0.2, val_frac_of_train: float = 0.1) -> Manifest:
    """Seeded shuffle into test / val / train; record order is preserved."""
    n = len(manifest)
    if n < 3:
        raise UsageError(f"need at least 3 samples to split, got {n}")
    if not (0 <= test_frac < 1 and 0 <= val_frac_of_train < 1):
        raise UsageError("split fractions must lie in [0, 1)")
    _, n_val, n_test = split_counts(n, test_frac, val_frac_of_train)
    order = np.random.default_rng(seed).permutation(n)
    assign = ["train"] * n
    for k, idx in enumerate(order):
        if k < n_test:
            assign[idx] = "test"
        elif k < n_test + n_val:
            assign[idx] = "val"
    records = [replace(r, split=s) for r, s in zip(manifest.records, assign)]
    prov = dict(manifest.provenance, seed=str(seed), test_frac=str(test_frac),
                val_frac_of_train=str(val_frac_of_train))
    return Manifest(records, prov, list(manifest.skipped))


# -- loading and batching -----------------------------------------------------

def load_sample(record: SampleRecord, size: int, dilate_iterations: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Image in [0, 1] and binary mask, both resized to ``size`` x ``size``.

    Montgomery left/right masks are merged and dilated; other sources pass through.
    """
    img = read_gray(record.image)
    if record.source == "montgomery":
        mask = union_masks(read_mask(record.masks[0]), read_mask(record.masks[1]))
        if dilate_iterations > 0:
            mask = dilate(mask, dilate_iterations)
    else:
        mask = read_mask(record.masks[0])
    img = resize(img, size, size, "bilinear")
    mask = resize(mask, size, size, "nearest")
    return normalize(img), mask


def batch_iter(manifest: Manifest, split_name: str, batch_size: int, epoch_seed: int, augment: bool = False,
               size: int = 512, dilate_iterations: int = 1, aug_params: AugmentParams = AugmentParams(),
               dtype=np.float32, cache: dict | None = None,
               shuffle: bool = True) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield (images, masks) tensors of shape (B, 1, size, size) in a seeded order.

    With ``shuffle=False`` samples come in manifest order. The final batch may be short. ``cache`` (id -> preprocessed pair) skips
    re-reading files across epochs; augmentation is never cached.
    """
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    members = [(i, r) for i, r in enumerate(manifest.records) if r.split == split_name]
    if not members:
        raise UsageError(f"split {split_name!r} is empty")
    order = np.random.default_rng(epoch_seed).permutation(len(members)) if shuffle else np.arange(len(members))
    for start in range(0, len(order), batch_size):
        imgs, masks = [], []
        for k in order[start:start + batch_size]:
            index, rec = members[k]
            if cache is not None and rec.id in cache:
                img, mask = cache[rec.id]
            else:
                img, mask = load_sample(rec, size, dilate_iterations)
                if cache is not None:
                    cache[rec.id] = (img, mask)
            if augment:
                img, mask = augment_pair(img, mask, np.random.default_rng([epoch_seed, index]), aug_params)
            imgs.append(img)
            masks.append(mask)
        yield (Tensor(np.stack(imgs)[:, None].astype(dtype)),
               Tensor(np.stack(masks)[:, None].astype(dtype)))


# -- persistence --------------------------------------------------------------

MANIFEST_COLUMNS = ("id", "image_path", "mask_paths", "source", "split")


def write_manifest(manifest: Manifest, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            for key, value in manifest.provenance.items():
                fh.write(f"# {key}={value}\n")
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in manifest.records:
                w.writerow([r.id, str(r.image), ";".join(str(m) for m in r.masks), r.source, r.split])
    except OSError as exc:
        raise DataIOError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> Manifest:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    prov = {}
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            prov[key] = value
        elif line:
            body.append(line)
    rows = list(csv.reader(body, delimiter="\t"))
    if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
        raise FormatError(f"{path}: manifest header must be {' '.join(MANIFEST_COLUMNS)}")
    records = []
    for row in rows[1:]:
        if len(row) != len(MANIFEST_COLUMNS):
            raise FormatError(f"{path}: malformed manifest row {row!r}")
        rid, image, masks, source, split_name = row
        try:
            records.append(SampleRecord(rid, Path(image), tuple(Path(m) for m in masks.split(";")), source, split_name))
        except UsageError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return Manifest(records, prov)


def write_skipped_report(manifest: Manifest, path) -> None:
    try:
        Path(path).write_text("".join(f"{p}\t{why}\n" for p, why in manifest.skipped))
    except OSError as exc:
        raise DataIOError(f"cannot write skipped report {path}: {exc}") from exc
