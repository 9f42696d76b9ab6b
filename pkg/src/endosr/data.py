"""Dataset discovery, stratified fold splitting and LR/HR pair loading.

Layout mirrors the class-per-folder convention::

    root/<anything>/<class-name>/<image>.png

The class label is the image's immediate parent directory name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import queue
import threading
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DatasetError, StorageError
from .imagecore import DegradationConfig, degrade, divisible_crop, image_size, read_png, write_png

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # POSIX path relative to the manifest root
    class_label: str
    split: str = "train"

    def to_record(self) -> dict:
        return {"path": self.path, "class": self.class_label, "split": self.split}


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DatasetError("manifest paths must be unique")
        bad = {e.split for e in self.entries} - set(SPLITS)
        if bad:
            raise DatasetError(f"unknown split tags {sorted(bad)}")

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(sorted({e.class_label for e in self.entries}))

    def counts(self) -> dict[tuple[str, str], int]:
        return dict(Counter((e.class_label, e.split) for e in self.entries))

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_record(), sort_keys=True) + "\n" for e in self.entries)

    def write(self, path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_jsonl(), encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def read(cls, path, root) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise StorageError(f"cannot read manifest {path}: {exc}") from exc
        entries = []
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(ManifestEntry(rec["path"], rec["class"], rec["split"]))
            except (ValueError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        return cls(Path(root), tuple(entries))


def build_manifest(root_dir, class_filter: Sequence[str] | None = None,
                   min_resolution: tuple[int, int] | None = None) -> DatasetManifest:
    """Scan ``root_dir`` for images; ``min_resolution`` is (width, height)."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    wanted = set(class_filter) if class_filter else None
    found: Counter = Counter()
    too_small: Counter = Counter()
    entries = []
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        label = p.parent.name
        if p.parent == root or (wanted is not None and label not in wanted):
            continue
        found[label] += 1
        if min_resolution is not None:
            h, w = image_size(p)
            if w < min_resolution[0] or h < min_resolution[1]:
                too_small[label] += 1
                continue
        entries.append(ManifestEntry(p.relative_to(root).as_posix(), label))
    if not entries:
        per_class = ", ".join(f"{c}: {found[c]} found, {too_small[c]} below min resolution"
                              for c in sorted(found)) or "no class folders with images"
        want = f" (class filter {sorted(wanted)})" if wanted else ""
        raise DatasetError(f"no usable images under {root}{want}; {per_class}")
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(root, tuple(entries))


def list_images(root_dir) -> list[ManifestEntry]:
    """Every image under ``root_dir`` in path order; files directly in the root get an empty class label."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"input directory {root} does not exist")
    entries = [ManifestEntry(p.relative_to(root).as_posix(), "" if p.parent == root else p.parent.name)
               for p in sorted(root.rglob("*")) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    if not entries:
        raise DatasetError(f"no images under {root}")
    return entries


def _class_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])


def split_manifest(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), fold_index: int = 0,
                   n_folds: int = 5, seed: int = 0) -> DatasetManifest:
    """Stratified train/val/test assignment with rotating test folds.

    Per class, the sorted file list is shuffled with a seed derived from
    ``seed`` and the class name. The first ``round(f_val * n)`` files form the
    validation set, which does not depend on ``fold_index``. The remaining pool
    is cut into ``n_folds`` contiguous chunks; chunk ``fold_index`` is the test
    set and the rest is training data, so the test sets of all folds partition
    the pool. With ``n_folds == 1`` the test set is ``round(f_test * n)`` files
    of the pool instead.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    if n_folds < 1 or not 0 <= fold_index < n_folds:
        raise DatasetError(f"fold_index must be in [0, {n_folds}), got {fold_index}")
    by_class: dict[str, list[ManifestEntry]] = {}
    for e in sorted(manifest.entries, key=lambda e: e.path):
        by_class.setdefault(e.class_label, []).append(e)
    tags: dict[str, str] = {}
    for label, items in sorted(by_class.items()):
        if len(items) < n_folds:
            raise DatasetError(f"class {label!r} has {len(items)} images, fewer than {n_folds} folds")
        order = _class_rng(seed, label).permutation(len(items))
        shuffled = [items[i] for i in order]
        n_val = int(round(fractions[1] * len(items)))
        val, pool = shuffled[:n_val], shuffled[n_val:]
        if n_folds == 1:
            n_test = int(round(fractions[2] * len(items)))
            test = pool[:n_test]
        else:
            bounds = np.linspace(0, len(pool), n_folds + 1).round().astype(int)
            test = pool[bounds[fold_index] : bounds[fold_index + 1]]
        for e in val:
            tags[e.path] = "val"
        for e in test:
            tags[e.path] = "test"
    entries = tuple(dataclasses.replace(e, split=tags.get(e.path, "train")) for e in manifest.entries)
    return DatasetManifest(manifest.root, entries)


def derive_seed(seed: int, key: str) -> int:
    """Stable 64-bit per-item seed so each image gets its own noise field."""
    digest = hashlib.blake2b(f"{int(seed)}:{key}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class PairSample:
    lr: np.ndarray
    hr: np.ndarray
    class_label: str
    source_path: str

    def __post_init__(self):
        lh, lw = self.lr.shape[:2]
        hh, hw = self.hr.shape[:2]
        if hh % lh or hw % lw or hh // lh != hw // lw:
            raise DatasetError(f"HR {hh}x{hw} is not an integer multiple of LR {lh}x{lw}")

    @property
    def scale(self) -> int:
        return self.hr.shape[0] // self.lr.shape[0]


def cache_path(cache_dir, scale: int, rel_path: str) -> Path:
    return Path(cache_dir) / f"{scale}x" / f"{rel_path}.png"


def load_pair(entry: ManifestEntry, root, cfg: DegradationConfig, cache_dir=None) -> PairSample:
    """Read the HR file, crop it to a multiple of the scale and synthesize the LR image."""
    hr = divisible_crop(read_png(Path(root) / entry.path), cfg.scale)
    cached = cache_path(cache_dir, cfg.scale, entry.path) if cache_dir is not None else None
    if cached is not None and cached.exists():
        lr = read_png(cached)
    else:
        item_cfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, entry.path), blur_kernel=cfg.blur_kernel)
        lr = degrade(hr, item_cfg)
        if cached is not None:
            write_png(cached, lr)
    return PairSample(lr, hr, entry.class_label, entry.path)


def iter_pairs(entries: Sequence[ManifestEntry], root, cfg: DegradationConfig, prefetch: int = 2,
               cache_dir=None) -> Iterator[PairSample]:
    """Yield pairs in ``entries`` order, decoding up to ``prefetch`` ahead on a worker thread."""
    if prefetch <= 0:
        for e in entries:
            yield load_pair(e, root, cfg, cache_dir)
        return
    q: queue.Queue = queue.Queue(maxsize=prefetch)
    stop = threading.Event()
    done = object()

    def worker():
        try:
            for e in entries:
                if stop.is_set():
                    return
                q.put(load_pair(e, root, cfg, cache_dir))
        except Exception as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(0.01)
