"""Dataset indexing, pair sampling and image loading.

Images live in the canonical [-1, 1] range everywhere inside the package.
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetPathError, DecodeError, EmptyDatasetError, InsufficientIdentitiesError

log = logging.getLogger(__name__)

LAYOUTS = ("market1501", "dukemtmc", "face_folder", "synthetic")
SPLITS = ("train", "query", "gallery")
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
JUNK_ID = -1

# identity then camera token, e.g. 0002_c2s1_000002_00.jpg or 0001_c2_f0046182.jpg
_REID_NAME = re.compile(r"^(-?\d+)_c(\d+)")

_REID_SPLIT_DIRS = {
    "bounding_box_train": "train",
    "query": "query",
    "bounding_box_test": "gallery",
}

DEFAULT_PERSON_SIZE = (256, 128)
DEFAULT_FACE_SIZE = (160, 160)


@dataclass(frozen=True)
class PersonRecord:
    image_path: Path
    identity: int
    camera: int
    split: str

    @property
    def is_junk(self) -> bool:
        return self.identity == JUNK_ID


@dataclass
class DatasetIndex:
    records: list[PersonRecord]
    layout: str
    num_identities: int = field(init=False)

    def __post_init__(self):
        self.num_identities = len({r.identity for r in self.records if not r.is_junk})

    def split(self, name: str) -> list[PersonRecord]:
        return [r for r in self.records if r.split == name]

    def subset(self, split: str) -> "DatasetIndex":
        return DatasetIndex(self.split(split), self.layout)

    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records if not r.is_junk})

    def write_manifest(self, path) -> None:
        """Write the index as ``path,identity,camera,split`` CSV rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "identity", "camera", "split"])
            for r in self.records:
                writer.writerow([str(r.image_path), r.identity, r.camera, r.split])

    @classmethod
    def read_manifest(cls, path, layout="synthetic") -> "DatasetIndex":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        records = [
            PersonRecord(Path(row["path"]), int(row["identity"]), int(row["camera"]), row["split"])
            for row in rows
        ]
        return cls(records, layout)


def _image_files(folder: Path):
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _scan_reid_folder(folder: Path, split: str) -> list[PersonRecord]:
    records = []
    for path in _image_files(folder):
        m = _REID_NAME.match(path.name)
        if m is None:
            log.warning("skipping file with unparsable name: %s", path)
            continue
        records.append(PersonRecord(path, int(m.group(1)), int(m.group(2)), split))
    return records


def _scan_face_tree(root: Path, split: str, id_map: dict) -> list[PersonRecord]:
    records = []
    for person_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = _image_files(person_dir)
        if not files:
            continue
        ident = id_map.setdefault(person_dir.name, len(id_map))
        records.extend(PersonRecord(p, ident, 0, split) for p in files)
    return records


def scan_dataset(root, layout: str = "market1501") -> DatasetIndex:
    """Index every image under ``root`` that follows the layout's naming.

    Re-ID layouts read ``bounding_box_train/``, ``query/`` and
    ``bounding_box_test/``; pointing ``root`` directly at one of those
    folders indexes just that split. ``face_folder`` expects one directory
    per identity, optionally grouped under ``train/``, ``query/``,
    ``gallery/``.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetPathError(f"dataset root does not exist: {root}")

    records: list[PersonRecord] = []
    if layout == "face_folder":
        id_map: dict = {}
        grouped = [s for s in SPLITS if (root / s).is_dir()]
        if grouped:
            for s in grouped:
                records.extend(_scan_face_tree(root / s, s, id_map))
        else:
            records.extend(_scan_face_tree(root, "train", id_map))
    else:
        subdirs = [(root / d, s) for d, s in _REID_SPLIT_DIRS.items() if (root / d).is_dir()]
        if subdirs:
            for folder, split in subdirs:
                records.extend(_scan_reid_folder(folder, split))
        else:
            split = _REID_SPLIT_DIRS.get(root.name, "gallery" if root.name == "gallery" else "train")
            records.extend(_scan_reid_folder(root, split))

    if not records:
        raise EmptyDatasetError(f"no parsable images under {root} for layout {layout}")
    return DatasetIndex(records, layout)


def sample_pair(index: DatasetIndex, mode: str, seed: int, split: str | None = None):
    """Draw a (source, target) record pair; target is None when untargeted.

    Junk records are never drawn. Targets always carry a different identity.
    """
    if mode not in ("targeted", "untargeted"):
        raise ValueError(f"unknown mode {mode!r}")
    pool = [r for r in index.records if not r.is_junk and (split is None or r.split == split)]
    if not pool:
        raise EmptyDatasetError("no usable records to sample from")
    rng = np.random.default_rng(seed)
    if mode == "targeted" and len({r.identity for r in pool}) < 2:
        raise InsufficientIdentitiesError("targeted sampling needs at least two identities")
    source = pool[rng.integers(len(pool))]
    if mode == "untargeted":
        return source, None
    others = [r for r in pool if r.identity != source.identity]
    return source, others[rng.integers(len(others))]


def load_image(record_or_path, height: int, width: int) -> np.ndarray:
    """Decode to an H x W x 3 float32 array in [-1, 1] (bilinear resize)."""
    path = Path(getattr(record_or_path, "image_path", record_or_path))
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (width, height):
                im = im.resize((width, height), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return np.clip(arr / 127.5 - 1.0, -1.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 8-bit with round-half-up."""
    scaled = (np.clip(image, -1.0, 1.0) + 1.0) * 127.5
    return np.floor(scaled + 0.5).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    """Save an H x W x 3 (or 3 x H x W) canonical-range array as 8-bit."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[-1] != 3:
        image = image.transpose(1, 2, 0)
    Image.fromarray(to_uint8(image)).save(path)


def load_batch(records, height: int, width: int) -> np.ndarray:
    """Stack records into an N x 3 x H x W float32 array."""
    return np.stack([load_image(r, height, width).transpose(2, 0, 1) for r in records])
