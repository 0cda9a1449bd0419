"""Core records shared by every stage: zones, slices, label maps, manifests."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError, SchemaError

GRID = 256


class ZoneLabel(enum.IntEnum):
    BG = 0
    CZ = 1
    PZ = 2
    TZ = 3
    TUM = 4


NUM_CLASSES = len(ZoneLabel)
PROSTATE_ZONES = (ZoneLabel.CZ, ZoneLabel.PZ, ZoneLabel.TZ, ZoneLabel.TUM)


@dataclass
class SliceImage:
    patient_id: str
    slice_index: int
    pixels: np.ndarray  # float64, (H, W), values in [0, 1]

    @property
    def key(self) -> tuple[str, int]:
        return (self.patient_id, self.slice_index)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Contour:
    zone: ZoneLabel
    vertices: tuple[tuple[int, int], ...]
    contour_id: int = 0


@dataclass
class ContourSet:
    patient_id: str
    slice_index: int
    contours: list[Contour] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, int]:
        return (self.patient_id, self.slice_index)


def one_hot(classes: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """(H, W) integer labels to an (H, W, C) float32 one-hot stack."""
    return np.eye(num_classes, dtype=np.float32)[classes]


@dataclass
class LabelMap:
    classes: np.ndarray  # uint8, (H, W)
    patient_id: str = ""
    slice_index: int = 0

    @property
    def key(self) -> tuple[str, int]:
        return (self.patient_id, self.slice_index)

    @property
    def one_hot(self) -> np.ndarray:
        return one_hot(self.classes)

    @classmethod
    def from_one_hot(cls, stack: np.ndarray, **ident) -> "LabelMap":
        return cls(np.argmax(stack, axis=-1).astype(np.uint8), **ident)


@dataclass
class Sample:
    image: np.ndarray  # float, (H, W)
    mask: np.ndarray  # uint8, (H, W)
    patient_id: str = ""
    slice_index: int = 0

    @property
    def one_hot(self) -> np.ndarray:
        return one_hot(self.mask)


class Provenance(str, enum.Enum):
    ORIGINAL = "ORIGINAL"
    AUGMENTED = "AUGMENTED"


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    slice_index: int
    image_path: str  # relative to the manifest root
    mask_path: str
    provenance: Provenance = Provenance.ORIGINAL
    transform_id: int = 0

    @property
    def key(self) -> tuple[str, int]:
        return (self.patient_id, self.slice_index)

    @property
    def unique_key(self) -> tuple[str, int, str, int]:
        return (self.patient_id, self.slice_index, self.provenance.value, self.transform_id)


MANIFEST_COLUMNS = ("patient_id", "slice_index", "image_path", "mask_path", "provenance", "transform_id")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int = 0
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def patients(self) -> list[str]:
        return sorted({e.patient_id for e in self.entries})

    def originals(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.provenance is Provenance.ORIGINAL]

    def subset(self, entries) -> "DatasetManifest":
        return replace(self, entries=list(entries))

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.unique_key in seen:
                raise SchemaError(f"duplicate manifest entry {e.unique_key}")
            seen.add(e.unique_key)
        originals = {e.key for e in self.originals()}
        for e in self.entries:
            if e.provenance is Provenance.AUGMENTED and e.key not in originals:
                raise SchemaError(f"augmented entry {e.unique_key} has no ORIGINAL entry")

    def image_file(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image_path

    def mask_file(self, entry: ManifestEntry) -> Path:
        return self.root / entry.mask_path

    def write(self, path: Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for e in self.entries:
                tid = e.transform_id if e.provenance is Provenance.AUGMENTED else ""
                writer.writerow([e.patient_id, e.slice_index, e.image_path, e.mask_path, e.provenance.value, tid])
        meta = {"seed": self.seed, "entries": len(self.entries)}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.csv"
        if not path.is_file():
            raise InputError(f"manifest not found: {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != MANIFEST_COLUMNS:
                raise SchemaError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
            entries = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    pid, sidx, img, msk, prov, tid = row
                    entries.append(
                        ManifestEntry(pid, int(sidx), img, msk, Provenance(prov), int(tid) if tid else 0)
                    )
                except ValueError as exc:
                    raise SchemaError(f"{path}:{lineno}: bad manifest row {row!r} ({exc})") from None
        seed = 0
        meta = path.with_suffix(".meta.json")
        if meta.is_file():
            seed = int(json.loads(meta.read_text()).get("seed", 0))
        manifest = cls(entries, seed=seed, root=path.parent)
        manifest.validate()
        return manifest


def read_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_png(path: Path, array: np.ndarray) -> None:
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG")


def image_to_u8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> Sample:
    """Read one stored image/mask pair; stored images are already normalized."""
    image = read_png(manifest.image_file(entry)).astype(np.float32) / 255.0
    mask = read_png(manifest.mask_file(entry))
    if mask.max(initial=0) >= NUM_CLASSES:
        raise SchemaError(f"{manifest.mask_file(entry)}: label value {int(mask.max())} out of range")
    return Sample(image, mask, entry.patient_id, entry.slice_index)


def load_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Stack a manifest into ``(N, H, W, 1)`` float32 images and ``(N, H, W)`` uint8 masks."""
    samples = [load_sample(manifest, e) for e in manifest.entries]
    images = np.stack([s.image for s in samples])[..., None].astype(np.float32)
    masks = np.stack([s.mask for s in samples])
    return images, masks
