"""Slice loading, contour CSV parsing, rasterization and synthetic phantoms."""

from __future__ import annotations

import csv
import logging
import re
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .data import (
    GRID,
    Contour,
    ContourSet,
    DatasetManifest,
    LabelMap,
    ManifestEntry,
    SliceImage,
    ZoneLabel,
    image_to_u8,
    write_png,
)
from .errors import BoundsError, DecodeError, GeometryError, InputError, PairingError, SchemaError, SplitError
from .kernels import fill_polygons

log = logging.getLogger(__name__)

CONTOUR_COLUMNS = ("patient_id", "slice_index", "zone", "contour_id", "vertex_index", "x", "y")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".pgm"}
DICOM_SUFFIXES = {".dcm", ".dicom"}
_NAME_RE = re.compile(r"^(?P<patient>.+)_(?P<slice>\d+)$")


# ---------------------------------------------------------------------------
# slices


def normalize_minmax(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    lo, hi = pixels.min(), pixels.max()
    if hi <= lo:
        return np.zeros_like(pixels)
    return (pixels - lo) / (hi - lo)


def resize(pixels: np.ndarray, size: int = GRID) -> np.ndarray:
    if pixels.shape == (size, size):
        return np.asarray(pixels, dtype=np.float64)
    from PIL import Image

    im = Image.fromarray(np.asarray(pixels, dtype=np.float32))
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64)


def _identity_from_name(path: Path) -> tuple[str, int]:
    m = _NAME_RE.match(path.stem)
    if not m:
        raise ValueError("file name must look like <patient>_<slice>")
    return m["patient"], int(m["slice"])


def _read_dicom(path: Path) -> tuple[str, int, np.ndarray]:
    try:
        import pydicom
    except ImportError:
        raise ValueError("reading DICOM requires the optional 'pydicom' package") from None
    ds = pydicom.dcmread(path)
    pixels = ds.pixel_array.astype(np.float64)
    slope = float(getattr(ds, "RescaleSlope", 1) or 1)
    intercept = float(getattr(ds, "RescaleIntercept", 0) or 0)
    pixels = pixels * slope + intercept
    try:
        patient, index = _identity_from_name(path)
    except ValueError:
        patient, index = str(ds.PatientID), int(ds.InstanceNumber)
    return patient, index, pixels


def _read_raster(path: Path) -> tuple[str, int, np.ndarray]:
    from PIL import Image

    patient, index = _identity_from_name(path)
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I", "F"):
            pixels = np.asarray(im, dtype=np.float64)
        else:
            pixels = np.asarray(im.convert("L"), dtype=np.float64)
    return patient, index, pixels


def read_slice(path: Path) -> SliceImage:
    path = Path(path)
    reader = _read_dicom if path.suffix.lower() in DICOM_SUFFIXES else _read_raster
    patient, index, pixels = reader(path)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale slice, got shape {pixels.shape}")
    return SliceImage(patient, index, normalize_minmax(resize(pixels)))


def load_slices(directory) -> list[SliceImage]:
    """Read every slice file under ``directory``, resized to 256x256 and min-max normalized."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"slice directory not found: {directory}")
    files = sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES | DICOM_SUFFIXES
    )
    if not files:
        raise InputError(f"no slice files in {directory}")
    slices, failures = [], []
    for path in files:
        try:
            slices.append(read_slice(path))
        except Exception as exc:  # noqa: BLE001 - every decoder failure is itemized
            failures.append((path, str(exc) or type(exc).__name__))
    if failures:
        raise DecodeError(failures)
    slices.sort(key=lambda s: s.key)
    return slices


# ---------------------------------------------------------------------------
# contours


def parse_contours(csv_file, size: int = GRID) -> list[ContourSet]:
    csv_file = Path(csv_file)
    if not csv_file.is_file():
        raise InputError(f"contour file not found: {csv_file}")
    groups: "OrderedDict[tuple[str, int], OrderedDict[tuple[int, ZoneLabel], list]]" = OrderedDict()
    first_row = {}
    with open(csv_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CONTOUR_COLUMNS:
            raise SchemaError(f"{csv_file}: header must be {','.join(CONTOUR_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(CONTOUR_COLUMNS):
                raise SchemaError(f"{csv_file}: row {lineno}: expected {len(CONTOUR_COLUMNS)} fields")
            pid, sidx, zone, cid, _vidx, x, y = (cell.strip() for cell in row)
            try:
                label = ZoneLabel[zone]
            except KeyError:
                label = None
            if label is None or label is ZoneLabel.BG:
                raise SchemaError(f"{csv_file}: row {lineno}: unknown zone {zone!r}")
            try:
                sidx, cid, x, y = int(sidx), int(cid), int(x), int(y)
            except ValueError:
                raise SchemaError(f"{csv_file}: row {lineno}: non-integer field") from None
            if not (0 <= x < size and 0 <= y < size):
                raise BoundsError(f"{csv_file}: row {lineno}: vertex ({x}, {y}) outside [0, {size})")
            contours = groups.setdefault((pid, sidx), OrderedDict())
            contours.setdefault((cid, label), []).append((x, y))
            first_row.setdefault((pid, sidx, cid, label), lineno)

    result = []
    for (pid, sidx), contours in groups.items():
        items = []
        for (cid, label), verts in contours.items():
            if len(verts) < 3:
                row = first_row[(pid, sidx, cid, label)]
                raise GeometryError(
                    f"{csv_file}: contour {cid} ({label.name}) of {pid}/{sidx} starting at row {row} "
                    f"has {len(verts)} vertices, need at least 3"
                )
            items.append(Contour(label, tuple(verts), cid))
        result.append(ContourSet(pid, sidx, items))
    result.sort(key=lambda cs: cs.key)
    return result


def write_contours(csv_file, contour_sets) -> None:
    csv_file = Path(csv_file)
    csv_file.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_file, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CONTOUR_COLUMNS)
        for cs in contour_sets:
            for contour in cs.contours:
                for i, (x, y) in enumerate(contour.vertices):
                    writer.writerow([cs.patient_id, cs.slice_index, contour.zone.name, contour.contour_id, i, x, y])


def rasterize(contours: ContourSet, size: int = GRID) -> LabelMap:
    """Fill every contour (even-odd, boundary included); higher zone labels win overlaps."""
    polys = [c for c in contours.contours if c.vertices]
    if not polys:
        return LabelMap(np.zeros((size, size), np.uint8), contours.patient_id, contours.slice_index)
    verts = np.concatenate([np.asarray(c.vertices, dtype=np.int64) for c in polys])
    offsets = np.cumsum([0] + [len(c.vertices) for c in polys])
    labels = np.array([int(c.zone) for c in polys], dtype=np.uint8)
    classes = fill_polygons(verts, offsets, labels, (size, size))
    return LabelMap(classes, contours.patient_id, contours.slice_index)


# ---------------------------------------------------------------------------
# datasets


def _stem(patient_id: str, slice_index: int, suffix: str = "") -> str:
    return f"{patient_id}_{slice_index:03d}{suffix}"


def build_dataset(slices, masks, out_dir) -> DatasetManifest:
    """Persist aligned slices/masks in the on-disk layout and write the manifest."""
    out_dir = Path(out_dir)
    by_key_slice = {s.key: s for s in slices}
    by_key_mask = {m.key: m for m in masks}
    orphans = sorted(set(by_key_slice) ^ set(by_key_mask))
    if orphans:
        listing = ", ".join(
            f"{p}/{i} ({'no mask' if (p, i) in by_key_slice else 'no slice'})" for p, i in orphans
        )
        raise PairingError(f"unpaired slices/masks: {listing}")
    if not by_key_slice:
        raise InputError("no slices to build a dataset from")
    entries = []
    for key in sorted(by_key_slice):
        s, m = by_key_slice[key], by_key_mask[key]
        if s.pixels.shape != m.classes.shape:
            raise PairingError(f"{key}: image shape {s.pixels.shape} != mask shape {m.classes.shape}")
        stem = _stem(*key)
        img_rel, msk_rel = f"images/{stem}.png", f"masks/{stem}.png"
        write_png(out_dir / img_rel, image_to_u8(s.pixels))
        write_png(out_dir / msk_rel, m.classes)
        entries.append(ManifestEntry(key[0], key[1], img_rel, msk_rel))
    manifest = DatasetManifest(entries, seed=0, root=out_dir)
    manifest.validate()
    manifest.write()
    return manifest


def split_by_patient(manifest: DatasetManifest, train_fraction: float, seed: int):
    """Shuffle patients and cut at the smallest prefix holding ``train_fraction`` of the images."""
    if not manifest.entries:
        raise SplitError("cannot split an empty manifest")
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    patients = manifest.patients
    if len(patients) < 2:
        raise SplitError("need at least 2 patients to hold one out for testing")
    counts = {p: 0 for p in patients}
    for e in manifest.originals() or manifest.entries:
        counts[e.patient_id] += 1
    order = [patients[i] for i in np.random.default_rng(seed).permutation(len(patients))]
    total = sum(counts.values())
    running, cut = 0, len(order) - 1
    for i, p in enumerate(order):
        running += counts[p]
        if running >= train_fraction * total:
            cut = i + 1
            break
    cut = min(cut, len(order) - 1)
    train_ids = set(order[:cut])
    train = manifest.subset(e for e in manifest.entries if e.patient_id in train_ids)
    test = manifest.subset(e for e in manifest.entries if e.patient_id not in train_ids)
    return train, test


# ---------------------------------------------------------------------------
# synthetic phantoms

# T2-like contrast: bright peripheral zone, hypointense tumour. A bright fat
# ring in the background pins the per-slice min-max range so one zone keeps
# one normalized intensity across slices.
ZONE_INTENSITY = {
    ZoneLabel.BG: 0.05,
    ZoneLabel.TUM: 0.20,
    ZoneLabel.CZ: 0.35,
    ZoneLabel.TZ: 0.50,
    ZoneLabel.PZ: 0.70,
}
FAT_INTENSITY = 0.95
NOISE_SIGMA = 0.03
TUMOR_RATE = 0.4


def _ellipse(rng, cx, cy, a, b, theta, n, jitter, size):
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    r = 1.0 + jitter * rng.standard_normal(n)
    x = cx + r * (a * np.cos(t) * np.cos(theta) - b * np.sin(t) * np.sin(theta))
    y = cy + r * (a * np.cos(t) * np.sin(theta) + b * np.sin(t) * np.cos(theta))
    pts = np.clip(np.rint(np.stack([x, y], axis=1)), 0, size - 1).astype(int)
    return tuple((int(px), int(py)) for px, py in pts)


def synth_phantom(rng: np.random.Generator, patient_id: str, slice_index: int, tumor: bool, size: int = GRID):
    """One phantom slice: (SliceImage, ContourSet, LabelMap)."""
    s = size / 256.0
    cx = size / 2 + rng.uniform(-12, 12) * s
    cy = size / 2 + rng.uniform(-12, 12) * s
    a, b = rng.uniform(55, 75) * s, rng.uniform(40, 55) * s
    theta = rng.uniform(-0.3, 0.3)
    contours = [
        Contour(ZoneLabel.CZ, _ellipse(rng, cx, cy, a, b, theta, 32, 0.03, size), 0),
        Contour(ZoneLabel.PZ, _ellipse(rng, cx, cy, 0.6 * a, 0.6 * b, theta, 24, 0.03, size), 1),
    ]
    tz_dx, tz_dy = rng.uniform(-0.3, 0.3) * a, rng.uniform(0.1, 0.35) * b
    contours.append(
        Contour(
            ZoneLabel.TZ,
            _ellipse(rng, cx + tz_dx, cy + tz_dy, rng.uniform(14, 22) * s, rng.uniform(10, 16) * s, theta, 16, 0.05, size),
            2,
        )
    )
    if tumor:
        ang, rad = rng.uniform(0, 2 * np.pi), rng.uniform(0.2, 0.6)
        tx, ty = cx + rad * a * np.cos(ang), cy + rad * b * np.sin(ang)
        r = rng.uniform(10, 16) * s
        contours.append(Contour(ZoneLabel.TUM, _ellipse(rng, tx, ty, r, r * rng.uniform(0.7, 1.0), 0.0, 12, 0.12, size), 3))
    cs = ContourSet(patient_id, slice_index, contours)
    label_map = rasterize(cs, size)
    lut = np.array([ZONE_INTENSITY[z] for z in ZoneLabel])
    base = lut[label_map.classes]
    ys, xs = np.mgrid[0:size, 0:size]
    u, v = xs - cx, ys - cy
    rho = np.hypot((u * np.cos(theta) + v * np.sin(theta)) / a, (-u * np.sin(theta) + v * np.cos(theta)) / b)
    base[(rho > 1.45) & (rho < 1.6) & (label_map.classes == ZoneLabel.BG)] = FAT_INTENSITY
    noisy = np.clip(base + NOISE_SIGMA * rng.standard_normal(base.shape), 0.0, 1.0)
    pixels = normalize_minmax(noisy)
    return SliceImage(patient_id, slice_index, pixels), cs, label_map


def synth_generate(n_patients: int, slices_per_patient: int, seed: int, out_dir) -> DatasetManifest:
    """Write a synthetic study to ``out_dir``.

    Layout: ``slices/<patient>_<slice>.png`` plus ``contours.csv`` (the raw
    inputs ingestion expects) and the rasterized dataset (``images/``,
    ``masks/``, ``manifest.csv``).
    """
    if n_patients < 2:
        raise SplitError(f"n_patients must be >= 2 so a test patient can be held out, got {n_patients}")
    if slices_per_patient < 1:
        raise InputError(f"slices_per_patient must be >= 1, got {slices_per_patient}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    slices, sets, masks = [], [], []
    for p in range(n_patients):
        pid = f"P{p:02d}"
        for k in range(slices_per_patient):
            tumor = bool(rng.random() < TUMOR_RATE) or (p == 0 and k == 0)
            image, cs, lm = synth_phantom(rng, pid, k, tumor)
            write_png(out_dir / "slices" / f"{_stem(pid, k)}.png", image_to_u8(image.pixels))
            slices.append(image)
            sets.append(cs)
            masks.append(lm)
    write_contours(out_dir / "contours.csv", sets)
    manifest = build_dataset(slices, masks, out_dir)
    manifest.seed = seed
    manifest.write()
    log.info("synthesized %d slices for %d patients in %s", len(manifest), n_patients, out_dir)
    return manifest


def ingest(data_root, out_dir) -> DatasetManifest:
    """``slices/`` + ``contours.csv`` under ``data_root`` to a dataset in ``out_dir``."""
    data_root = Path(data_root)
    slices = load_slices(data_root / "slices")
    masks = [rasterize(cs) for cs in parse_contours(data_root / "contours.csv")]
    return build_dataset(slices, masks, out_dir)
