"""Sixteen fixed geometric transforms applied jointly to image and mask."""

from __future__ import annotations

import enum
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    ManifestEntry,
    Provenance,
    Sample,
    image_to_u8,
    load_sample,
    write_png,
)
from .errors import AugmentationError
from .kernels import warp_bilinear, warp_nearest

N_TRANSFORMS = 16
MAX_ANGLE = 25.0
SCALE_RANGE = (0.85, 1.15)
MAX_OFFSET = 20.0
MAX_SHEAR = 0.15


class TransformKind(str, enum.Enum):
    ROTATE = "ROTATE"
    ZOOM = "ZOOM"
    TRANSLATE = "TRANSLATE"
    FLIP = "FLIP"
    SHEAR = "SHEAR"
    ROTATE_ZOOM = "ROTATE_ZOOM"


@dataclass(frozen=True)
class GeometricTransform:
    transform_id: int
    kind: TransformKind
    angle: float = 0.0  # degrees, counter-clockwise on screen
    scale: float = 1.0
    dx: float = 0.0  # pixels, +x is rightwards
    dy: float = 0.0  # pixels, +y is downwards
    axis: str = ""  # "horizontal" mirrors columns, "vertical" mirrors rows
    shear: float = 0.0

    def within_bounds(self) -> bool:
        return (
            abs(self.angle) <= MAX_ANGLE
            and SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]
            and abs(self.dx) <= MAX_OFFSET
            and abs(self.dy) <= MAX_OFFSET
            and abs(self.shear) <= MAX_SHEAR
        )

    def forward_matrix(self) -> np.ndarray:
        """2x2 map about the frame centre from input to output coordinates."""
        a = math.radians(self.angle)
        rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
        mat = np.eye(2)
        if self.kind in (TransformKind.ROTATE, TransformKind.ROTATE_ZOOM):
            mat = rot @ mat
        if self.kind in (TransformKind.ZOOM, TransformKind.ROTATE_ZOOM):
            mat = self.scale * mat
        if self.kind is TransformKind.SHEAR:
            mat = np.array([[1.0, self.shear], [0.0, 1.0]])
        if self.kind is TransformKind.FLIP:
            mat = np.diag([-1.0, 1.0]) if self.axis == "horizontal" else np.diag([1.0, -1.0])
        return mat

    def source_coords(self, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Source (x, y) sampled by every output pixel; one map serves image and mask."""
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        u = xs - cx
        v = ys - cy
        if self.kind is TransformKind.TRANSLATE:
            return xs - self.dx, ys - self.dy
        if self.kind is TransformKind.FLIP:
            if self.axis == "horizontal":
                return (width - 1) - xs, ys
            return xs, (height - 1) - ys
        inv = np.linalg.inv(self.forward_matrix())
        src_x = inv[0, 0] * u + inv[0, 1] * v + cx
        src_y = inv[1, 0] * u + inv[1, 1] * v + cy
        return src_x, src_y


@dataclass
class AugmentationPlan:
    transforms: list[GeometricTransform]
    seed: int = 0

    def __post_init__(self):
        ids = sorted(t.transform_id for t in self.transforms)
        if ids != list(range(1, len(self.transforms) + 1)) or len(ids) != N_TRANSFORMS:
            raise AugmentationError(f"a plan needs transform ids 1..{N_TRANSFORMS} exactly once, got {ids}")

    def __iter__(self):
        return iter(self.transforms)

    def __len__(self):
        return len(self.transforms)


def make_plan(seed: int) -> AugmentationPlan:
    """4 rotations, 3 zooms, 3 translations, 2 flips, 2 shears, 2 rotate+zoom."""
    rng = np.random.default_rng(seed)

    def angle():
        # magnitude at least 5 degrees so no rotation degenerates to identity
        return float(rng.choice([-1.0, 1.0]) * rng.uniform(5.0, MAX_ANGLE))

    def scale():
        return float(rng.uniform(*SCALE_RANGE))

    def offset():
        return float(rng.integers(-MAX_OFFSET, MAX_OFFSET + 1))

    def shear():
        return float(rng.choice([-1.0, 1.0]) * rng.uniform(0.05, MAX_SHEAR))

    specs = (
        [dict(kind=TransformKind.ROTATE, angle=angle()) for _ in range(4)]
        + [dict(kind=TransformKind.ZOOM, scale=scale()) for _ in range(3)]
        + [dict(kind=TransformKind.TRANSLATE, dx=offset(), dy=offset()) for _ in range(3)]
        + [dict(kind=TransformKind.FLIP, axis="horizontal"), dict(kind=TransformKind.FLIP, axis="vertical")]
        + [dict(kind=TransformKind.SHEAR, shear=shear()) for _ in range(2)]
        + [dict(kind=TransformKind.ROTATE_ZOOM, angle=angle(), scale=scale()) for _ in range(2)]
    )
    return AugmentationPlan([GeometricTransform(i + 1, **s) for i, s in enumerate(specs)], seed=seed)


def apply(t: GeometricTransform, s: Sample) -> Sample:
    """Bilinear for the image, nearest for the mask, same coordinate map; vacated area is 0/BG."""
    if s.image.shape != s.mask.shape:
        raise AugmentationError(f"image {s.image.shape} and mask {s.mask.shape} grids differ")
    src_x, src_y = t.source_coords(*s.image.shape)
    image = warp_bilinear(s.image, src_x, src_y).astype(s.image.dtype)
    mask = warp_nearest(s.mask, src_x, src_y)
    return Sample(image, mask, s.patient_id, s.slice_index)


def expand(manifest: DatasetManifest, plan: AugmentationPlan, out_dir) -> DatasetManifest:
    """Originals plus one augmented copy per transform, written to ``out_dir``."""
    if any(e.provenance is not Provenance.ORIGINAL for e in manifest):
        raise AugmentationError("manifest already holds AUGMENTED entries; refusing to augment twice")
    if not manifest.entries:
        raise AugmentationError("nothing to augment: manifest is empty")
    out_dir = Path(out_dir)
    entries = []
    for e in manifest.entries:
        stem = Path(e.image_path).stem
        img_rel, msk_rel = f"images/{stem}.png", f"masks/{stem}.png"
        for src, dst in ((manifest.image_file(e), img_rel), (manifest.mask_file(e), msk_rel)):
            target = out_dir / dst
            target.parent.mkdir(parents=True, exist_ok=True)
            if src.resolve() != target.resolve():
                shutil.copyfile(src, target)
        entries.append(ManifestEntry(e.patient_id, e.slice_index, img_rel, msk_rel))
        sample = load_sample(manifest, e)
        for t in plan:
            aug = apply(t, sample)
            suffix = f"_aug{t.transform_id}"
            a_img, a_msk = f"images/{stem}{suffix}.png", f"masks/{stem}{suffix}.png"
            write_png(out_dir / a_img, image_to_u8(aug.image))
            write_png(out_dir / a_msk, aug.mask)
            entries.append(
                ManifestEntry(e.patient_id, e.slice_index, a_img, a_msk, Provenance.AUGMENTED, t.transform_id)
            )
    result = DatasetManifest(entries, seed=plan.seed, root=out_dir)
    result.validate()
    result.write()
    return result
