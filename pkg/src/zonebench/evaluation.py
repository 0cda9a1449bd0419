"""Overlap metrics, per-image records and the comparison reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PROSTATE_ZONES, DatasetManifest, ZoneLabel, load_sample, one_hot
from .errors import ComparabilityError, InputError, ShapeError
from .models import ARCHITECTURE_ORDER

ABSENT = None
ZONE_COLORS = {
    ZoneLabel.BG: (0, 0, 0),
    ZoneLabel.CZ: (0, 0, 255),
    ZoneLabel.PZ: (0, 255, 0),
    ZoneLabel.TZ: (255, 255, 0),
    ZoneLabel.TUM: (255, 0, 0),
}


def _classes(m):
    return m.classes if hasattr(m, "classes") else np.asarray(m)


def _sets(pred, gt, c):
    p, g = _classes(pred), _classes(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p == int(c), g == int(c)


def dice(pred, gt, c):
    p, g = _sets(pred, gt, c)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return ABSENT
    return 2.0 * int((p & g).sum()) / total


def jaccard(pred, gt, c):
    p, g = _sets(pred, gt, c)
    union = int((p | g).sum())
    if union == 0:
        return ABSENT
    return int((p & g).sum()) / union


def mse(pred_probs, gt_onehot) -> float:
    a, b = np.asarray(pred_probs, dtype=np.float64), np.asarray(gt_onehot, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"probability map {a.shape} and one-hot map {b.shape} differ")
    return float(np.mean((a - b) ** 2))


@dataclass
class MetricsRecord:
    model_name: str
    image_key: tuple[str, int]
    per_class: dict = field(default_factory=dict)  # ZoneLabel -> (dsc, jac) or ABSENT
    mse: float = 0.0
    mean_dsc: float = math.nan
    mean_jac: float = math.nan

    @classmethod
    def from_maps(cls, model_name, image_key, pred_classes, gt_classes, probs) -> "MetricsRecord":
        per_class = {}
        for c in ZoneLabel:
            d = dice(pred_classes, gt_classes, c)
            per_class[c] = ABSENT if d is ABSENT else (d, jaccard(pred_classes, gt_classes, c))
        present = [per_class[c] for c in PROSTATE_ZONES if per_class[c] is not ABSENT]
        mean_dsc = float(np.mean([d for d, _ in present])) if present else math.nan
        mean_jac = float(np.mean([j for _, j in present])) if present else math.nan
        return cls(model_name, tuple(image_key), per_class, mse(probs, one_hot(gt_classes)), mean_dsc, mean_jac)


def mean_dsc_batch(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-image mean DSC over present prostate zones for ``(B, H, W)`` label batches."""
    out = np.empty(pred.shape[0])
    for i in range(pred.shape[0]):
        vals = [d for c in PROSTATE_ZONES if (d := dice(pred[i], gt[i], c)) is not ABSENT]
        out[i] = np.mean(vals) if vals else math.nan
    return out


def _as_proba_fn(model):
    from .models import ModelHandle, forward

    if isinstance(model, ModelHandle):
        return model.name, lambda batch: forward(model, batch)
    return getattr(model, "name", type(model).__name__), model


def evaluate_model(model, test_set: DatasetManifest, name: str | None = None, batch_size: int = 8):
    """One record per test image.

    ``model`` is a :class:`ModelHandle` or any callable mapping a
    ``(B, H, W, 1)`` batch to ``(B, H, W, 5)`` probabilities.
    """
    if not len(test_set):
        raise InputError("cannot evaluate on an empty test set")
    from .train import predict_classes

    default_name, proba = _as_proba_fn(model)
    name = name or default_name
    records = []
    entries = list(test_set.entries)
    for i in range(0, len(entries), batch_size):
        samples = [load_sample(test_set, e) for e in entries[i : i + batch_size]]
        batch = np.stack([s.image for s in samples])[..., None].astype(np.float32)
        probs = proba(batch)
        classes = predict_classes(probs)
        for s, p, c in zip(samples, probs, classes):
            records.append(MetricsRecord.from_maps(name, (s.patient_id, s.slice_index), c, s.mask, p))
    return records


# ---------------------------------------------------------------- summary


def model_order_key(name: str):
    tags = [a.value for a in ARCHITECTURE_ORDER]
    return (tags.index(name), "") if name in tags else (len(tags), name)


@dataclass
class SummaryRow:
    model: str
    mean_dsc: float
    mean_jac: float
    mean_mse: float
    best_dsc: bool = False
    best_jac: bool = False
    best_mse: bool = False


@dataclass
class SummaryTable:
    rows: list[SummaryRow]
    ties: list[str] = field(default_factory=list)

    def row(self, model: str) -> SummaryRow:
        return next(r for r in self.rows if r.model == model)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "mean_dsc", "mean_jac", "mean_mse", "best_dsc", "best_jac", "best_mse"])
        for r in self.rows:
            w.writerow(
                [r.model, f"{r.mean_dsc:.6f}", f"{r.mean_jac:.6f}", f"{r.mean_mse:.8f}",
                 int(r.best_dsc), int(r.best_jac), int(r.best_mse)]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("Model")] + [len(r.model) for r in self.rows])
        lines = [f"{'Model':<{width}}  {'DSC ^':>9}  {'JAC ^':>9}  {'MSE v':>11}"]
        lines.append("-" * len(lines[0]))
        for r in self.rows:
            def cell(v, best, fmt, n):
                s = format(v, fmt) + ("*" if best else " ")
                return f"{s:>{n}}"
            lines.append(
                f"{r.model:<{width}}  {cell(r.mean_dsc, r.best_dsc, '.4f', 9)}  "
                f"{cell(r.mean_jac, r.best_jac, '.4f', 9)}  {cell(r.mean_mse, r.best_mse, '.6f', 11)}"
            )
        lines.append("* best in column")
        lines.extend(f"note: {t}" for t in self.ties)
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = out_dir / "summary.csv", out_dir / "summary.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.to_text())
        return csv_path, txt_path


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def summarize(records_by_model: dict) -> SummaryTable:
    if not records_by_model:
        raise InputError("no model records to summarize")
    key_sets = {name: sorted(r.image_key for r in recs) for name, recs in records_by_model.items()}
    reference = next(iter(key_sets.values()))
    for name, keys in key_sets.items():
        if keys != reference:
            raise ComparabilityError(f"model {name!r} was evaluated on a different test set")
    rows = [
        SummaryRow(
            name,
            _nanmean(r.mean_dsc for r in recs),
            _nanmean(r.mean_jac for r in recs),
            float(np.mean([r.mse for r in recs])),
        )
        for name, recs in sorted(records_by_model.items(), key=lambda kv: model_order_key(kv[0]))
    ]
    ties = []
    for attr, flag, sign in (("mean_dsc", "best_dsc", 1), ("mean_jac", "best_jac", 1), ("mean_mse", "best_mse", -1)):
        scored = [(sign * getattr(r, attr), -i, r) for i, r in enumerate(rows) if not math.isnan(getattr(r, attr))]
        if not scored:
            continue
        top = max(s for s, _, _ in scored)
        winners = [r for s, _, r in sorted(scored, key=lambda t: -t[1]) if s == top]
        setattr(winners[0], flag, True)
        if len(winners) > 1:
            ties.append(
                f"tie on {attr} between {', '.join(r.model for r in winners)}; flagged {winners[0].model} by model order"
            )
    return SummaryTable(rows, ties)


# ---------------------------------------------------------------- box plots


def quartiles(values) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="midpoint")
    return float(q1), float(med), float(q3)


BOXPLOT_COLUMNS = ["kind", "model", "class", "patient_id", "slice_index", "jac", "n", "min", "q1", "median", "q3", "max"]


def boxplot_rows(records_by_model: dict) -> list[list]:
    dots, summaries = [], []
    for name in sorted(records_by_model, key=model_order_key):
        recs = sorted(records_by_model[name], key=lambda r: r.image_key)
        for c in ZoneLabel:
            vals = []
            for r in recs:
                entry = r.per_class.get(c, ABSENT)
                if entry is ABSENT:
                    continue
                vals.append(entry[1])
                dots.append(["dot", name, c.name, r.image_key[0], r.image_key[1], f"{entry[1]:.6f}", "", "", "", "", "", ""])
            if vals:
                q1, med, q3 = quartiles(vals)
                summaries.append(
                    ["summary", name, c.name, "", "", "", len(vals),
                     f"{min(vals):.6f}", f"{q1:.6f}", f"{med:.6f}", f"{q3:.6f}", f"{max(vals):.6f}"]
                )
    return dots + summaries


def boxplot_export(records_by_model: dict, path) -> Path:
    """Long-format per-class Jaccard dots followed by one quartile row per (model, class)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# quartile_method=midpoint\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOXPLOT_COLUMNS)
        w.writerows(boxplot_rows(records_by_model))
    return path


def read_boxplot(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------- qualitative


def select_triptych(records):
    """(worst, average, best) image keys by per-image mean Jaccard.

    Picked in the order worst, best, average so the three keys stay distinct;
    ties go to the lexicographically smallest key.
    """
    if len(records) < 3:
        raise InputError(f"need at least 3 records for a triptych, got {len(records)}")
    recs = sorted(records, key=lambda r: r.image_key)
    scores = {r.image_key: (r.mean_jac if not math.isnan(r.mean_jac) else 0.0) for r in recs}
    keys = [r.image_key for r in recs]
    worst = min(keys, key=lambda k: (scores[k], k))
    rest = [k for k in keys if k != worst]
    best = min(rest, key=lambda k: (-scores[k], k))
    rest = [k for k in rest if k != best]
    mean = float(np.mean(list(scores.values())))
    average = min(rest, key=lambda k: (abs(scores[k] - mean), k))
    return worst, average, best


def colorize(classes: np.ndarray) -> np.ndarray:
    lut = np.array([ZONE_COLORS[z] for z in ZoneLabel], dtype=np.uint8)
    return lut[np.asarray(classes)]


def render_triptych(selection, test_set: DatasetManifest, predictions: dict, out_dir, reference_model: str) -> Path:
    """Write one PNG strip per selected image plus ``triptych.json``.

    ``predictions`` maps model name to ``{image_key: (H, W) classes}``; each
    strip is input | ground truth | one prediction per model in model order.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_key = {e.key: e for e in test_set.originals() or test_set.entries}
    models = sorted(predictions, key=model_order_key)
    panels = {}
    for role, key in zip(("worst", "average", "best"), selection):
        s = load_sample(test_set, by_key[key])
        gray = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        tiles = [np.repeat(gray[..., None], 3, axis=2), colorize(s.mask)]
        tiles += [colorize(predictions[m][key]) for m in models]
        strip = np.concatenate(tiles, axis=1)
        name = f"triptych_{role}.png"
        Image.fromarray(strip).save(out_dir / name, format="PNG")
        panels[role] = {"patient_id": key[0], "slice_index": key[1], "png": name}
    manifest = {
        "reference_model": reference_model,
        "columns": ["input", "ground_truth"] + models,
        "legend": {z.name: list(ZONE_COLORS[z]) for z in ZoneLabel},
        "panels": panels,
    }
    path = out_dir / "triptych.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
