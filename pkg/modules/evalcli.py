"""
evalcli - segmentation metrics, gradient analysis, rendering and run reports.
"""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules import ndgrad as nd
from modules.config import CLASS_NAMES, IGNORE_INDEX, NUM_CLASSES
from modules.error_handler import DatasetError, SerializationError
from modules.ndgrad import Tensor
from modules.segnet import SegNet
from modules.synthworld import BASE_COLORS, load_dataset

logger = logging.getLogger(__name__)

PALETTE = np.round(BASE_COLORS * 255).astype(np.uint8)
DEFAULT_TAIL = (5, 6, 7)


class ConfusionMatrix:
    """C x C pixel counts, rows = ground truth, columns = prediction"""

    def __init__(self, num_classes: int = NUM_CLASSES):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, preds: np.ndarray, gts: np.ndarray, ignore_index: int = IGNORE_INDEX):
        preds, gts = np.asarray(preds), np.asarray(gts)
        if preds.shape != gts.shape:
            raise DatasetError(f"prediction shape {preds.shape} does not match ground truth {gts.shape}")
        keep = gts != ignore_index
        if np.any((gts[keep] < 0) | (gts[keep] >= self.num_classes)) or np.any((preds[keep] < 0) | (preds[keep] >= self.num_classes)):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        index = self.num_classes * gts[keep].astype(np.int64) + preds[keep].astype(np.int64)
        self.counts += np.bincount(index, minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both ground truth and predictions"""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    def class_accuracy(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)


def _nanmean(values: np.ndarray) -> float:
    present = values[~np.isnan(values)]
    return float(present.mean()) if present.size else float("nan")


@dataclass
class MetricsReport:
    per_class_iou: List[float]
    miou: float
    head_iou: float
    tail_iou: float
    pixel_accuracy: float
    class_accuracy: List[float]
    pixels: int
    grad_per_class: Optional[List[float]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def subset_miou(self, classes: Sequence[int]) -> float:
        return _nanmean(np.array([self.per_class_iou[c] for c in classes], dtype=np.float64))

    def to_dict(self) -> Dict[str, Any]:
        def clean(value):
            if isinstance(value, float) and np.isnan(value):
                return None
            if isinstance(value, list):
                return [clean(v) for v in value]
            return value
        return {k: clean(v) for k, v in asdict(self).items()}


def report_from_confusion(cm: ConfusionMatrix, tail_classes: Sequence[int] = DEFAULT_TAIL) -> MetricsReport:
    iou = cm.iou()
    head = [c for c in range(cm.num_classes) if c not in set(tail_classes)]
    return MetricsReport(
        per_class_iou=[float(v) for v in iou],
        miou=_nanmean(iou),
        head_iou=_nanmean(iou[head]),
        tail_iou=_nanmean(iou[list(tail_classes)]),
        pixel_accuracy=cm.pixel_accuracy(),
        class_accuracy=[float(v) for v in cm.class_accuracy()],
        pixels=cm.total,
        metadata={"tail_classes": list(tail_classes)},
    )


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int = NUM_CLASSES,
         tail_classes: Sequence[int] = DEFAULT_TAIL) -> MetricsReport:
    """Mean IoU over classes present in ground truth or predictions"""
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise DatasetError(f"miou needs matching non-empty inputs, got {len(preds)} predictions and {len(gts)} maps")
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        cm.update(p, g)
    if cm.total == 0:
        raise DatasetError("miou found no evaluated pixels")
    return report_from_confusion(cm, tail_classes)


def evaluate(net: SegNet, images: np.ndarray, labels: np.ndarray, batch_size: int = 16,
             tail_classes: Sequence[int] = DEFAULT_TAIL) -> MetricsReport:
    """Predict in batches and score against labels"""
    if len(images) == 0:
        raise DatasetError("evaluate needs at least one image")
    cm = ConfusionMatrix(net.num_classes)
    for start in range(0, len(images), batch_size):
        cm.update(net.predict(images[start:start + batch_size]), labels[start:start + batch_size])
    return report_from_confusion(cm, tail_classes)


# Gradient analysis

LossFn = Callable[[Tensor, np.ndarray], Tensor]


def grad_per_class(net: SegNet, loss_fn: LossFn, images: np.ndarray, labels: np.ndarray,
                   num_classes: Optional[int] = None, reduction: str = "sum") -> np.ndarray:
    """
    Per-class share of the update: |dL/dlogits| (L1 over classes) grouped by ground-truth
    class, summed (or averaged with reduction="mean"), divided by the largest entry.
    """
    num_classes = num_classes or net.num_classes
    probs, logits = net.forward(images)
    loss = loss_fn(probs, labels)
    nd.backward(loss)
    net_grads = logits.grad if logits.grad is not None else np.zeros_like(logits.data)
    for p in net.parameters():
        p.zero_grad()

    magnitude = np.abs(net_grads).sum(axis=-1)
    labels = np.asarray(labels)
    valid = labels != IGNORE_INDEX
    totals = np.bincount(labels[valid].reshape(-1), weights=magnitude[valid].reshape(-1), minlength=num_classes)
    if reduction == "mean":
        counts = np.bincount(labels[valid].reshape(-1), minlength=num_classes)
        totals = np.where(counts > 0, totals / np.maximum(counts, 1), 0.0)
    elif reduction != "sum":
        raise DatasetError(f"unknown reduction {reduction!r}")
    peak = totals.max()
    return totals / peak if peak > 0 else totals


def nonzero_dispersion(values: np.ndarray) -> float:
    """Standard deviation of the non-zero entries"""
    present = np.asarray(values)[np.asarray(values) > 0]
    return float(present.std()) if present.size else 0.0


# Rendering

def render(labels: np.ndarray, palette: np.ndarray = PALETTE) -> bytes:
    """Binary P6 pixmap, one palette colour per label"""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DatasetError(f"render expects an H x W label map, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= len(palette)):
        raise DatasetError(f"label {int(labels.max())} has no palette entry (palette covers {len(palette)} classes)")
    return encode_ppm(np.asarray(palette, dtype=np.uint8)[labels])


def render_image(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image), 0.0, 1.0) * 255).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    height, width, _ = rgb.shape
    return f"P6\n{width} {height}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def parse_ppm(data: bytes) -> Tuple[int, int, int, np.ndarray]:
    """(width, height, maxval, H x W x 3 pixels) of a binary P6 pixmap"""
    fields: List[bytes] = []
    position = 0
    while len(fields) < 4:
        while position < len(data) and data[position:position + 1].isspace():
            position += 1
        start = position
        while position < len(data) and not data[position:position + 1].isspace():
            position += 1
        if start == position:
            raise SerializationError("truncated PPM header")
        fields.append(data[start:position])
    if fields[0] != b"P6":
        raise SerializationError(f"not a P6 pixmap: {fields[0]!r}")
    width, height, maxval = (int(f) for f in fields[1:])
    pixels = np.frombuffer(data, dtype=np.uint8, offset=position + 1, count=width * height * 3)
    return width, height, maxval, pixels.reshape(height, width, 3)


def compose_grid(rows: Sequence[Sequence[np.ndarray]], gap: int = 1) -> np.ndarray:
    """Tile equally sized RGB tiles into one image with white gaps"""
    tile_h, tile_w, _ = rows[0][0].shape
    columns = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (tile_h + gap) - gap, columns * (tile_w + gap) - gap, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            top, left = i * (tile_h + gap), j * (tile_w + gap)
            canvas[top:top + tile_h, left:left + tile_w] = tile
    return canvas


# Report

def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    path.write_text(buffer.getvalue())


def _read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        lines.append("| " + " | ".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def load_segnet_checkpoint(path: Path) -> SegNet:
    arrays, meta = nd.load_named(path)
    params = {name[len("param/"):]: value for name, value in arrays.items() if name.startswith("param/")}
    if not params:
        raise SerializationError(f"{path} holds no segmentation parameters")
    net = SegNet.init(0, params["classifier.bias"].shape[0], params["conv0.weight"].shape[2])
    net.load_state_dict(params)
    return net


def report(run_dir: Union[str, Path], samples: int = 4) -> List[Path]:
    """
    Consolidate a finished run: summary.csv, per_class_iou.csv, ablation.csv/.md,
    grad_per_class.csv and a qualitative.ppm grid (input, ground truth, one
    prediction per setting). Outputs depend only on run files, so reruns are byte-identical.
    """
    run_dir = Path(run_dir)
    manifest_file = run_dir / "manifest.json"
    if not manifest_file.exists():
        raise DatasetError(f"report inputs missing: {manifest_file}")
    with open(manifest_file, "r") as f:
        manifest = json.load(f)

    settings = manifest.get("settings", [])
    needed = [run_dir / "metrics" / "ablation.csv"] if manifest.get("command") == "ablation" else []
    for setting in settings:
        needed.append(run_dir / "metrics" / f"{setting['phase']}.csv")
        needed.append(run_dir / "checkpoints" / f"{setting['phase']}.ndgc")
    eval_dir = run_dir / manifest.get("data", {}).get("eval", "data/eval")
    needed.append(eval_dir / "manifest.json")
    missing = [str(p) for p in needed if not p.exists()]
    if missing or not settings:
        raise DatasetError(f"report inputs missing: {', '.join(missing) or 'no settings in manifest'}")

    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    tail = manifest.get("tail_classes", list(DEFAULT_TAIL))
    written: List[Path] = []

    finals = []
    for setting in settings:
        history = _read_csv(run_dir / "metrics" / f"{setting['phase']}.csv")
        if not history:
            raise DatasetError(f"metric history for {setting['phase']} is empty")
        finals.append((setting["name"], history[-1]))

    summary_rows = [[name, row["regime"], int(row["epoch"]), float(row["loss"]), float(row["miou"]),
                     float(row["head_iou"]), float(row["tail_iou"]), float(row["pixel_accuracy"])] for name, row in finals]
    _write_csv(out / "summary.csv", ["setting", "regime", "epoch", "loss", "miou", "head_iou", "tail_iou", "pixel_accuracy"], summary_rows)
    written.append(out / "summary.csv")

    per_class_rows = []
    for c, class_name in enumerate(CLASS_NAMES):
        per_class_rows.append([class_name, "tail" if c in tail else "head"] + [float(row[f"iou_{class_name}"]) for _, row in finals])
    _write_csv(out / "per_class_iou.csv", ["class", "group"] + [name for name, _ in finals], per_class_rows)
    written.append(out / "per_class_iou.csv")

    ablation_rows = [[name, float(row["miou"]), float(row["tail_iou"])] for name, row in finals]
    _write_csv(out / "ablation.csv", ["setting", "miou", "tail_iou"], ablation_rows)
    (out / "ablation.md").write_text(_markdown_table(["setting", "target mIoU", "tail IoU"], [[n, 100 * m, 100 * t] for n, m, t in ablation_rows]))
    written += [out / "ablation.csv", out / "ablation.md"]

    grads_file = run_dir / "metrics" / "grad_per_class.csv"
    if grads_file.exists():
        (out / "grad_per_class.csv").write_text(grads_file.read_text())
        written.append(out / "grad_per_class.csv")

    eval_set = load_dataset(eval_dir)[:samples]
    images = np.stack([s.image for s in eval_set])
    predictions = [load_segnet_checkpoint(run_dir / "checkpoints" / f"{s['phase']}.ndgc").predict(images) for s in settings]
    rows = []
    for i, sample in enumerate(eval_set):
        rows.append([render_image(sample.image), PALETTE[sample.labels]] + [PALETTE[p[i]] for p in predictions])
    (out / "qualitative.ppm").write_bytes(encode_ppm(compose_grid(rows)))
    written.append(out / "qualitative.ppm")

    logger.info(f"report for {run_dir} written to {out}")
    return written
