"""
synthworld - deterministic two-domain street-scene generator.

Every scene is a stack of horizontal bands (sky, building, sidewalk, road)
decorated with vehicles on the road and pedestrians, poles and signs rooted
on the sidewalk. Label geometry depends only on the seed, so source and
target renderings of one seed share a label map and differ in appearance.
"""

import json
import logging
import queue
import threading
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.config import CLASS_NAMES, NUM_CLASSES, WorldConfig, config_hash
from modules.error_handler import DatasetError
from modules.ndgrad import load_tensor, make_rng, save_tensor

logger = logging.getLogger(__name__)

SKY, BUILDING, ROAD, SIDEWALK, VEHICLE, PEDESTRIAN, POLE, SIGN = range(NUM_CLASSES)
TAIL_CLASSES = (PEDESTRIAN, POLE, SIGN)

BASE_COLORS = np.array([
    [0.55, 0.75, 0.95],
    [0.55, 0.45, 0.40],
    [0.35, 0.35, 0.38],
    [0.78, 0.72, 0.60],
    [0.15, 0.25, 0.70],
    [0.85, 0.20, 0.20],
    [0.95, 0.85, 0.20],
    [0.20, 0.75, 0.30],
])

MANIFEST_FORMAT = "comal-lab/synthworld-1"
MAX_SIGN_PIXELS = 9
POLE_SPACING = 4


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass
class DomainSample:
    image: np.ndarray
    labels: np.ndarray
    domain: str
    seed: int


@dataclass
class Violation:
    rule: str
    row: int
    col: int

    def __str__(self):
        return f"{self.rule} at ({self.row}, {self.col})"


def _domain_name(domain: Union[str, Domain]) -> str:
    try:
        return Domain(domain.value if isinstance(domain, Domain) else domain).value
    except ValueError:
        raise DatasetError(f"unknown domain {domain!r}; expected 'source' or 'target'") from None


# Label geometry

def _bands(rng: np.random.Generator, height: int) -> Tuple[int, int, int]:
    """Return the first building, sidewalk and road rows"""
    sky = max(1, int(round(height * rng.uniform(0.2, 0.3))))
    road = max(2, int(round(height * rng.uniform(0.2, 0.3))))
    sidewalk = max(2, int(round(height * rng.uniform(0.1, 0.15))))
    building = max(1, height - sky - road - sidewalk)
    return sky, sky + building, sky + building + sidewalk


def _pick_columns(rng: np.random.Generator, width: int, count: int, spacing: int) -> List[int]:
    chosen: List[int] = []
    for col in rng.permutation(np.arange(1, width - 1)):
        if len(chosen) == count:
            break
        if all(abs(int(col) - c) >= spacing for c in chosen):
            chosen.append(int(col))
    return sorted(chosen)


def generate_labels(seed: int, cfg: WorldConfig) -> np.ndarray:
    """Structured H x W label map for a seed (independent of domain)"""
    height, width = cfg.height, cfg.width
    rng = make_rng(seed, "labels")
    building_top, sidewalk_top, road_top = _bands(rng, height)
    road_rows = height - road_top
    ground = road_top - 2  # second-to-last sidewalk row carries rooted objects

    labels = np.empty((height, width), dtype=np.int64)
    labels[:building_top] = SKY
    labels[building_top:sidewalk_top] = BUILDING
    labels[sidewalk_top:road_top] = SIDEWALK
    labels[road_top:] = ROAD

    for _ in range(int(rng.integers(1, 2 + width // 16))):
        car_h = int(rng.integers(1, min(3, road_rows - 1) + 1))
        car_w = int(rng.integers(3, 7))
        left = int(rng.integers(0, max(1, width - car_w + 1)))
        labels[road_top:road_top + car_h, left:left + car_w] = VEHICLE

    tail = cfg.tail_lambda
    for col in rng.choice(width, size=int(rng.poisson(tail * width / 4)), replace=True):
        person_h = min(int(rng.integers(1, 4)), ground - building_top + 1)
        labels[ground - person_h + 1:ground + 1, col] = PEDESTRIAN

    # poles keep two rows of building above them for a sign
    max_pole = ground - building_top - 1
    if max_pole >= 3:
        num_poles = int(rng.poisson(tail * width / 8))
        for col in _pick_columns(rng, width, num_poles, POLE_SPACING):
            pole_h = int(rng.integers(3, min(8, max_pole) + 1))
            top = ground - pole_h + 1
            labels[top:ground + 1, col] = POLE
            if rng.uniform() < 0.8:
                sign_h = int(rng.integers(1, 3))
                sign_w = int(rng.integers(1, 4))
                left = max(0, col - (sign_w - 1) // 2)
                labels[top - sign_h:top, left:min(width, left + sign_w)] = SIGN
    return labels


# Rendering

def _hue_rotation(degrees: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space"""
    angle = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    cross = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.cos(angle) * np.eye(3) + np.sin(angle) * cross + (1.0 - np.cos(angle)) * np.outer(k, k)


def render_image(labels: np.ndarray, seed: int, domain: Union[str, Domain], cfg: WorldConfig) -> np.ndarray:
    domain = _domain_name(domain)
    rng = make_rng(seed, "image", domain)
    image = BASE_COLORS[labels] + rng.uniform(-0.05, 0.05)
    if domain == Domain.TARGET.value:
        image = image @ _hue_rotation(cfg.target_hue_shift).T + cfg.target_brightness
        noise = cfg.target_noise
    else:
        noise = cfg.source_noise
    image = image + noise * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0)


def generate(seed: int, domain: Union[str, Domain], cfg: Optional[WorldConfig] = None) -> DomainSample:
    """One scene: shared label geometry plus a domain-specific rendering"""
    cfg = cfg or WorldConfig()
    labels = generate_labels(seed, cfg)
    image = render_image(labels, seed, domain, cfg)
    return DomainSample(image=image, labels=labels, domain=_domain_name(domain), seed=int(seed))


# Structure oracle

def _first_below_outside(labels: np.ndarray, inside: np.ndarray) -> np.ndarray:
    """For each pixel, the label of the first pixel below it not in `inside` (-1 if none)"""
    result = np.full(labels.shape, -1, dtype=np.int64)
    for row in range(labels.shape[0] - 2, -1, -1):
        below = labels[row + 1]
        result[row] = np.where(inside[row + 1], result[row + 1], below)
    return result


def _anything_above(mask: np.ndarray) -> np.ndarray:
    """True where some pixel strictly above (same column) is in mask"""
    seen = np.logical_or.accumulate(mask, axis=0)
    above = np.zeros_like(mask)
    above[1:] = seen[:-1]
    return above


def _first_pixel(mask: np.ndarray) -> Optional[Tuple[int, int]]:
    hits = np.argwhere(mask)
    return (int(hits[0][0]), int(hits[0][1])) if len(hits) else None


def _components(mask: np.ndarray) -> List[List[Tuple[int, int]]]:
    height, width = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    groups = []
    for r, c in np.argwhere(mask):
        if seen[r, c]:
            continue
        stack, group = [(int(r), int(c))], []
        seen[r, c] = True
        while stack:
            y, x = stack.pop()
            group.append((y, x))
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < height and 0 <= nx < width and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
        groups.append(sorted(group))
    return groups


def validate_structure(labels: np.ndarray) -> List[Violation]:
    """Every broken scene rule, each with the first offending pixel"""
    labels = np.asarray(labels)
    height, width = labels.shape
    violations: List[Violation] = []

    def report(rule: str, mask: np.ndarray):
        pixel = _first_pixel(mask)
        if pixel is not None:
            violations.append(Violation(rule, *pixel))

    is_ = {c: labels == c for c in range(NUM_CLASSES)}

    top_row = np.zeros((height, width), dtype=bool)
    top_row[0] = True
    bottom_row = np.zeros((height, width), dtype=bool)
    bottom_row[-1] = True

    if not is_[SKY].any():
        violations.append(Violation("no sky band", 0, 0))
    else:
        report("sky not on top", (top_row & ~is_[SKY]) | (is_[SKY] & _anything_above(~is_[SKY])))

    if not is_[ROAD].any():
        violations.append(Violation("no road band", height - 1, 0))
    else:
        below_road = _first_below_outside(labels, is_[ROAD] | is_[VEHICLE])
        report("road not at bottom", (bottom_row & ~is_[ROAD]) | (is_[ROAD] & (below_road != -1)))

    below_vehicle = _first_below_outside(labels, is_[VEHICLE])
    report("vehicle off road", is_[VEHICLE] & (below_vehicle != ROAD))

    below_person = _first_below_outside(labels, is_[PEDESTRIAN])
    report("pedestrian off sidewalk", is_[PEDESTRIAN] & (below_person != SIDEWALK))

    below_pole = _first_below_outside(labels, is_[POLE])
    report("pole not rooted", is_[POLE] & (below_pole != SIDEWALK))
    side_by_side = np.zeros_like(is_[POLE])
    side_by_side[:, 1:] |= is_[POLE][:, 1:] & is_[POLE][:, :-1]
    side_by_side[:, :-1] |= is_[POLE][:, :-1] & is_[POLE][:, 1:]
    report("pole not 1-wide", side_by_side)

    pole_below = np.zeros_like(is_[POLE])
    pole_below[:-1] = is_[POLE][1:]
    for group in _components(is_[SIGN]):
        if not any(pole_below[r, c] for r, c in group):
            violations.append(Violation("sign detached", *group[0]))
        if len(group) > MAX_SIGN_PIXELS:
            violations.append(Violation("sign too large", *group[0]))

    ground = is_[SIDEWALK] | is_[ROAD]
    report("building below ground", is_[BUILDING] & _anything_above(ground))

    # objects standing on the sidewalk do not interrupt it
    standing = is_[SIDEWALK] | is_[PEDESTRIAN] | is_[POLE] | is_[SIGN]
    below_sidewalk = _first_below_outside(labels, standing)
    report("sidewalk not bordering road", is_[SIDEWALK] & ~np.isin(below_sidewalk, (ROAD, VEHICLE)))
    report("sidewalk misplaced", is_[SIDEWALK] & _anything_above(is_[ROAD]))
    return violations


# Statistics

def class_histogram(dataset: Sequence[np.ndarray], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Pixel frequency of every class over a set of label maps"""
    maps = [np.asarray(m) for m in dataset]
    if not maps:
        raise DatasetError("class_histogram needs at least one label map")
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in maps:
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DatasetError(f"label map contains values outside [0, {num_classes})")
        counts += np.bincount(labels.reshape(-1), minlength=num_classes)
    total = counts.sum()
    if total == 0:
        raise DatasetError("class_histogram received only empty label maps")
    return counts / total


def subsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Stride subsampling on the two spatial axes (works for H x W and H x W x C)"""
    return np.asarray(labels)[::factor, ::factor]


# Datasets

def generate_dataset(seeds: Sequence[int], domain: Union[str, Domain], cfg: Optional[WorldConfig] = None,
                     workers: int = 4) -> List[DomainSample]:
    """Generate scenes on worker threads; results keep the order of seeds"""
    cfg = cfg or WorldConfig()
    seeds = [int(s) for s in seeds]
    results: List[Optional[DomainSample]] = [None] * len(seeds)
    tasks: "queue.Queue[int]" = queue.Queue()
    for index in range(len(seeds)):
        tasks.put(index)
    failures: List[BaseException] = []

    def worker():
        while True:
            try:
                index = tasks.get_nowait()
            except queue.Empty:
                return
            try:
                results[index] = generate(seeds[index], domain, cfg)
            except BaseException as e:
                failures.append(e)
                return

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(max(1, min(workers, len(seeds))))]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    if failures:
        raise failures[0]
    logger.debug(f"generated {len(seeds)} {_domain_name(domain)} scenes on {len(threads)} threads")
    return list(results)


def save_dataset(directory: Union[str, Path], samples: Sequence[DomainSample], cfg: WorldConfig) -> Path:
    """Write NDG1 image/label files plus manifest.json"""
    if not samples:
        raise DatasetError("refusing to save an empty dataset")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    domains = {s.domain for s in samples}
    if len(domains) != 1:
        raise DatasetError(f"a dataset holds one domain, got {sorted(domains)}")

    files = []
    for index, sample in enumerate(samples):
        image_name, label_name = f"{index:05d}_image.ndg", f"{index:05d}_labels.ndg"
        save_tensor(directory / image_name, sample.image)
        save_tensor(directory / label_name, sample.labels.astype(np.float64))
        files.append({"image": image_name, "labels": label_name})

    manifest = {
        "format": MANIFEST_FORMAT,
        "domain": domains.pop(),
        "seeds": [s.seed for s in samples],
        "count": len(samples),
        "config": cfg.__dict__,
        "config_hash": config_hash(cfg),
        "class_names": list(CLASS_NAMES),
        "files": files,
        "created": datetime.now().isoformat(),
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"saved {len(samples)} {manifest['domain']} scenes to {directory}")
    return directory / "manifest.json"


def load_manifest(directory: Union[str, Path]) -> Dict:
    manifest_file = Path(directory) / "manifest.json"
    if not manifest_file.exists():
        raise DatasetError(f"no manifest.json in {directory}")
    try:
        with open(manifest_file, "r") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {manifest_file}: {e}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{manifest_file} has unknown format {manifest.get('format')!r}")
    return manifest


def load_dataset(directory: Union[str, Path]) -> List[DomainSample]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    missing = [name for entry in manifest["files"] for name in entry.values() if not (directory / name).exists()]
    if missing:
        raise DatasetError(f"dataset {directory} is missing files: {', '.join(missing[:5])}")

    samples = []
    for seed, entry in zip(manifest["seeds"], manifest["files"]):
        samples.append(DomainSample(
            image=load_tensor(directory / entry["image"]),
            labels=load_tensor(directory / entry["labels"]).astype(np.int64),
            domain=manifest["domain"],
            seed=int(seed),
        ))
    return samples
