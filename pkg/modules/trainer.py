"""
trainer - deterministic training phases for comal-lab.

Pretrains the flow and the structure network on source ground truths, warms
the segmenter up on source labels, then adapts it to the target domain under
one of four regimes: source-only, entmin, bimal or comal. Every random choice
is drawn from the run seed, so a phase (and a resumed phase) reproduces its
metric history exactly.
"""

import csv
import json
import logging
import queue
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from modules import ndgrad as nd
from modules.bimal import FlowModel, onehot, relax, train_flow
from modules.config import CLASS_NAMES, IGNORE_INDEX, LabConfig, NUM_CLASSES, config_hash, write_config
from modules.costruct import StructNet, train_struct
from modules.error_handler import DatasetError, DivergenceError, NonFiniteError, PrerequisiteError, SerializationError
from modules.evalcli import MetricsReport, evaluate, grad_per_class, nonzero_dispersion
from modules.losses import (
    class_weights,
    cross_entropy,
    objective_bimal,
    objective_comal,
    objective_entmin,
    objective_source,
    pseudo_labels,
)
from modules.optim import SGDState, sgd_step
from modules.performance_monitor import PerformanceMonitor
from modules.segnet import SegNet
from modules.synthworld import class_histogram, generate_dataset, load_dataset, load_manifest, save_dataset, subsample_labels

logger = logging.getLogger(__name__)

__all__ = ["sgd_step", "run_phase", "ablation_suite", "run_experiment", "Checkpoint", "RunData", "build_datasets"]

RUN_FORMAT = "comal-lab/run-1"

ABLATION_SETTINGS = (
    ("baseline", "source-only", {}),
    ("L_llk", "bimal", {"use_tau": False}),
    ("L_llk+tau", "bimal", {"use_tau": True}),
    ("L_cls", "comal", {"lambda_comal": 0.0}),
    ("L_cls+L_CoMaL", "comal", {}),
)


@dataclass
class RunData:
    source_images: np.ndarray
    source_labels: np.ndarray
    target_images: np.ndarray
    eval_images: np.ndarray
    eval_labels: np.ndarray


@dataclass
class Checkpoint:
    """Segmenter parameters, optimizer momenta, progress and metric history"""

    params: Dict[str, np.ndarray]
    momenta: Dict[str, np.ndarray]
    epoch: int
    config_hash: str
    history: List[Dict[str, Any]] = field(default_factory=list)
    phase: str = ""
    regime: str = ""
    steps: int = 0

    def save(self, path: Union[str, Path]):
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"momentum/{k}": v for k, v in self.momenta.items()})
        meta = {"kind": "checkpoint", "epoch": self.epoch, "config_hash": self.config_hash, "history": self.history,
                "phase": self.phase, "regime": self.regime, "steps": self.steps}
        nd.save_named(path, tensors, meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        arrays, meta = nd.load_named(path)
        if meta.get("kind") != "checkpoint":
            raise SerializationError(f"{path} is not a training checkpoint")
        return cls(
            params={k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")},
            momenta={k[len("momentum/"):]: v for k, v in arrays.items() if k.startswith("momentum/")},
            epoch=int(meta["epoch"]),
            config_hash=meta["config_hash"],
            history=list(meta.get("history", [])),
            phase=meta.get("phase", ""),
            regime=meta.get("regime", ""),
            steps=int(meta.get("steps", 0)),
        )


@dataclass
class PhaseResult:
    net: SegNet
    checkpoint: Checkpoint
    history: List[Dict[str, Any]]
    q_target: Optional[np.ndarray] = None

    @property
    def final(self) -> Dict[str, Any]:
        return self.history[-1] if self.history else {}


class Prefetcher:
    """Single producer thread filling a bounded queue; consumption order equals production order"""

    _DONE = object()

    def __init__(self, producer: Iterator, size: int = 4):
        self.queue: "queue.Queue[Any]" = queue.Queue(maxsize=max(1, size))
        self.error: Optional[BaseException] = None
        self.stopped = threading.Event()
        self.thread = threading.Thread(target=self._run, args=(producer,), daemon=True)
        self.thread.start()

    def _run(self, producer: Iterator):
        try:
            for item in producer:
                while not self.stopped.is_set():
                    try:
                        self.queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self.stopped.is_set():
                    return
        except BaseException as e:
            self.error = e
        while not self.stopped.is_set():
            try:
                self.queue.put(self._DONE, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self):
        try:
            while True:
                item = self.queue.get()
                if item is self._DONE:
                    break
                yield item
        finally:
            self.stopped.set()
        if self.error is not None:
            raise self.error


# Data

def _split_seeds(seed: int, count: int, split: str) -> List[int]:
    offset = {"source": 0, "target": 1, "eval": 2}[split]
    return [seed * 1_000_000 + offset * 100_000 + i for i in range(count)]


def _stack(samples) -> Tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


def build_datasets(cfg: LabConfig, data_dir: Optional[Union[str, Path]] = None) -> RunData:
    """Generate (or reload) the source, target and eval splits for a seed"""
    train = cfg.train
    splits = {"source": ("source", train.num_source), "target": ("target", train.num_target), "eval": ("target", train.num_eval)}
    loaded = {}
    for split, (domain, count) in splits.items():
        directory = Path(data_dir) / split if data_dir else None
        seeds = _split_seeds(train.seed, count, split)
        if directory is not None and (directory / "manifest.json").exists():
            manifest = load_manifest(directory)
            if manifest["seeds"] == seeds and manifest["config_hash"] == config_hash(cfg.world):
                loaded[split] = load_dataset(directory)
                continue
        samples = generate_dataset(seeds, domain, cfg.world, train.workers)
        if directory is not None:
            save_dataset(directory, samples, cfg.world)
        loaded[split] = samples

    source_images, source_labels = _stack(loaded["source"])
    target_images, _ = _stack(loaded["target"])
    eval_images, eval_labels = _stack(loaded["eval"])
    dtype = nd.get_default_dtype()
    return RunData(source_images.astype(dtype), source_labels, target_images.astype(dtype), eval_images.astype(dtype), eval_labels)


def flow_codes(labels: np.ndarray, cfg: LabConfig) -> np.ndarray:
    """Relaxed one-hot ground truths on the flow grid, (n, d)"""
    grid = np.stack([subsample_labels(m, cfg.flow.grid_stride) for m in labels])
    with nd.no_grad():
        return relax(onehot(grid), cfg.flow.smoothing).data


def struct_grids(labels: np.ndarray, cfg: LabConfig) -> np.ndarray:
    return np.stack([subsample_labels(m, cfg.flow.grid_stride) for m in labels])


def pretrain_flow(data: RunData, cfg: LabConfig) -> FlowModel:
    return train_flow(flow_codes(data.source_labels, cfg), cfg.flow, seed=cfg.train.seed)


def pretrain_struct(data: RunData, cfg: LabConfig) -> StructNet:
    return train_struct(struct_grids(data.source_labels, cfg), cfg.struct, seed=cfg.train.seed)


# Phases

@contextmanager
def frozen(*models):
    """Disable gradient collection on auxiliary models for the duration of a phase"""
    params = [p for m in models if m is not None for p in m.parameters()]
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag


def _batches(seed: int, phase: str, epoch: int, n_source: int, n_target: int, batch_size: int):
    source_order = nd.make_rng(seed, "epoch", phase, epoch).permutation(n_source)
    target_order = nd.make_rng(seed, "target-epoch", phase, epoch).permutation(n_target) if n_target else None
    for step, start in enumerate(range(0, n_source, batch_size)):
        src = source_order[start:start + batch_size]
        tgt = None
        if target_order is not None:
            tgt = target_order[np.arange(start, start + len(src)) % n_target]
        yield step, src, tgt


def _metric_row(phase: str, regime: str, epoch: int, components: Dict[str, float], report: MetricsReport) -> Dict[str, Any]:
    row = {"phase": phase, "regime": regime, "epoch": epoch, "loss": components.get("total", 0.0)}
    for key in ("ce_source", "ce_target", "entropy", "bimal", "comal"):
        row[key] = components.get(key, 0.0)
    row.update({"miou": report.miou, "head_iou": report.head_iou, "tail_iou": report.tail_iou,
                "pixel_accuracy": report.pixel_accuracy})
    for name, value in zip(CLASS_NAMES, report.per_class_iou):
        row[f"iou_{name}"] = value
    return row


def write_history_csv(path: Union[str, Path], history: List[Dict[str, Any]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not history:
        path.write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in row.items()})


def _target_histogram(net: SegNet, images: np.ndarray, threshold: float, fallback: np.ndarray, batch_size: int) -> np.ndarray:
    labels = []
    for start in range(0, len(images), batch_size):
        with nd.no_grad():
            probs, _ = net.forward(images[start:start + batch_size])
        labels.append(pseudo_labels(probs, threshold).reshape(-1))
    kept = np.concatenate(labels)
    kept = kept[kept != IGNORE_INDEX]
    if kept.size == 0:
        return fallback
    return np.bincount(kept, minlength=NUM_CLASSES) / kept.size


def run_phase(regime: str, cfg: LabConfig, data: RunData, net: Optional[SegNet] = None, epochs: Optional[int] = None,
              flow: Optional[FlowModel] = None, structnet: Optional[StructNet] = None,
              q_source: Optional[np.ndarray] = None, out_dir: Optional[Union[str, Path]] = None,
              phase: Optional[str] = None, resume: Optional[Checkpoint] = None) -> PhaseResult:
    """
    Train the segmenter for `epochs` epochs under one regime.

    After each epoch the eval split is scored and a metric row appended; with
    out_dir set, the metric CSV and a resumable checkpoint are rewritten.
    Flow and structure network stay bit-identical.
    """
    train, losses_cfg = cfg.train, cfg.loss
    phase = phase or regime
    epochs = train.adapt_epochs if epochs is None else epochs
    if regime == "bimal" and flow is None:
        raise PrerequisiteError("bimal", "a trained flow model")
    if regime == "comal" and structnet is None:
        raise PrerequisiteError("comal", "a trained structure network")
    if regime == "comal" and q_source is None:
        raise PrerequisiteError("comal", "the source class histogram")
    if len(data.source_images) == 0:
        raise DatasetError("run_phase needs at least one source sample")

    net = net.copy() if net is not None else SegNet.init(train.seed)
    params = net.parameters()
    names = sorted(net.params)
    state = SGDState(params)
    history: List[Dict[str, Any]] = []
    start_epoch = 0
    fingerprint = config_hash(cfg)
    if resume is not None:
        net.load_state_dict(resume.params)
        state = SGDState.from_arrays({f"velocity.{names.index(k):03d}": v for k, v in resume.momenta.items()}, resume.steps)
        history = list(resume.history)
        start_epoch = resume.epoch

    q_target = None
    if resume is not None:
        if resume.config_hash != fingerprint:
            logger.warning(f"resuming {phase} from a checkpoint written under config {resume.config_hash}")
        if regime == "comal" and losses_cfg.refresh_target_histogram and start_epoch > 0:
            q_target = _target_histogram(net, data.target_images, losses_cfg.pseudo_threshold, q_source, train.batch_size * 2)
    needs_target = regime != "source-only"
    n_target = len(data.target_images) if needs_target else 0
    checkpoint_path = Path(out_dir) / "checkpoints" / f"{phase}.ndgc" if out_dir else None
    logger.info(f"phase {phase} ({regime}): epochs {start_epoch + 1}..{epochs}")

    with frozen(flow, structnet):
        for epoch in range(start_epoch, epochs):
            sums: Dict[str, float] = {}
            count = 0
            batches = _batches(train.seed, phase, epoch, len(data.source_images), n_target, train.batch_size)
            prefetched = Prefetcher(((step, data.source_images[src], data.source_labels[src],
                                      data.target_images[tgt] if tgt is not None else None)
                                     for step, src, tgt in batches), train.prefetch)
            for step, src_images, src_labels, tgt_images in prefetched:
                nd.zero_grad(params)
                try:
                    source_probs, _ = net.forward(src_images)
                    target_probs = net.forward(tgt_images)[0] if tgt_images is not None else None
                    if regime == "source-only":
                        total, components = objective_source(source_probs, src_labels)
                    elif regime == "entmin":
                        total, components = objective_entmin(source_probs, src_labels, target_probs, losses_cfg)
                    elif regime == "bimal":
                        total, components = objective_bimal(source_probs, src_labels, tgt_images, target_probs, flow,
                                                            losses_cfg, cfg.flow.grid_stride, cfg.flow.smoothing)
                    else:
                        total, components = objective_comal(source_probs, src_labels, target_probs, structnet, q_source,
                                                            losses_cfg, cfg.flow.grid_stride,
                                                            seed=int(nd.make_rng(train.seed, "anchors", phase, epoch, step).integers(2**31)),
                                                            q_target=q_target)
                except NonFiniteError:
                    raise DivergenceError(phase, state.steps, float("nan")) from None
                if not np.isfinite(components["total"]):
                    raise DivergenceError(phase, state.steps, components["total"])
                nd.backward(total)
                try:
                    sgd_step(params, [p.grad for p in params], state, train.lr, train.momentum, train.weight_decay)
                except NonFiniteError:
                    raise DivergenceError(phase, state.steps, components["total"]) from None
                logger.debug(f"{phase} epoch {epoch + 1} step {step}: loss {components['total']:.5f}")
                for key, value in components.items():
                    sums[key] = sums.get(key, 0.0) + value
                count += 1

            means = {k: v / max(count, 1) for k, v in sums.items()}
            report = evaluate(net, data.eval_images, data.eval_labels, train.batch_size * 2, train.tail_classes)
            history.append(_metric_row(phase, regime, epoch + 1, means, report))
            logger.info(f"{phase} epoch {epoch + 1}/{epochs}: loss {means.get('total', 0.0):.4f} mIoU {report.miou:.4f} tail {report.tail_iou:.4f}")

            if regime == "comal" and losses_cfg.refresh_target_histogram:
                q_target = _target_histogram(net, data.target_images, losses_cfg.pseudo_threshold, q_source, train.batch_size * 2)

            checkpoint = Checkpoint(net.state_dict(), {names[i]: v for i, v in enumerate(state.velocity)}, epoch + 1,
                                    fingerprint, history, phase, regime, state.steps)
            if out_dir:
                write_history_csv(Path(out_dir) / "metrics" / f"{phase}.csv", history)
                checkpoint.save(checkpoint_path)

    if epochs <= start_epoch:
        checkpoint = Checkpoint(net.state_dict(), {names[i]: v for i, v in enumerate(state.velocity)}, start_epoch,
                                fingerprint, history, phase, regime, state.steps)
        if out_dir:
            write_history_csv(Path(out_dir) / "metrics" / f"{phase}.csv", history)
            checkpoint.save(checkpoint_path)
    return PhaseResult(net, checkpoint, history, q_target)


# Whole experiments

def _write_manifest(out_dir: Path, manifest: Dict[str, Any]):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def _base_manifest(command: str, cfg: LabConfig) -> Dict[str, Any]:
    return {
        "format": RUN_FORMAT,
        "command": command,
        "seed": cfg.train.seed,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "tail_classes": list(cfg.train.tail_classes),
        "data": {"source": "data/source", "target": "data/target", "eval": "data/eval"},
        "created": datetime.now().isoformat(),
    }


def prepare(cfg: LabConfig, out_dir: Path, monitor: PerformanceMonitor, need_flow: bool, need_struct: bool):
    """Datasets, histogram and pretrained auxiliary models, reusing saved ones when present"""
    token = monitor.start_operation("datasets")
    data = build_datasets(cfg, out_dir / "data")
    monitor.end_operation(token)
    q_source = class_histogram(list(data.source_labels))

    flow = structnet = None
    if need_flow:
        flow_path = out_dir / "checkpoints" / "flow.ndgc"
        if flow_path.exists():
            flow = FlowModel.load(flow_path)
        else:
            token = monitor.start_operation("train-flow")
            flow = pretrain_flow(data, cfg)
            monitor.end_operation(token)
            flow.save(flow_path)
    if need_struct:
        struct_path = out_dir / "checkpoints" / "structnet.ndgc"
        if struct_path.exists():
            structnet = StructNet.load(struct_path)
        else:
            token = monitor.start_operation("train-struct")
            structnet = pretrain_struct(data, cfg)
            monitor.end_operation(token)
            structnet.save(struct_path)
    return data, q_source, flow, structnet


def warm_start(cfg: LabConfig, data: RunData, out_dir: Path, monitor: PerformanceMonitor) -> PhaseResult:
    path = out_dir / "checkpoints" / "warmup.ndgc"
    resume = Checkpoint.load(path) if path.exists() else None
    token = monitor.start_operation("warmup")
    result = run_phase("source-only", cfg, data, epochs=cfg.train.warmup_epochs, out_dir=out_dir, phase="warmup", resume=resume)
    monitor.end_operation(token)
    return result


def run_experiment(cfg: LabConfig, out_dir: Union[str, Path]) -> PhaseResult:
    """Single regime: pretrain what it needs, warm up, adapt"""
    out_dir = Path(out_dir)
    nd.set_default_dtype(cfg.train.dtype)
    regime = cfg.train.regime
    monitor = PerformanceMonitor()
    write_config(cfg, out_dir / "config.env")
    data, q_source, flow, structnet = prepare(cfg, out_dir, monitor, regime == "bimal", regime == "comal")
    warm = warm_start(cfg, data, out_dir, monitor)

    token = monitor.start_operation(regime)
    result = run_phase(regime, cfg, data, warm.net, cfg.train.adapt_epochs, flow, structnet, q_source, out_dir, phase=regime)
    monitor.end_operation(token)

    manifest = _base_manifest("run", cfg)
    manifest["settings"] = [{"name": regime, "regime": regime, "phase": regime}]
    manifest["performance"] = monitor.get_performance_summary()
    manifest["slow_phases"] = monitor.get_slow_operations()
    _write_manifest(out_dir, manifest)
    return result


def ablation_suite(cfg: LabConfig, out_dir: Union[str, Path]) -> List[Dict[str, Any]]:
    """
    Five settings from one shared warm start: source-only, likelihood only,
    likelihood + smoothness, class-weighted CE with pseudo-labels, and the full
    conditional structure objective. Returns one row per setting.
    """
    out_dir = Path(out_dir)
    nd.set_default_dtype(cfg.train.dtype)
    monitor = PerformanceMonitor()
    write_config(cfg, out_dir / "config.env")
    data, q_source, flow, structnet = prepare(cfg, out_dir, monitor, True, True)
    warm = warm_start(cfg, data, out_dir, monitor)

    rows, settings = [], []
    for name, regime, overrides in ABLATION_SETTINGS:
        setting_cfg = cfg.replace(regime=regime, **overrides)
        phase = name.replace("+", "_plus_")
        token = monitor.start_operation(phase)
        result = run_phase(regime, setting_cfg, data, warm.net, cfg.train.adapt_epochs, flow, structnet, q_source,
                           out_dir, phase=phase)
        monitor.end_operation(token)
        monitor.record_system_metrics()
        final = result.final
        rows.append({"setting": name, "regime": regime, "miou": final["miou"], "head_iou": final["head_iou"],
                     "tail_iou": final["tail_iou"], "pixel_accuracy": final["pixel_accuracy"]})
        settings.append({"name": name, "regime": regime, "phase": phase})

    write_history_csv(out_dir / "metrics" / "ablation.csv", rows)
    write_gradient_analysis(cfg, data, warm.net, structnet, q_source, out_dir)

    manifest = _base_manifest("ablation", cfg)
    manifest["settings"] = settings
    manifest["performance"] = monitor.get_performance_summary()
    manifest["slow_phases"] = monitor.get_slow_operations()
    _write_manifest(out_dir, manifest)
    return rows


def write_gradient_analysis(cfg: LabConfig, data: RunData, net: SegNet, structnet: Optional[StructNet],
                            q_source: np.ndarray, out_dir: Path) -> Dict[str, np.ndarray]:
    """Per-class gradient shares on an eval batch: plain CE vs the full class-weighted objective"""
    images = data.eval_images[:cfg.train.batch_size]
    labels = data.eval_labels[:cfg.train.batch_size]
    stride = cfg.flow.grid_stride

    def plain(probs, targets):
        return cross_entropy(probs, targets)

    def weighted(probs, targets):
        if structnet is None:
            weights = class_weights(q_source, cfg.loss.qprime_vector(NUM_CLASSES), cfg.loss.weight_clamp)
            return cross_entropy(probs, targets, weights)
        return objective_comal(probs, targets, probs, structnet, q_source, cfg.loss, stride, cfg.train.seed)[0]

    with frozen(structnet):
        results = {"cross_entropy": grad_per_class(net, plain, images, labels),
                   "objective_comal": grad_per_class(net, weighted, images, labels)}
    rows = [{"loss": name, **{c: float(v) for c, v in zip(CLASS_NAMES, values)}, "dispersion": nonzero_dispersion(values)}
            for name, values in results.items()]
    write_history_csv(out_dir / "metrics" / "grad_per_class.csv", rows)
    return results
