import logging
from typing import Dict, Optional, Tuple

import numpy as np

from modules import ndgrad as nd
from modules.bimal import FlowModel, bimal_loss, flow_grid
from modules.config import IGNORE_INDEX, LossConfig
from modules.costruct import StructNet, comal_loss
from modules.error_handler import NumericError, ShapeError
from modules.ndgrad import Tensor

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-6
MIN_CLASS_MASS = 1e-6


def cross_entropy(y, labels: np.ndarray, weights: Optional[np.ndarray] = None,
                  ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Weighted pixel cross-entropy of soft maps against hard labels, averaged over non-ignored pixels"""
    y = nd.as_tensor(y)
    labels = np.asarray(labels)
    if labels.shape != y.shape[:-1]:
        raise ShapeError("cross_entropy", y.shape, labels.shape)
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise NumericError("cross_entropy", "every pixel is ignored")
    num_classes = y.shape[-1]
    safe = np.where(valid, labels, 0)
    if safe.min() < 0 or safe.max() >= num_classes:
        raise ShapeError("cross_entropy", labels.shape, detail=f"labels must lie in [0, {num_classes}) or equal {ignore_index}")

    pixel_weights = valid.astype(y.dtype)
    if weights is not None:
        weights = np.asarray(weights, dtype=y.dtype)
        if weights.shape != (num_classes,):
            raise ShapeError("cross_entropy", weights.shape, (num_classes,), detail="one weight per class")
        pixel_weights = pixel_weights * weights[safe]

    picked = nd.gather(y, safe[..., None], axis=-1).reshape(labels.shape)
    return -(nd.log(picked) * pixel_weights).sum() * (1.0 / count)


def entropy_loss(y, reduction: str = "sum") -> Tensor:
    """-(1/log C) sum y log y; "sum" totals every pixel, "mean" averages per pixel"""
    y = nd.as_tensor(y)
    num_classes = y.shape[-1]
    if num_classes < 2:
        raise ShapeError("entropy_loss", y.shape, detail="needs at least two classes")
    total = -(y * nd.log(y)).sum() * (1.0 / np.log(num_classes))
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / (y.size // num_classes))
    raise NumericError("entropy_loss", f"unknown reduction {reduction!r}")


def entropy_neg_gradient(y, num_classes: int) -> np.ndarray:
    """-dL/dy of the per-component entropy term L(y) = -(1/log C) y log y"""
    y = np.asarray(y, dtype=np.float64)
    return (1.0 + np.log(y)) / np.log(num_classes)


def normalized_entropy_map(y) -> np.ndarray:
    """Per-pixel entropy in [0, 1] for diagnostics"""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    safe = np.maximum(y, 1e-12)
    return -(y * np.log(safe)).sum(axis=-1) / np.log(y.shape[-1])


def gibbs_gap(p: np.ndarray, q: np.ndarray) -> float:
    """Cross-entropy minus entropy, -sum p log q + sum p log p (never negative)"""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    support = p > 0
    if np.any(q[support] <= 0):
        return float("inf")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def _check_simplex(q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or np.any(q < 0) or abs(q.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise NumericError("class_weights", f"{name} is not a probability vector: {np.round(q, 6).tolist()}")
    return q


def class_weights(q: np.ndarray, qprime: Optional[np.ndarray] = None, clamp: float = 10.0) -> np.ndarray:
    """w_c = min(q'_c / q_c, clamp), q floored at 1e-6 per class; q' defaults to uniform"""
    q = _check_simplex(q, "q")
    qprime = np.full(len(q), 1.0 / len(q)) if qprime is None else _check_simplex(qprime, "q'")
    if qprime.shape != q.shape:
        raise ShapeError("class_weights", q.shape, qprime.shape)
    ratio = qprime / np.maximum(q, MIN_CLASS_MASS)
    clamped = ratio > clamp
    if clamped.any():
        logger.warning(f"class weights clamped to {clamp} for classes {np.flatnonzero(clamped).tolist()}")
    return np.minimum(ratio, clamp)


def pseudo_labels(y_t, threshold: float = 0.9, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Argmax where the peak probability reaches threshold, ignore elsewhere"""
    if not 0.5 <= threshold < 1.0:
        raise NumericError("pseudo_labels", f"threshold must lie in [0.5, 1), got {threshold}")
    probs = np.asarray(y_t.data if isinstance(y_t, Tensor) else y_t)
    labels = np.argmax(probs, axis=-1)
    return np.where(probs.max(axis=-1) >= threshold, labels, ignore_index).astype(np.int64)


# Training objectives

def _struct_grid(probs, stride: int) -> Tensor:
    probs = nd.as_tensor(probs)
    if probs.ndim == 3:
        return probs[::stride, ::stride, :]
    return probs[:, ::stride, ::stride, :]


def objective_source(source_probs, source_labels, weights: Optional[np.ndarray] = None) -> Tuple[Tensor, Dict[str, float]]:
    ce = cross_entropy(source_probs, source_labels, weights)
    return ce, {"ce_source": ce.item(), "total": ce.item()}


def objective_entmin(source_probs, source_labels, target_probs, cfg: LossConfig) -> Tuple[Tensor, Dict[str, float]]:
    """Supervised source CE plus mean target entropy"""
    ce = cross_entropy(source_probs, source_labels)
    entropy = entropy_loss(target_probs, reduction="mean")
    total = ce + cfg.lambda_entropy * entropy
    return total, {"ce_source": ce.item(), "entropy": entropy.item(), "total": total.item()}


def objective_bimal(source_probs, source_labels, target_images, target_probs, flow: FlowModel, cfg: LossConfig,
                    stride: int = 2, smoothing: float = 0.02) -> Tuple[Tensor, Dict[str, float]]:
    """CE(source) + lambda_bimal * bimal_loss(target) on the flow grid"""
    ce = cross_entropy(source_probs, source_labels)
    components = {"ce_source": ce.item(), "bimal": 0.0}
    total = ce
    if cfg.lambda_bimal > 0:
        images, probs = flow_grid(target_images, target_probs, stride)
        likelihood = bimal_loss(flow, images, probs, cfg.sigma1, cfg.sigma2, cfg.tau_form, smoothing, cfg.use_tau)
        components["bimal"] = likelihood.item()
        total = ce + cfg.lambda_bimal * likelihood
    components["total"] = total.item()
    return total, components


def objective_comal(source_probs, source_labels, target_probs, structnet: StructNet, q_source: np.ndarray,
                    cfg: LossConfig, stride: int = 2, seed: int = 0,
                    q_target: Optional[np.ndarray] = None) -> Tuple[Tensor, Dict[str, float]]:
    """
    Class-weighted CE on source, class-weighted pseudo-label CE on target, and
    lambda_comal times the conditional structure loss on both domains.

    Target weighting reuses the source histogram unless q_target is given.
    A target batch with no confident pixel drops its CE term.
    """
    num_classes = nd.as_tensor(source_probs).shape[-1]
    if cfg.class_weighting:
        qprime = cfg.qprime_vector(num_classes)
        source_weights = class_weights(q_source, qprime, cfg.weight_clamp)
        target_weights = source_weights if q_target is None else class_weights(q_target, qprime, cfg.weight_clamp)
    else:
        source_weights = target_weights = np.ones(num_classes)

    ce_source = cross_entropy(source_probs, source_labels, source_weights)
    total = ce_source
    components = {"ce_source": ce_source.item(), "ce_target": 0.0, "comal": 0.0, "target_skipped": 0.0}

    targets = pseudo_labels(target_probs, cfg.pseudo_threshold)
    if np.any(targets != IGNORE_INDEX):
        ce_target = cross_entropy(target_probs, targets, target_weights)
        total = total + ce_target
        components["ce_target"] = ce_target.item()
    else:
        components["target_skipped"] = 1.0
        logger.warning("no target pixel passed the pseudo-label threshold; skipping target CE")

    if cfg.lambda_comal > 0:
        source_grid, target_grid = _struct_grid(source_probs, stride), _struct_grid(target_probs, stride)
        structure = comal_loss(structnet, source_grid, cfg.num_anchors, seed) + comal_loss(structnet, target_grid, cfg.num_anchors, seed + 1)
        total = total + cfg.lambda_comal * structure
        components["comal"] = structure.item()

    components["total"] = total.item()
    return total, components
