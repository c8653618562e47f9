import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from modules.error_handler import NonFiniteError, ShapeError
from modules.ndgrad import Tensor

logger = logging.getLogger(__name__)


class SGDState:
    """Momentum buffers keyed by parameter position"""

    def __init__(self, params: Optional[Sequence[Tensor]] = None):
        self.velocity: List[np.ndarray] = [np.zeros_like(p.data) for p in params] if params else []
        self.steps = 0

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {f"velocity.{i:03d}": v for i, v in enumerate(self.velocity)}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], steps: int = 0) -> "SGDState":
        state = cls()
        state.velocity = [arrays[k].copy() for k in sorted(arrays) if k.startswith("velocity.")]
        state.steps = steps
        return state


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: SGDState,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> SGDState:
    """
    In-place momentum SGD: v = momentum*v + g + weight_decay*p, then p -= lr*v.

    A missing gradient counts as zero so frozen branches still decay.
    """
    if len(params) != len(grads):
        raise ShapeError("sgd_step", (len(params),), (len(grads),), detail="one gradient per parameter")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ShapeError("sgd_step", (len(params),), (len(state.velocity),), detail="optimizer state does not match parameters")

    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError("sgd_step", param.shape, grad.shape)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("sgd_step", f"gradient of parameter {param.name or index}")
        velocity = momentum * state.velocity[index] + grad + weight_decay * param.data
        state.velocity[index] = velocity.astype(param.dtype, copy=False)
        param.data = (param.data - lr * velocity).astype(param.dtype, copy=False)

    state.steps += 1
    return state


def clip_grad_norm(grads: Sequence[Optional[np.ndarray]], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the original norm"""
    present = [g for g in grads if g is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in present)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in present:
            g *= scale
        logger.debug(f"clipped gradient norm {total:.3g} to {max_norm}")
    return total
