"""
bimal - bijective flow over segmentation maps and the likelihood losses built on it.

Soft segmentation maps are relaxed into unconstrained real codes, a stack of
affine coupling layers maps codes onto a standard normal latent, and the
change-of-variables formula gives an exact negative log-likelihood. The
likelihood plus a neighbourhood smoothness term forms the adaptation loss and,
averaged over target predictions, an estimate of how far those predictions
sit from the source label distribution.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules import ndgrad as nd
from modules.config import FlowConfig, NUM_CLASSES, TAU_FORMS
from modules.error_handler import DatasetError, DivergenceError, NonFiniteError, NumericError, ShapeError
from modules.ndgrad import Tensor
from modules.optim import SGDState, clip_grad_norm, sgd_step

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


# Relaxation between soft maps and flow codes

def relax(y, smoothing: float = 0.02, num_classes: Optional[int] = None) -> Tensor:
    """log((1-eps)*y + eps/C), flattened per sample: (H,W,C) -> (d,), (B,H,W,C) -> (B,d)"""
    y = nd.as_tensor(y)
    num_classes = num_classes or y.shape[-1]
    if not 0.0 < smoothing < 1.0 / num_classes:
        raise NumericError("relax", f"smoothing must lie in (0, 1/{num_classes}), got {smoothing}")
    code = nd.log((1.0 - smoothing) * y + smoothing / num_classes)
    if y.ndim == 4:
        return code.reshape((y.shape[0], -1))
    return code.reshape((-1,))


def unrelax(v, shape: Tuple[int, int, int]) -> np.ndarray:
    """Soft map whose relaxation is closest to v: per-pixel normalised exp(v)"""
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    grid = v.reshape(v.shape[:-1] + tuple(shape))
    shifted = np.exp(grid - grid.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


# Flow model

class FlowModel:
    """
    K affine coupling layers with fixed seeded permutations in between, closed by
    an element-wise affine layer.

    Layer k keeps the even (k even) or odd (k odd) coordinates and transforms
    the rest with x * exp(s) + t, where s and t come from two-layer tanh
    perceptrons on the kept half and s is softly bounded by bound * tanh(raw / bound).
    """

    def __init__(self, dim: int, num_layers: int, hidden: int, scale_bound: float, seed: int):
        self.dim = dim
        self.num_layers = num_layers
        self.hidden = hidden
        self.scale_bound = scale_bound
        self.seed = seed
        self.params: Dict[str, Tensor] = {}
        self.history: List[float] = []

        indices = np.arange(dim)
        self.partitions: List[Tuple[np.ndarray, np.ndarray]] = []
        self.permutations: List[np.ndarray] = []
        for k in range(num_layers):
            keep, change = indices[k % 2::2], indices[1 - k % 2::2]
            self.partitions.append((keep, change))
            if k < num_layers - 1:
                self.permutations.append(nd.make_rng(seed, "flow-permutation", k).permutation(dim))

    @classmethod
    def init(cls, seed: int, dim: int, num_layers: int = 6, hidden: int = 64, scale_bound: float = 2.0,
             identity: bool = True, dtype=None) -> "FlowModel":
        """Seeded init; identity=True zeroes every output layer so the flow starts as a permutation"""
        if dim < 2:
            raise ShapeError("FlowModel.init", (dim,), detail="coupling needs at least two dimensions")
        model = cls(dim, num_layers, hidden, scale_bound, seed)
        rng = nd.make_rng(seed, "flow-weights")
        for k, (keep, change) in enumerate(model.partitions):
            for net in ("s", "t"):
                bound = 1.0 / np.sqrt(len(keep))
                out_bound = 0.0 if identity else 1.0 / np.sqrt(hidden)
                model._add(f"layer{k}.{net}.w1", rng.uniform(-bound, bound, (len(keep), hidden)), dtype)
                model._add(f"layer{k}.{net}.b1", np.zeros(hidden), dtype)
                model._add(f"layer{k}.{net}.w2", rng.uniform(-out_bound, out_bound, (hidden, len(change))) if out_bound else np.zeros((hidden, len(change))), dtype)
                model._add(f"layer{k}.{net}.b2", np.zeros(len(change)), dtype)
        scale = 0.0 if identity else 0.1
        model._add("affine.log_scale", rng.uniform(-scale, scale, dim) if scale else np.zeros(dim), dtype)
        model._add("affine.shift", rng.uniform(-scale, scale, dim) if scale else np.zeros(dim), dtype)
        return model

    @classmethod
    def from_config(cls, seed: int, dim: int, cfg: FlowConfig, dtype=None) -> "FlowModel":
        return cls.init(seed, dim, cfg.flow_layers, cfg.flow_hidden, cfg.flow_scale_bound, dtype=dtype)

    def _add(self, name: str, value: np.ndarray, dtype):
        self.params[name] = nd.parameter(value, name, dtype)

    def parameters(self) -> List[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def total_permutation(self) -> np.ndarray:
        """Index map z = v[perm] of an identity-initialised model"""
        order = np.arange(self.dim)
        for perm in self.permutations:
            order = order[perm]
        return order

    # forward / inverse

    def _nets(self, k: int, kept):
        p = self.params
        outputs = []
        for net in ("s", "t"):
            hidden = nd.tanh(kept @ p[f"layer{k}.{net}.w1"] + p[f"layer{k}.{net}.b1"])
            outputs.append(hidden @ p[f"layer{k}.{net}.w2"] + p[f"layer{k}.{net}.b2"])
        raw_s, t = outputs
        s = self.scale_bound * nd.tanh(raw_s * (1.0 / self.scale_bound))
        return s, t

    def forward(self, v, check_finite: bool = True) -> Tuple[Tensor, Tensor]:
        """(B,d) or (d,) codes -> latent z and per-sample log|det dz/dv|"""
        x = nd.as_tensor(v, self.params["affine.shift"])
        single = x.ndim == 1
        if single:
            x = x.reshape((1, -1))
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError("flow_forward", x.shape, (self.dim,))

        logdet = None
        for k, (keep, change) in enumerate(self.partitions):
            kept, moved = nd.take(x, keep, axis=1), nd.take(x, change, axis=1)
            s, t = self._nets(k, kept)
            moved = moved * nd.exp(s) + t
            x = nd.take(nd.concatenate([kept, moved], axis=1), np.argsort(np.concatenate([keep, change])), axis=1)
            layer_logdet = s.sum(axis=1)
            logdet = layer_logdet if logdet is None else logdet + layer_logdet
            if k < len(self.permutations):
                x = nd.take(x, self.permutations[k], axis=1)
            if check_finite and not np.all(np.isfinite(x.data)):
                raise NonFiniteError(f"flow coupling layer {k}")

        log_scale = self.params["affine.log_scale"]
        x = x * nd.exp(log_scale) + self.params["affine.shift"]
        affine_logdet = log_scale.sum() * np.ones(x.shape[0], dtype=x.dtype)
        logdet = affine_logdet if logdet is None else logdet + affine_logdet
        if check_finite and not np.all(np.isfinite(x.data)):
            raise NonFiniteError("flow affine layer")

        if single:
            return x.reshape((self.dim,)), logdet.reshape(())
        return x, logdet

    __call__ = forward

    def inverse(self, z) -> np.ndarray:
        """Exact inverse of forward on plain arrays"""
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=self.params["affine.shift"].dtype)
        single = z.ndim == 1
        x = z.reshape((1, -1)) if single else z.copy()
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("flow_inverse", "latent input")

        with nd.no_grad():
            x = (x - self.params["affine.shift"].data) * np.exp(-self.params["affine.log_scale"].data)
            for k in reversed(range(self.num_layers)):
                if k < len(self.permutations):
                    x = x[:, np.argsort(self.permutations[k])]
                keep, change = self.partitions[k]
                s, t = self._nets(k, Tensor(x[:, keep]))
                restored = np.empty_like(x)
                restored[:, keep] = x[:, keep]
                restored[:, change] = (x[:, change] - t.data) * np.exp(-s.data)
                x = restored
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("flow_inverse")
        return x.reshape(-1) if single else x

    # persistence

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        for name, param in self.params.items():
            if name not in arrays or arrays[name].shape != param.shape:
                raise ShapeError("FlowModel.load_state_dict", param.shape, np.shape(arrays.get(name)), detail=name)
            param.data = arrays[name].astype(param.dtype)

    def meta(self) -> Dict:
        return {"kind": "flow", "dim": self.dim, "num_layers": self.num_layers, "hidden": self.hidden,
                "scale_bound": self.scale_bound, "seed": self.seed, "history": self.history}

    def save(self, path: Union[str, Path]):
        nd.save_named(path, self.state_dict(), self.meta())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FlowModel":
        arrays, meta = nd.load_named(path)
        if meta.get("kind") != "flow":
            raise ShapeError("FlowModel.load", detail=f"{path} does not hold a flow")
        model = cls.init(meta["seed"], meta["dim"], meta["num_layers"], meta["hidden"], meta["scale_bound"])
        model.load_state_dict(arrays)
        model.history = list(meta.get("history", []))
        return model

    def copy(self) -> "FlowModel":
        clone = FlowModel.init(self.seed, self.dim, self.num_layers, self.hidden, self.scale_bound)
        clone.load_state_dict(self.state_dict())
        clone.history = list(self.history)
        return clone


def flow_forward(model: FlowModel, v) -> Tuple[Tensor, Tensor]:
    return model.forward(v)


def flow_inverse(model: FlowModel, z) -> np.ndarray:
    return model.inverse(z)


def prior_logprob(z) -> Tensor:
    """Standard normal log density, summed over the last axis"""
    z = nd.as_tensor(z)
    dim = z.shape[-1]
    return -0.5 * (z * z).sum(axis=-1) - 0.5 * dim * LOG_2PI


def nll(model: FlowModel, v) -> Tensor:
    """Exact negative log-likelihood per sample"""
    z, logdet = model.forward(v)
    return -prior_logprob(z) - logdet


def sample_flow(model: FlowModel, count: int, seed: int, shape: Tuple[int, int, int]) -> np.ndarray:
    """Draw latents from the prior and decode them into soft maps of the given (H, W, C) shape"""
    z = nd.make_rng(seed, "flow-sample").standard_normal((count, model.dim))
    return unrelax(model.inverse(z), shape)


# Smoothness regularizer

def tau(image, y, sigma1: float = 0.5, sigma2: float = 0.5, form: str = "bilateral") -> Tensor:
    """
    Sum over ordered 4-neighbour pixel pairs of a color-gated prediction term.

    form="paper": exp(-|dx|^2/2s1^2 - |dy|^2/2s2^2), which grows as neighbours agree;
    "agreement" is accepted as another name for it.
    form="bilateral": exp(-|dx|^2/2s1^2) * (1 - exp(-|dy|^2/2s2^2)), which shrinks as they agree.
    Accepts (H,W,*) or batched (B,H,W,*) inputs; returns a scalar or a (B,) tensor.
    """
    if sigma1 <= 0 or sigma2 <= 0:
        raise NumericError("tau", f"sigma1 and sigma2 must be positive, got {sigma1}, {sigma2}")
    if form not in TAU_FORMS:
        raise NumericError("tau", f"unknown form {form!r}")
    y = nd.as_tensor(y)
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=y.dtype)
    single = y.ndim == 3
    if single:
        y = y.reshape((1,) + y.shape)
        image = image[None]
    if image.shape[:3] != y.shape[:3]:
        raise ShapeError("tau", image.shape, y.shape, detail="image and prediction grids differ")

    total = None
    for axis in (1, 2):
        count = y.shape[axis]
        head = [slice(None)] * 4
        tail = [slice(None)] * 4
        head[axis], tail[axis] = slice(1, count), slice(0, count - 1)
        color_gap = np.sum((image[tuple(head)] - image[tuple(tail)]) ** 2, axis=-1)
        gate = np.exp(-color_gap / (2.0 * sigma1 ** 2))
        diff = y[tuple(head)] - y[tuple(tail)]
        agreement = nd.exp((diff * diff).sum(axis=-1) * (-1.0 / (2.0 * sigma2 ** 2)))
        term = gate * (1.0 - agreement) if form == "bilateral" else gate * agreement
        pairs = term.sum(axis=(1, 2))
        total = pairs if total is None else total + pairs
    # each unordered pair appears twice among ordered pairs
    total = 2.0 * total
    return total.reshape(()) if single else total


def bimal_loss(model: FlowModel, image, y, sigma1: float = 0.5, sigma2: float = 0.5, form: str = "bilateral",
               smoothing: float = 0.02, use_tau: bool = True) -> Tensor:
    """nll(relax(y)) + tau(image, y); averaged over the batch for batched input"""
    y = nd.as_tensor(y)
    loss = nll(model, relax(y, smoothing))
    if use_tau:
        loss = loss + tau(image, y, sigma1, sigma2, form)
    return loss.mean() if y.ndim == 4 else loss


def flow_grid(images, probs, stride: int):
    """Subsample images and soft maps onto the flow grid"""
    probs = nd.as_tensor(probs)
    images = np.asarray(images)
    if probs.ndim == 4:
        return images[:, ::stride, ::stride], probs[:, ::stride, ::stride, :]
    return images[::stride, ::stride], probs[::stride, ::stride, :]


def onehot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels)]


# Training

def train_flow(codes: np.ndarray, cfg: Optional[FlowConfig] = None, seed: int = 0, epochs: Optional[int] = None,
               lr: Optional[float] = None, model: Optional[FlowModel] = None, momentum: float = 0.9) -> FlowModel:
    """
    Fit the flow to relaxed source ground truths by minimising mean nll.

    codes: (n, d) array. Batch order per epoch is drawn from (seed, epoch) so
    runs are reproducible. Raises DivergenceError on a non-finite loss.
    """
    cfg = cfg or FlowConfig()
    codes = np.asarray(codes)
    if codes.ndim != 2 or len(codes) == 0:
        raise DatasetError(f"train_flow needs a non-empty (n, d) array of codes, got shape {codes.shape}")
    epochs = cfg.flow_epochs if epochs is None else epochs
    lr = cfg.flow_lr if lr is None else lr
    model = model or FlowModel.from_config(seed, codes.shape[1], cfg)
    params = model.parameters()
    state = SGDState(params)
    batch_size = min(cfg.flow_batch_size, len(codes))
    iteration = 0

    for epoch in range(epochs):
        order = nd.make_rng(seed, "flow-epoch", epoch).permutation(len(codes))
        losses = []
        for start in range(0, len(codes), batch_size):
            batch = Tensor(codes[order[start:start + batch_size]], dtype=params[0].dtype)
            nd.zero_grad(params)
            try:
                loss = nll(model, batch).mean() * (1.0 / model.dim)
            except NonFiniteError:
                raise DivergenceError("train_flow", iteration, float("nan")) from None
            value = loss.item() * model.dim
            if not np.isfinite(value):
                raise DivergenceError("train_flow", iteration, value)
            nd.backward(loss)
            grads = [p.grad for p in params]
            clip_grad_norm(grads, cfg.flow_clip)
            try:
                sgd_step(params, grads, state, lr, momentum)
            except NonFiniteError:
                raise DivergenceError("train_flow", iteration, value) from None
            losses.append(value)
            iteration += 1
            logger.debug(f"flow step {iteration}: nll {value:.4f}")
        model.history.append(float(np.mean(losses)))
        logger.info(f"flow epoch {epoch + 1}/{epochs}: mean nll {model.history[-1]:.3f}")
    return model


def mean_nll(model: FlowModel, codes: np.ndarray, batch_size: int = 64) -> float:
    codes = np.asarray(codes)
    if len(codes) == 0:
        raise DatasetError("mean_nll needs at least one code")
    total = 0.0
    with nd.no_grad():
        for start in range(0, len(codes), batch_size):
            total += float(nll(model, codes[start:start + batch_size]).data.sum())
    return total / len(codes)


def uds_estimate(model: FlowModel, predictions: Sequence[Tuple[np.ndarray, np.ndarray]], sigma1: float = 0.5,
                 sigma2: float = 0.5, form: str = "bilateral", smoothing: float = 0.02) -> float:
    """Sample mean of nll + tau over (image, soft map) pairs already on the flow grid"""
    predictions = list(predictions)
    if not predictions:
        raise DatasetError("uds_estimate needs at least one prediction")
    with nd.no_grad():
        scores = [bimal_loss(model, image, y, sigma1, sigma2, form, smoothing).item() for image, y in predictions]
    return float(np.mean(scores))
