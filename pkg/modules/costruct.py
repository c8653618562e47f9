"""
costruct - masked multi-head attention model of segmentation structure.

Every pixel of a (subsampled) label grid is a token. Known pixels carry their
class embedding (or, for soft maps, the expected embedding under the pixel's
distribution); unknown pixels carry a learned mask token and can only be
attended to by themselves. The network predicts a class distribution at every
position, which gives the masked likelihood objective, the conditional
likelihood loss used for adaptation, and an iterative sampler.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules import ndgrad as nd
from modules.config import NUM_CLASSES, StructConfig
from modules.error_handler import DatasetError, DivergenceError, NonFiniteError, NumericError, ShapeError
from modules.ndgrad import Tensor
from modules.optim import SGDState, clip_grad_norm, sgd_step

logger = logging.getLogger(__name__)

KEY_MASK_BIAS = -1e30
LN_EPS = 1e-5


class MaskScheme(Enum):
    UNIFORM_RATE = "uniform-rate"
    SINGLE_KNOWN = "single-known"
    ALL_MASKED = "all-masked"


def sample_mask(seed: int, height: int, width: int, scheme: Union[str, MaskScheme] = MaskScheme.UNIFORM_RATE,
                min_rate: float = 0.15, stream: Sequence = ()) -> np.ndarray:
    """H x W mask, 1 = unknown; uniform-rate always masks at least one pixel"""
    scheme = MaskScheme(scheme)
    rng = nd.make_rng(seed, "mask", scheme.value, *stream)
    size = height * width
    if scheme is MaskScheme.ALL_MASKED:
        mask = np.ones(size, dtype=np.int64)
    elif scheme is MaskScheme.SINGLE_KNOWN:
        mask = np.ones(size, dtype=np.int64)
        mask[rng.integers(size)] = 0
    else:
        rate = rng.uniform(min_rate, 1.0)
        mask = (rng.uniform(size=size) < rate).astype(np.int64)
        if not mask.any():
            mask[rng.integers(size)] = 1
    return mask.reshape(height, width)


def single_known_mask(height: int, width: int, anchor: int) -> np.ndarray:
    mask = np.ones(height * width, dtype=np.int64)
    mask[anchor] = 0
    return mask.reshape(height, width)


def key_mask_bias(mask: np.ndarray) -> np.ndarray:
    """(B,N) unknown-mask -> (B,1,N,N) additive bias allowing known keys plus self"""
    known = mask == 0
    allowed = known[:, None, :] | np.eye(mask.shape[1], dtype=bool)[None]
    return np.where(allowed, 0.0, KEY_MASK_BIAS)[:, None, :, :]


class StructNet:
    """
    Pre-norm transformer over the N = H*W pixel tokens of a label grid.

    Token table has C class rows plus one mask-token row; positions use a learned
    embedding. Each block is x + attn(LN(x)) followed by x + mlp(LN(x)).
    """

    def __init__(self, height: int, width: int, num_classes: int = NUM_CLASSES, embed_dim: int = 64,
                 num_blocks: int = 4, num_heads: int = 4, mlp_hidden: int = 128, seed: int = 0):
        if embed_dim % num_heads:
            raise ShapeError("StructNet", (embed_dim,), (num_heads,), detail="embed_dim must split evenly across heads")
        self.height = height
        self.width = width
        self.num_tokens = height * width
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.mlp_hidden = mlp_hidden
        self.seed = seed
        self.params: Dict[str, Tensor] = {}
        self.history: List[float] = []

    @classmethod
    def init(cls, seed: int, height: int, width: int, num_classes: int = NUM_CLASSES, embed_dim: int = 64,
             num_blocks: int = 4, num_heads: int = 4, mlp_hidden: int = 128, zero_head: bool = False,
             dtype=None) -> "StructNet":
        net = cls(height, width, num_classes, embed_dim, num_blocks, num_heads, mlp_hidden, seed)
        rng = nd.make_rng(seed, "structnet")
        d = embed_dim

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, shape)

        net._add("token_embed", rng.normal(0.0, 0.1, (num_classes + 1, d)), dtype)
        net._add("pos_embed", rng.normal(0.0, 0.1, (net.num_tokens, d)), dtype)
        for b in range(num_blocks):
            for ln in ("ln1", "ln2"):
                net._add(f"block{b}.{ln}.gain", np.ones(d), dtype)
                net._add(f"block{b}.{ln}.bias", np.zeros(d), dtype)
            for proj in ("wq", "wk", "wv", "wo"):
                net._add(f"block{b}.attn.{proj}", uniform((d, d), d), dtype)
            net._add(f"block{b}.mlp.w1", uniform((d, mlp_hidden), d), dtype)
            net._add(f"block{b}.mlp.b1", np.zeros(mlp_hidden), dtype)
            net._add(f"block{b}.mlp.w2", uniform((mlp_hidden, d), mlp_hidden), dtype)
            net._add(f"block{b}.mlp.b2", np.zeros(d), dtype)
        net._add("final_ln.gain", np.ones(d), dtype)
        net._add("final_ln.bias", np.zeros(d), dtype)
        net._add("head.weight", np.zeros((d, num_classes)) if zero_head else uniform((d, num_classes), d), dtype)
        net._add("head.bias", np.zeros(num_classes), dtype)
        return net

    @classmethod
    def from_config(cls, seed: int, height: int, width: int, cfg: StructConfig, dtype=None) -> "StructNet":
        return cls.init(seed, height, width, NUM_CLASSES, cfg.embed_dim, cfg.num_blocks, cfg.num_heads, cfg.mlp_hidden, dtype=dtype)

    def _add(self, name: str, value: np.ndarray, dtype):
        self.params[name] = nd.parameter(value, name, dtype)

    def parameters(self) -> List[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    # layers

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        centered = x - x.mean(axis=-1, keepdims=True)
        variance = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered * nd.power(variance + LN_EPS, -0.5)
        return normed * self.params[f"{prefix}.gain"] + self.params[f"{prefix}.bias"]

    def _attention(self, x: Tensor, bias: np.ndarray, block: int) -> Tensor:
        p = self.params
        batch, tokens, d = x.shape
        heads, width = self.num_heads, d // self.num_heads

        def split(t: Tensor) -> Tensor:
            return t.reshape((batch, tokens, heads, width)).transpose((0, 2, 1, 3))

        q = split(x @ p[f"block{block}.attn.wq"])
        k = split(x @ p[f"block{block}.attn.wk"])
        v = split(x @ p[f"block{block}.attn.wv"])
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(width)) + bias
        weights = nd.softmax(scores, axis=-1)
        mixed = (weights @ v).transpose((0, 2, 1, 3)).reshape((batch, tokens, d))
        return mixed @ p[f"block{block}.attn.wo"]

    def embed(self, content, mask: np.ndarray) -> Tensor:
        """Token sequence: class content at known positions, mask token elsewhere"""
        table = self.params["token_embed"]
        content_is_soft = isinstance(content, Tensor) or np.asarray(content).dtype.kind == "f"
        if content_is_soft:
            soft = nd.as_tensor(content, table)
            soft = soft.reshape((soft.shape[0], self.num_tokens, self.num_classes))
            embedded = soft @ table[:self.num_classes]
        else:
            labels = np.asarray(content).reshape(mask.shape[0], self.num_tokens)
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise ShapeError("StructNet.embed", labels.shape, detail=f"labels must lie in [0, {self.num_classes})")
            embedded = nd.embedding(table, labels)

        unknown = mask.astype(table.dtype)[:, :, None]
        mask_token = table[self.num_classes]
        return embedded * (1.0 - unknown) + mask_token * unknown + self.params["pos_embed"]

    def forward(self, content, mask, check_finite: bool = True) -> Tensor:
        """
        content: (B,H,W) labels or (B,H,W,C) soft maps (unbatched forms accepted);
        mask: (B,H,W) or (H,W) with 1 = unknown. Returns (B,N,C) distributions.
        """
        mask = np.asarray(mask)
        single = mask.ndim == 2
        if single:
            mask = mask[None]
            content = content.reshape((1,) + content.shape) if isinstance(content, Tensor) else np.asarray(content)[None]
        if mask.shape[1:] != (self.height, self.width):
            raise ShapeError("StructNet.forward", mask.shape, (self.height, self.width))
        content_shape = content.shape
        if content_shape[1:3] != (self.height, self.width) or content_shape[0] != mask.shape[0]:
            raise ShapeError("StructNet.forward", content_shape, mask.shape)
        mask = mask.reshape(mask.shape[0], self.num_tokens)

        x = self.embed(content, mask)
        bias = key_mask_bias(mask).astype(x.dtype)
        for b in range(self.num_blocks):
            x = x + self._attention(self._layer_norm(x, f"block{b}.ln1"), bias, b)
            hidden = nd.tanh(self._layer_norm(x, f"block{b}.ln2") @ self.params[f"block{b}.mlp.w1"] + self.params[f"block{b}.mlp.b1"])
            x = x + hidden @ self.params[f"block{b}.mlp.w2"] + self.params[f"block{b}.mlp.b2"]
            if check_finite and not np.all(np.isfinite(x.data)):
                raise NonFiniteError(f"structnet block {b}")

        logits = self._layer_norm(x, "final_ln") @ self.params["head.weight"] + self.params["head.bias"]
        probs = nd.softmax(logits, axis=-1)
        return probs.reshape(probs.shape[1:]) if single else probs

    __call__ = forward

    # persistence

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        for name, param in self.params.items():
            if name not in arrays or arrays[name].shape != param.shape:
                raise ShapeError("StructNet.load_state_dict", param.shape, np.shape(arrays.get(name)), detail=name)
            param.data = arrays[name].astype(param.dtype)

    def meta(self) -> Dict:
        return {"kind": "structnet", "height": self.height, "width": self.width, "num_classes": self.num_classes,
                "embed_dim": self.embed_dim, "num_blocks": self.num_blocks, "num_heads": self.num_heads,
                "mlp_hidden": self.mlp_hidden, "seed": self.seed, "history": self.history}

    def save(self, path: Union[str, Path]):
        nd.save_named(path, self.state_dict(), self.meta())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "StructNet":
        arrays, meta = nd.load_named(path)
        if meta.get("kind") != "structnet":
            raise ShapeError("StructNet.load", detail=f"{path} does not hold a structure network")
        net = cls.init(meta["seed"], meta["height"], meta["width"], meta["num_classes"], meta["embed_dim"],
                       meta["num_blocks"], meta["num_heads"], meta["mlp_hidden"])
        net.load_state_dict(arrays)
        net.history = list(meta.get("history", []))
        return net

    def copy(self) -> "StructNet":
        clone = StructNet.init(self.seed, self.height, self.width, self.num_classes, self.embed_dim,
                               self.num_blocks, self.num_heads, self.mlp_hidden)
        clone.load_state_dict(self.state_dict())
        clone.history = list(self.history)
        return clone


# Objectives

def masked_nll_from_probs(probs, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of -log p_i(label_i) over masked positions; probs (B,N,C) or (N,C)"""
    probs = nd.as_tensor(probs)
    if probs.ndim == 2:
        probs = probs.reshape((1,) + probs.shape)
    batch, tokens, _ = probs.shape
    labels = np.asarray(labels).reshape(batch, tokens, 1)
    weights = np.asarray(mask).reshape(batch, tokens).astype(probs.dtype)
    count = weights.sum()
    if count == 0:
        raise NumericError("masked_nll", "mask has no unknown positions")
    picked = nd.log(nd.gather(probs, labels, axis=-1)).reshape((batch, tokens))
    return -(picked * weights).sum() * (1.0 / count)


def masked_nll(net: StructNet, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked objective: hard labels in, mean nll of the unknown positions out"""
    if not np.asarray(mask).any():
        raise NumericError("masked_nll", "mask has no unknown positions")
    return masked_nll_from_probs(net.forward(labels, mask), labels, mask)


def _anchor_batch(net: StructNet, y: Tensor, num_anchors: int, seed: int) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    tokens = net.num_tokens
    count = min(num_anchors, tokens)
    rows, masks = [], []
    for b in range(y.shape[0]):
        anchors = nd.make_rng(seed, "anchors", b).choice(tokens, size=count, replace=False)
        for anchor in anchors:
            rows.append(b)
            masks.append(single_known_mask(net.height, net.width, int(anchor)))
    return nd.take(y, np.array(rows), axis=0), np.stack(masks), np.array(rows)


def comal_loss(net: StructNet, y, num_anchors: int = 4, seed: int = 0) -> Tensor:
    """
    Conditional structure likelihood of soft maps y ((H,W,C) or (B,H,W,C)).

    For each of num_anchors anchors drawn without replacement, only the anchor is
    known (with soft content) and every other position is scored with the soft
    target -sum_c y_c log p_c. Averaged over anchors, positions and batch.
    """
    if num_anchors < 1:
        raise NumericError("comal_loss", f"num_anchors must be >= 1, got {num_anchors}")
    y = nd.as_tensor(y, net.params["token_embed"])
    if y.ndim == 3:
        y = y.reshape((1,) + y.shape)
    if y.shape[1:] != (net.height, net.width, net.num_classes):
        raise ShapeError("comal_loss", y.shape, (net.height, net.width, net.num_classes))

    expanded, masks, _ = _anchor_batch(net, y, num_anchors, seed)
    probs = net.forward(expanded, masks)
    targets = expanded.reshape((expanded.shape[0], net.num_tokens, net.num_classes))
    unknown = masks.reshape(masks.shape[0], net.num_tokens, 1).astype(probs.dtype)
    cross = (targets * nd.log(probs) * unknown).sum()
    return -cross * (1.0 / unknown.sum())


# Training

def _draw_training_masks(seed: int, iteration: int, count: int, height: int, width: int, min_rate: float) -> np.ndarray:
    rng = nd.make_rng(seed, "struct-schemes", iteration)
    masks = []
    for j, u in enumerate(rng.uniform(size=count)):
        scheme = MaskScheme.SINGLE_KNOWN if u < 0.1 else MaskScheme.ALL_MASKED if u < 0.2 else MaskScheme.UNIFORM_RATE
        masks.append(sample_mask(seed, height, width, scheme, min_rate, stream=(iteration, j)))
    return np.stack(masks)


def train_struct(labels: np.ndarray, cfg: Optional[StructConfig] = None, seed: int = 0, epochs: Optional[int] = None,
                 lr: Optional[float] = None, net: Optional[StructNet] = None, momentum: float = 0.9,
                 scheme: Optional[Union[str, MaskScheme]] = None) -> StructNet:
    """
    Fit the masked objective on (n, H, W) source label grids.

    Masks are fresh each step: uniform-rate with 10% single-known and 10%
    all-masked draws, or a single fixed scheme when one is given.
    """
    cfg = cfg or StructConfig()
    labels = np.asarray(labels)
    if labels.ndim != 3 or len(labels) == 0:
        raise DatasetError(f"train_struct needs a non-empty (n, H, W) label array, got shape {labels.shape}")
    epochs = cfg.struct_epochs if epochs is None else epochs
    lr = cfg.struct_lr if lr is None else lr
    _, height, width = labels.shape
    net = net or StructNet.from_config(seed, height, width, cfg)
    params = net.parameters()
    state = SGDState(params)
    batch_size = min(cfg.struct_batch_size, len(labels))
    iteration = 0

    for epoch in range(epochs):
        order = nd.make_rng(seed, "struct-epoch", epoch).permutation(len(labels))
        losses = []
        for start in range(0, len(labels), batch_size):
            batch = labels[order[start:start + batch_size]]
            if scheme is None:
                masks = _draw_training_masks(seed, iteration, len(batch), height, width, cfg.min_mask_rate)
            else:
                masks = np.stack([sample_mask(seed, height, width, scheme, cfg.min_mask_rate, stream=(iteration, j))
                                  for j in range(len(batch))])
            nd.zero_grad(params)
            try:
                loss = masked_nll(net, batch, masks)
            except NonFiniteError:
                raise DivergenceError("train_struct", iteration, float("nan")) from None
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError("train_struct", iteration, value)
            nd.backward(loss)
            grads = [p.grad for p in params]
            clip_grad_norm(grads, cfg.struct_clip)
            try:
                sgd_step(params, grads, state, lr, momentum)
            except NonFiniteError:
                raise DivergenceError("train_struct", iteration, value) from None
            losses.append(value)
            iteration += 1
            logger.debug(f"struct step {iteration}: masked nll {value:.4f}")
        net.history.append(float(np.mean(losses)))
        logger.info(f"struct epoch {epoch + 1}/{epochs}: masked nll {net.history[-1]:.4f}")
    return net


def heldout_masked_nll(net: StructNet, labels: np.ndarray, seed: int, min_rate: float = 0.15) -> float:
    """Masked nll on fixed uniform-rate masks, for before/after comparisons"""
    labels = np.asarray(labels)
    masks = np.stack([sample_mask(seed, net.height, net.width, MaskScheme.UNIFORM_RATE, min_rate, stream=("heldout", i))
                      for i in range(len(labels))])
    with nd.no_grad():
        return masked_nll(net, labels, masks).item()


# Sampling

def sample(net: StructNet, mask: np.ndarray, known: np.ndarray, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
    """
    Fill unknown positions one at a time, most confident first.

    Each step commits, per map, the unknown position whose predicted distribution
    has the highest peak, drawing its class from p^(1/T) (argmax when T == 0).
    Known pixels are returned unchanged. Accepts (H,W) or batched (B,H,W) inputs.
    """
    mask = np.asarray(mask).astype(bool)
    current = np.array(known, dtype=np.int64, copy=True)
    single = mask.ndim == 2
    if single:
        mask, current = mask[None], current[None]
    if mask.shape != current.shape:
        raise ShapeError("sample", mask.shape, current.shape)
    if temperature < 0:
        raise NumericError("sample", f"temperature must be >= 0, got {temperature}")
    rng = nd.make_rng(seed, "struct-sample")
    unknown = mask.reshape(mask.shape[0], -1).copy()
    flat = current.reshape(current.shape[0], -1)
    flat[unknown] = 0

    while unknown.any():
        with nd.no_grad():
            probs = net.forward(current, unknown.reshape(mask.shape).astype(np.int64)).data
        for b in np.flatnonzero(unknown.any(axis=1)):
            confidence = np.where(unknown[b], probs[b].max(axis=-1), -np.inf)
            position = int(np.argmax(confidence))
            dist = probs[b, position]
            if temperature == 0:
                choice = int(np.argmax(dist))
            else:
                logits = np.log(np.maximum(dist, 1e-300)) / temperature
                scaled = np.exp(logits - logits.max())
                choice = int(rng.choice(len(dist), p=scaled / scaled.sum()))
            flat[b, position] = choice
            unknown[b, position] = False
    return current[0] if single else current


def sample_unconditional(net: StructNet, count: int = 1, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
    """Fully sampled label grids (every position starts unknown)"""
    mask = np.ones((count, net.height, net.width), dtype=np.int64)
    known = np.zeros((count, net.height, net.width), dtype=np.int64)
    return sample(net, mask, known, temperature, seed)
