import logging
from typing import Dict, List, Tuple

import numpy as np

from modules import ndgrad as nd
from modules.config import NUM_CLASSES
from modules.error_handler import NonFiniteError, ShapeError
from modules.ndgrad import Tensor

logger = logging.getLogger(__name__)

TRUNK_WIDTHS = (16, 32, 32)


class SegNet:
    """
    Fully convolutional segmenter: three padded 3x3 conv + tanh blocks, then a
    1x1 conv to class logits and a per-pixel softmax. Works on NHWC batches,
    keeps the input resolution, and never pools or strides.
    """

    def __init__(self, params: Dict[str, Tensor], num_classes: int = NUM_CLASSES):
        self.params = params
        self.num_classes = num_classes
        self.layer_names = [f"conv{i}" for i in range(len(TRUNK_WIDTHS))] + ["classifier"]

    @classmethod
    def init(cls, seed: int, num_classes: int = NUM_CLASSES, in_channels: int = 3, dtype=None) -> "SegNet":
        """Fan-in scaled uniform weights, zero biases"""
        rng = nd.make_rng(seed, "segnet")
        params: Dict[str, Tensor] = {}
        widths = (in_channels,) + TRUNK_WIDTHS
        for i in range(len(TRUNK_WIDTHS)):
            bound = 1.0 / np.sqrt(9 * widths[i])
            params[f"conv{i}.weight"] = nd.parameter(rng.uniform(-bound, bound, (3, 3, widths[i], widths[i + 1])), f"conv{i}.weight", dtype)
            params[f"conv{i}.bias"] = nd.parameter(np.zeros(widths[i + 1]), f"conv{i}.bias", dtype)
        bound = 1.0 / np.sqrt(widths[-1])
        params["classifier.weight"] = nd.parameter(rng.uniform(-bound, bound, (1, 1, widths[-1], num_classes)), "classifier.weight", dtype)
        params["classifier.bias"] = nd.parameter(np.zeros(num_classes), "classifier.bias", dtype)
        return cls(params, num_classes)

    @classmethod
    def zeros(cls, num_classes: int = NUM_CLASSES, in_channels: int = 3, dtype=None) -> "SegNet":
        net = cls.init(0, num_classes, in_channels, dtype)
        for p in net.params.values():
            p.data = np.zeros_like(p.data)
        return net

    def parameters(self) -> List[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def forward(self, images, check_finite: bool = True) -> Tuple[Tensor, Tensor]:
        """(B,H,W,3) or (H,W,3) images -> (probabilities, logits) of matching rank"""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.params["conv0.weight"].dtype))
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[3] != self.params["conv0.weight"].shape[2]:
            raise ShapeError("segnet.forward", x.shape, detail="expected (B, H, W, 3) images")

        for i in range(len(TRUNK_WIDTHS)):
            x = nd.tanh(nd.conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], padding=1))
            if check_finite:
                self._check(x, f"conv{i}")
        logits = nd.conv2d(x, self.params["classifier.weight"], self.params["classifier.bias"], padding=0)
        if check_finite:
            self._check(logits, "classifier")

        if single:
            logits = logits.reshape(logits.shape[1:])
        return nd.softmax(logits, axis=-1), logits

    __call__ = forward

    @staticmethod
    def _check(activation: Tensor, layer: str):
        if not np.all(np.isfinite(activation.data)):
            raise NonFiniteError(f"segnet layer {layer}")

    def predict(self, images) -> np.ndarray:
        """Argmax label maps without recording gradients"""
        with nd.no_grad():
            probs, _ = self.forward(images)
        return np.argmax(probs.data, axis=-1)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        missing = sorted(set(self.params) - set(arrays))
        if missing:
            raise ShapeError("segnet.load_state_dict", detail=f"missing tensors {missing}")
        for name, param in self.params.items():
            if arrays[name].shape != param.shape:
                raise ShapeError("segnet.load_state_dict", param.shape, arrays[name].shape, detail=name)
            param.data = arrays[name].astype(param.dtype)

    def copy(self) -> "SegNet":
        clone = SegNet.init(0, self.num_classes, self.params["conv0.weight"].shape[2], self.params["conv0.weight"].dtype)
        clone.load_state_dict(self.state_dict())
        return clone


def init(seed: int, num_classes: int = NUM_CLASSES, dtype=None) -> SegNet:
    return SegNet.init(seed, num_classes, dtype=dtype)


def forward(net: SegNet, images) -> Tuple[Tensor, Tensor]:
    return net.forward(images)
