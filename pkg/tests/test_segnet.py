import numpy as np
import pytest

from modules import ndgrad as nd
from modules.error_handler import NonFiniteError, ShapeError
from modules.losses import cross_entropy
from modules.segnet import SegNet


def _images(seed, shape=(2, 8, 8, 3)):
    return nd.make_rng(seed, "images").uniform(0, 1, shape)


def test_zero_parameters_give_uniform_maps():
    probs, _ = SegNet.zeros().forward(_images(0))
    np.testing.assert_allclose(probs.data, 1.0 / 8)


def test_output_keeps_resolution_and_simplex():
    probs, logits = SegNet.init(0).forward(_images(1, (3, 10, 12, 3)))
    assert probs.shape == logits.shape == (3, 10, 12, 8)
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0)


def test_single_image_rank():
    probs, _ = SegNet.init(0).forward(_images(2, (8, 8, 3)))
    assert probs.shape == (8, 8, 8)


def test_same_seed_same_parameters():
    a, b = SegNet.init(5), SegNet.init(5)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_different_seeds_differ():
    a, b = SegNet.init(5), SegNet.init(6)
    assert not np.array_equal(a.params["conv0.weight"].data, b.params["conv0.weight"].data)


def test_wrong_channel_count():
    with pytest.raises(ShapeError):
        SegNet.init(0).forward(np.zeros((1, 8, 8, 4)))


def test_non_finite_activation_names_layer():
    net = SegNet.init(0)
    net.params["conv1.bias"].data[:] = np.nan
    with pytest.raises(NonFiniteError) as excinfo:
        net.forward(_images(3))
    assert "conv1" in str(excinfo.value)


def test_cross_entropy_through_network_matches_finite_differences():
    net = SegNet.init(0)
    labels = nd.make_rng(4, "labels").integers(0, 8, (1, 8, 8))
    assert nd.grad_check(lambda x: cross_entropy(net.forward(x)[0], labels), _images(4, (1, 8, 8, 3))) < 1e-4


def test_state_dict_copy_is_independent():
    net = SegNet.init(1)
    clone = net.copy()
    clone.params["classifier.bias"].data += 1.0
    assert not np.array_equal(net.params["classifier.bias"].data, clone.params["classifier.bias"].data)
    np.testing.assert_array_equal(net.predict(_images(5)), SegNet.init(1).predict(_images(5)))
