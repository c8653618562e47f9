import numpy as np
import pytest

from modules.config import LossConfig, WorldConfig
from modules.error_handler import DatasetError, SerializationError
from modules.evalcli import (
    PALETTE, ConfusionMatrix, compose_grid, encode_ppm, grad_per_class, miou, nonzero_dispersion, parse_ppm, render,
    report,
)
from modules.losses import cross_entropy, objective_comal
from modules.segnet import SegNet
from modules.synthworld import class_histogram, generate
from modules.trainer import run_experiment


class TestMeanIoU:

    def test_two_by_two_example(self):
        result = miou([np.array([[0, 0], [1, 1]])], [np.array([[0, 1], [1, 1]])], num_classes=2, tail_classes=())
        np.testing.assert_allclose(result.per_class_iou, [0.5, 2 / 3])
        assert result.miou == pytest.approx(0.5833, abs=1e-4)

    def test_perfect_prediction(self):
        labels = np.array([[0, 1], [2, 3]])
        assert miou([labels], [labels]).miou == 1.0

    def test_swapped_prediction(self):
        assert miou([np.array([[1, 0]])], [np.array([[0, 1]])], num_classes=2, tail_classes=()).miou == 0.0

    def test_absent_classes_are_excluded(self):
        result = miou([np.array([[0, 0]])], [np.array([[0, 0]])])
        assert np.isnan(result.per_class_iou[3])
        assert result.miou == 1.0
        assert result.to_dict()["per_class_iou"][3] is None

    def test_ignored_pixels(self):
        result = miou([np.array([[0, 1]])], [np.array([[0, 255]])], num_classes=2, tail_classes=())
        assert result.pixels == 1
        assert result.miou == 1.0

    def test_head_and_tail_split(self):
        gts = np.array([[0, 0, 5, 5]])
        preds = np.array([[0, 0, 5, 0]])
        result = miou([preds], [gts])
        assert result.head_iou == pytest.approx(2 / 3)
        assert result.tail_iou == pytest.approx(0.5)

    def test_empty_input(self):
        with pytest.raises(DatasetError):
            miou([], [])

    def test_mismatched_shapes(self):
        with pytest.raises(DatasetError):
            ConfusionMatrix(2).update(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))

    def test_accuracy(self):
        cm = ConfusionMatrix(2).update(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
        assert cm.pixel_accuracy() == 0.75
        np.testing.assert_allclose(cm.class_accuracy(), [0.5, 1.0])


class TestGradPerClass:

    def test_single_class_batch(self):
        images = np.zeros((1, 4, 4, 3))
        shares = grad_per_class(SegNet.init(0), cross_entropy, images, np.zeros((1, 4, 4), dtype=int))
        np.testing.assert_allclose(shares, [1, 0, 0, 0, 0, 0, 0, 0])

    def test_symmetric_classes_share_equally(self):
        labels = np.array([[[0, 1], [1, 0]]])
        shares = grad_per_class(SegNet.zeros(), cross_entropy, np.zeros((1, 2, 2, 3)), labels)
        np.testing.assert_allclose(shares[:2], [1.0, 1.0])
        np.testing.assert_allclose(shares[2:], 0.0)

    def test_mean_reduction_removes_pixel_counts(self):
        labels = np.array([[[0, 0, 0, 1]]])
        summed = grad_per_class(SegNet.zeros(), cross_entropy, np.zeros((1, 1, 4, 3)), labels)
        averaged = grad_per_class(SegNet.zeros(), cross_entropy, np.zeros((1, 1, 4, 3)), labels, reduction="mean")
        np.testing.assert_allclose(summed[:2], [1.0, 1 / 3])
        np.testing.assert_allclose(averaged[:2], [1.0, 1.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_class_weighting_evens_out_long_tail_shares(self, seed):
        cfg = WorldConfig(height=16, width=16, tail_lambda=1.0)
        samples = [generate(seed * 10 + i, "source", cfg) for i in range(4)]
        images = np.stack([s.image for s in samples])
        labels = np.stack([s.labels for s in samples])
        q = class_histogram(list(labels))
        loss_cfg = LossConfig(lambda_comal=0.0, weight_clamp=1e6)
        net = SegNet.zeros()

        plain = grad_per_class(net, cross_entropy, images, labels)
        weighted = grad_per_class(net, lambda probs, targets: objective_comal(probs, targets, probs, None, q, loss_cfg)[0],
                                  images, labels)
        assert nonzero_dispersion(weighted) < nonzero_dispersion(plain)

    def test_parameters_are_left_clean(self):
        net = SegNet.init(1)
        grad_per_class(net, cross_entropy, np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2), dtype=int))
        assert all(p.grad is None or not np.any(p.grad) for p in net.parameters())


class TestRender:

    def test_single_pixel(self):
        width, height, maxval, pixels = parse_ppm(render(np.array([[0]])))
        assert (width, height, maxval) == (1, 1, 255)
        np.testing.assert_array_equal(pixels[0, 0], PALETTE[0])

    def test_header_and_size(self):
        blob = render(np.zeros((3, 5), dtype=int))
        assert blob.startswith(b"P6\n5 3\n255\n")
        assert len(blob) == len(b"P6\n5 3\n255\n") + 3 * 5 * 3

    def test_label_without_colour(self):
        with pytest.raises(DatasetError):
            render(np.array([[8]]))

    def test_not_a_label_map(self):
        with pytest.raises(DatasetError):
            render(np.zeros((2, 2, 2), dtype=int))

    def test_not_a_pixmap(self):
        with pytest.raises(SerializationError):
            parse_ppm(b"P3\n1 1\n255\n000")

    def test_grid_layout(self):
        tile = np.zeros((2, 3, 3), dtype=np.uint8)
        canvas = compose_grid([[tile, tile], [tile]])
        assert canvas.shape == (5, 7, 3)
        assert canvas[2, 0, 0] == 255 and canvas[4, 5, 0] == 255
        assert parse_ppm(encode_ppm(canvas))[:2] == (7, 5)


class TestReport:

    def test_missing_run(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest.json"):
            report(tmp_path)

    def test_missing_checkpoint_is_named(self, tmp_path, tiny_config):
        run_experiment(tiny_config, tmp_path)
        (tmp_path / "checkpoints" / "source-only.ndgc").unlink()
        with pytest.raises(DatasetError, match="source-only.ndgc"):
            report(tmp_path)

    def test_reruns_are_byte_identical(self, tmp_path, tiny_config):
        run_experiment(tiny_config, tmp_path)
        first = {p.name: p.read_bytes() for p in report(tmp_path, samples=2)}
        second = {p.name: p.read_bytes() for p in report(tmp_path, samples=2)}
        assert first == second
        assert {"summary.csv", "per_class_iou.csv", "ablation.csv", "ablation.md", "qualitative.ppm"} <= set(first)
        width, height, _, _ = parse_ppm(first["qualitative.ppm"])
        assert (width, height) == (3 * 16 + 2, 2 * 16 + 1)
