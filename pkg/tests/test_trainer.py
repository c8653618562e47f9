import json

import numpy as np
import pytest

from modules.bimal import FlowModel
from modules.config import LabConfig
from modules.costruct import StructNet
from modules.error_handler import DatasetError, PrerequisiteError
from modules.evalcli import report
from modules.synthworld import class_histogram
from modules.trainer import (
    ABLATION_SETTINGS, Checkpoint, Prefetcher, _batches, ablation_suite, build_datasets, flow_codes, frozen,
    run_experiment, run_phase, struct_grids,
)


@pytest.fixture
def tiny_data(tiny_config):
    return build_datasets(tiny_config)


def _auxiliary_models(tiny_config):
    flow = FlowModel.init(0, 8 * 8 * 8, num_layers=2, hidden=8, identity=False)
    structnet = StructNet.init(0, 8, 8, embed_dim=16, num_blocks=1, num_heads=2, mlp_hidden=16)
    return flow, structnet


class TestData:

    def test_split_sizes(self, tiny_data):
        assert tiny_data.source_images.shape == (4, 16, 16, 3)
        assert tiny_data.target_images.shape == (4, 16, 16, 3)
        assert tiny_data.eval_labels.shape == (2, 16, 16)

    def test_splits_are_cached_on_disk(self, tiny_config, tmp_path):
        first = build_datasets(tiny_config, tmp_path)
        assert json.loads((tmp_path / "source" / "manifest.json").read_text())["count"] == 4
        second = build_datasets(tiny_config, tmp_path)
        np.testing.assert_array_equal(first.source_labels, second.source_labels)
        np.testing.assert_array_equal(first.target_images, second.target_images)

    def test_auxiliary_inputs_use_the_flow_grid(self, tiny_config, tiny_data):
        assert flow_codes(tiny_data.source_labels, tiny_config).shape == (4, 8 * 8 * 8)
        assert struct_grids(tiny_data.source_labels, tiny_config).shape == (4, 8, 8)

    def test_batches_cover_every_source_sample(self):
        seen = np.concatenate([src for _, src, _ in _batches(0, "warmup", 0, 7, 3, 2)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(7))


class TestPrefetcher:

    def test_order_is_preserved(self):
        assert list(Prefetcher(iter(range(100)), size=3)) == list(range(100))

    def test_producer_errors_surface(self):
        def producer():
            yield 1
            raise DatasetError("broken sample")

        with pytest.raises(DatasetError):
            list(Prefetcher(producer()))

    def test_early_exit_stops_the_thread(self):
        prefetcher = Prefetcher(iter(range(1000)), size=2)
        for item in prefetcher:
            if item == 3:
                break
        prefetcher.thread.join(timeout=2.0)
        assert not prefetcher.thread.is_alive()


class TestRunPhase:

    def test_bimal_needs_a_flow(self, tiny_config, tiny_data):
        with pytest.raises(PrerequisiteError):
            run_phase("bimal", tiny_config, tiny_data, epochs=1)

    def test_comal_needs_a_structure_network(self, tiny_config, tiny_data):
        with pytest.raises(PrerequisiteError):
            run_phase("comal", tiny_config, tiny_data, epochs=1, q_source=np.full(8, 1 / 8))

    def test_comal_needs_the_source_histogram(self, tiny_config, tiny_data):
        _, structnet = _auxiliary_models(tiny_config)
        with pytest.raises(PrerequisiteError):
            run_phase("comal", tiny_config, tiny_data, epochs=1, structnet=structnet)

    def test_histories_are_reproducible(self, tiny_config, tiny_data):
        a = run_phase("entmin", tiny_config, tiny_data, epochs=2)
        b = run_phase("entmin", tiny_config, tiny_data, epochs=2)
        np.testing.assert_equal(a.history, b.history)
        for name, value in a.net.state_dict().items():
            np.testing.assert_array_equal(value, b.net.state_dict()[name])

    def test_source_only_loss_decreases(self, tiny_config, tiny_data):
        cfg = tiny_config.replace(lr=5e-2, batch_size=4)
        result = run_phase("source-only", cfg, tiny_data, epochs=8)
        assert result.history[-1]["ce_source"] < result.history[0]["ce_source"]

    @pytest.mark.parametrize("regime", ["bimal", "comal"])
    def test_auxiliary_models_stay_frozen(self, tiny_config, tiny_data, regime):
        flow, structnet = _auxiliary_models(tiny_config)
        before = {"flow": flow.state_dict(), "struct": structnet.state_dict()}
        q_source = class_histogram(list(tiny_data.source_labels))
        run_phase(regime, tiny_config.replace(lambda_bimal=1.0, lambda_comal=1.0), tiny_data, epochs=1,
                  flow=flow, structnet=structnet, q_source=q_source)
        for name, value in flow.state_dict().items():
            np.testing.assert_array_equal(value, before["flow"][name])
        for name, value in structnet.state_dict().items():
            np.testing.assert_array_equal(value, before["struct"][name])
        assert all(p.requires_grad for p in flow.parameters())

    def test_frozen_restores_flags(self, tiny_config):
        flow, _ = _auxiliary_models(tiny_config)
        with frozen(flow, None):
            assert not any(p.requires_grad for p in flow.parameters())
        assert all(p.requires_grad for p in flow.parameters())

    def test_resume_reproduces_the_uninterrupted_run(self, tiny_config, tiny_data, tmp_path):
        full = run_phase("entmin", tiny_config, tiny_data, epochs=3, out_dir=tmp_path / "full", phase="adapt")
        run_phase("entmin", tiny_config, tiny_data, epochs=1, out_dir=tmp_path / "cut", phase="adapt")
        checkpoint = Checkpoint.load(tmp_path / "cut" / "checkpoints" / "adapt.ndgc")
        assert checkpoint.epoch == 1
        resumed = run_phase("entmin", tiny_config, tiny_data, epochs=3, out_dir=tmp_path / "cut", phase="adapt",
                            resume=checkpoint)
        assert [row["loss"] for row in resumed.history] == [row["loss"] for row in full.history]
        np.testing.assert_equal(resumed.history, full.history)
        assert (tmp_path / "cut" / "metrics" / "adapt.csv").read_text() == (tmp_path / "full" / "metrics" / "adapt.csv").read_text()

    def test_checkpoint_round_trip(self, tiny_config, tiny_data, tmp_path):
        result = run_phase("source-only", tiny_config, tiny_data, epochs=1)
        result.checkpoint.save(tmp_path / "phase.ndgc")
        back = Checkpoint.load(tmp_path / "phase.ndgc")
        assert back.epoch == 1 and back.steps == result.checkpoint.steps
        np.testing.assert_equal(back.history, result.history)
        for name, value in result.checkpoint.params.items():
            np.testing.assert_array_equal(back.params[name], value)

    def test_empty_source(self, tiny_config, tiny_data):
        tiny_data.source_images = tiny_data.source_images[:0]
        tiny_data.source_labels = tiny_data.source_labels[:0]
        with pytest.raises(DatasetError):
            run_phase("source-only", tiny_config, tiny_data, epochs=1)


class TestExperiments:

    def test_run_writes_a_manifest(self, tiny_config, tmp_path):
        run_experiment(tiny_config.replace(regime="entmin"), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["command"] == "run"
        assert manifest["settings"] == [{"name": "entmin", "regime": "entmin", "phase": "entmin"}]
        assert (tmp_path / "checkpoints" / "warmup.ndgc").exists()
        assert (tmp_path / "config.env").exists()

    def test_ablation_covers_every_setting(self, tiny_config, tmp_path):
        rows = ablation_suite(tiny_config, tmp_path)
        assert [row["setting"] for row in rows] == [name for name, _, _ in ABLATION_SETTINGS]
        assert all(0.0 <= row["miou"] <= 1.0 for row in rows)
        assert (tmp_path / "metrics" / "grad_per_class.csv").exists()
        assert (tmp_path / "checkpoints" / "flow.ndgc").exists()
        assert (tmp_path / "checkpoints" / "structnet.ndgc").exists()

    def test_ablation_reuses_pretrained_models(self, tiny_config, tmp_path):
        ablation_suite(tiny_config, tmp_path)
        stamp = (tmp_path / "checkpoints" / "flow.ndgc").stat().st_mtime_ns
        ablation_suite(tiny_config, tmp_path)
        assert (tmp_path / "checkpoints" / "flow.ndgc").stat().st_mtime_ns == stamp

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_desk_scale_ablation_ordering(self, tmp_path, seed):
        cfg = LabConfig().replace(seed=seed, height=32, width=32, num_source=128, num_target=128, num_eval=32,
                                  warmup_epochs=10, adapt_epochs=10, flow_epochs=20, struct_epochs=10)
        rows = {row["setting"]: row for row in ablation_suite(cfg, tmp_path)}
        miou = {name: row["miou"] for name, row in rows.items()}
        assert miou["baseline"] < miou["L_llk"] <= miou["L_llk+tau"] + 0.005
        assert miou["baseline"] < miou["L_cls"] <= miou["L_cls+L_CoMaL"] + 0.005
        assert miou["L_cls+L_CoMaL"] - miou["baseline"] >= 0.05
        assert rows["L_cls+L_CoMaL"]["tail_iou"] - rows["L_llk+tau"]["tail_iou"] >= 0.03

    @pytest.mark.slow
    def test_full_suite_is_byte_reproducible(self, tiny_config, tmp_path):
        outputs = []
        for name in ("a", "b"):
            ablation_suite(tiny_config, tmp_path / name)
            outputs.append({p.name: p.read_bytes() for p in report(tmp_path / name)})
        assert outputs[0] == outputs[1]
