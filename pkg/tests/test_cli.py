import json

import numpy as np
import pytest

from comal_lab import ComalLabCLI
from modules import ndgrad as nd
from modules.costruct import StructNet
from modules.error_handler import setup_logging
from modules.evalcli import PALETTE, parse_ppm
from modules.synthworld import load_dataset


@pytest.fixture
def cli(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    yield ComalLabCLI()
    setup_logging(None, console=False)


@pytest.fixture
def small_env(tmp_path):
    path = tmp_path / "small.env"
    path.write_text("HEIGHT=16\nWIDTH=16\nFLOW_LAYERS=2\nFLOW_HIDDEN=8\nFLOW_EPOCHS=1\nFLOW_BATCH_SIZE=4\n"
                    "EMBED_DIM=8\nNUM_BLOCKS=1\nNUM_HEADS=2\nMLP_HIDDEN=8\nSTRUCT_EPOCHS=1\nSTRUCT_BATCH_SIZE=4\n"
                    "WORKERS=2\n")
    return path


class TestCommands:

    def test_gen_writes_a_dataset(self, cli, tmp_path, small_env):
        out = tmp_path / "source"
        assert cli.run(["gen", "--out", str(out), "--count", "3", "--config", str(small_env)]) == 0
        samples = load_dataset(out)
        assert len(samples) == 3
        assert samples[0].labels.shape == (16, 16)
        assert (out / "logs" / "comal_lab.log").exists()

    def test_train_flow_then_uds(self, cli, tmp_path, small_env):
        data = tmp_path / "source"
        cli.run(["gen", "--out", str(data), "--count", "4", "--config", str(small_env)])
        flow = tmp_path / "models" / "flow.ndgc"
        assert cli.run(["train-flow", "--data", str(data), "--out", str(flow), "--config", str(small_env)]) == 0
        assert flow.exists()
        assert cli.run(["uds", "--flow", str(flow), "--data", str(data), "--config", str(small_env),
                        "--tau-form", "paper"]) == 0

    def test_train_struct_then_sample(self, cli, tmp_path, small_env):
        data = tmp_path / "source"
        cli.run(["gen", "--out", str(data), "--count", "4", "--config", str(small_env)])
        struct = tmp_path / "models" / "structnet.ndgc"
        assert cli.run(["train-struct", "--data", str(data), "--out", str(struct), "--config", str(small_env)]) == 0
        assert StructNet.load(struct).height == 8

        out = tmp_path / "samples" / "scene.ppm"
        assert cli.run(["sample", "--struct", str(struct), "--count", "2", "--out", str(out)]) == 0
        width, height, _, _ = parse_ppm((tmp_path / "samples" / "scene_001.ppm").read_bytes())
        assert (width, height) == (8, 8)

    def test_conditional_sample_keeps_known_pixels(self, cli, tmp_path):
        struct = tmp_path / "structnet.ndgc"
        StructNet.init(0, 4, 4, embed_dim=8, num_blocks=1, num_heads=2, mlp_hidden=8).save(struct)
        mask = np.zeros((4, 4))
        mask[0, :] = 1
        known = np.full((4, 4), 2.0)
        nd.save_tensor(tmp_path / "mask.ndg", mask)
        nd.save_tensor(tmp_path / "known.ndg", known)
        out = tmp_path / "conditional.ppm"
        assert cli.run(["sample", "--struct", str(struct), "--mask-file", str(tmp_path / "mask.ndg"),
                        "--known-file", str(tmp_path / "known.ndg"), "--out", str(out)]) == 0
        _, _, _, pixels = parse_ppm(out.read_bytes())
        np.testing.assert_array_equal(pixels[1:], np.broadcast_to(PALETTE[2], (3, 4, 3)))


class TestFailures:

    def test_missing_run_directory_reports_the_error(self, cli, tmp_path):
        assert cli.run(["report", str(tmp_path / "absent")]) == 1
        records = json.loads((tmp_path / "absent" / "logs" / "errors.json").read_text())
        assert records[-1]["error_type"] == "DatasetError"

    def test_invalid_config_value(self, cli, tmp_path):
        env = tmp_path / "bad.env"
        env.write_text("HEIGHT=4\n")
        assert cli.run(["gen", "--out", str(tmp_path / "x"), "--config", str(env)]) == 1

    def test_unknown_regime_is_rejected_by_the_parser(self, cli, tmp_path):
        with pytest.raises(SystemExit):
            cli.run(["run", "--out", str(tmp_path), "--regime", "adversarial"])
