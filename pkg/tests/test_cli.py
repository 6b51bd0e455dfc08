import numpy as np
import pytest

from sonoseg.archive import load_tensor
from sonoseg.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from sonoseg.model import load_model
from sonoseg.segmenter import OrganSegmenter


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "toy"
    assert main(["synth-data", "--out", str(d), "--count", "2",
                 "--size", "64", "--seed", "3"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def run_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "r1"
    code = main(["train-toy", "--data", str(dataset), "--out", str(out),
                 "--pyramid-width", "8", "--max-steps", "2", "--seed", "1"])
    assert code == EXIT_OK
    return out


class TestSynthData:
    def test_outputs(self, dataset):
        assert sorted(p.name for p in (dataset / "images").glob("*.png")) == \
            ["000.png", "001.png"]
        assert (dataset / "masks" / "001.png").exists()
        assert (dataset / "palette.txt").exists()


class TestTrainToy:
    def test_outputs_and_manifest(self, run_dir):
        lines = (run_dir / "loss.csv").read_text().strip().split("\n")
        assert lines[0].startswith("step,total,obj")
        assert len(lines) == 3  # header + 2 steps
        manifest = (run_dir / "manifest.txt").read_text()
        assert "loss.csv" in manifest and "checkpoint/" in manifest
        assert (run_dir / "checkpoint" / "manifest.txt").exists()
        assert (run_dir / "checkpoint" / "model_config.txt").exists()

    def test_zero_steps_checkpoint_equals_init(self, dataset, tmp_path):
        out = tmp_path / "r0"
        code = main(["train-toy", "--data", str(dataset), "--out", str(out),
                     "--pyramid-width", "8", "--max-steps", "0", "--seed", "9"])
        assert code == EXIT_OK
        lines = (out / "loss.csv").read_text().strip().split("\n")
        assert len(lines) == 1  # header only
        loaded = load_model(out / "checkpoint").params()
        ref = OrganSegmenter(pyramid_width=8, seed=9).init_weights()
        for k, t in ref.weights_.params().items():
            np.testing.assert_array_equal(loaded[k].data, t.data)

    def test_deterministic_across_runs(self, dataset, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train-toy", "--data", str(dataset), "--out", str(out),
                         "--pyramid-width", "8", "--max-steps", "2",
                         "--seed", "5"]) == EXIT_OK
            outs.append(out)
        assert (outs[0] / "loss.csv").read_bytes() == \
            (outs[1] / "loss.csv").read_bytes()
        pa = load_model(outs[0] / "checkpoint").params()
        pb = load_model(outs[1] / "checkpoint").params()
        for k in pa:
            np.testing.assert_array_equal(pa[k].data, pb[k].data)

    def test_missing_data_dir(self, tmp_path):
        code = main(["train-toy", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_IO

    def test_bad_config_value(self, dataset, tmp_path):
        code = main(["train-toy", "--data", str(dataset),
                     "--out", str(tmp_path / "out"), "--learning-rate", "0"])
        assert code == EXIT_VALIDATION

    def test_unknown_config_key(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus_key = 1\n")
        code = main(["train-toy", "--data", str(dataset),
                     "--out", str(tmp_path / "out"), "--config", str(cfg)])
        assert code == EXIT_VALIDATION

    def test_config_file_with_flag_override(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("max_steps = 0\npyramid_width = 16  # overridden\n")
        out = tmp_path / "out"
        code = main(["train-toy", "--data", str(dataset), "--out", str(out),
                     "--config", str(cfg), "--pyramid-width", "8"])
        assert code == EXIT_OK
        text = (out / "checkpoint" / "model_config.txt").read_text()
        assert "pyramid_width=8" in text


class TestEval:
    def test_self_eval_pred_masks(self, dataset, tmp_path, capsys):
        out = tmp_path / "ev"
        code = main(["eval", "--data", str(dataset),
                     "--pred-masks", str(dataset / "masks"),
                     "--out", str(out), "--absent-class-policy", "skip"])
        assert code == EXIT_OK
        summary = (out / "summary.txt").read_text()
        line = [l for l in summary.splitlines()
                if l.startswith("aggregate.per_image_mean")][0]
        assert float(line.split("=")[1]) >= 1.0 - 1e-5
        csv = (out / "dice.csv").read_text().strip().split("\n")
        assert csv[0] == "image,liver,kidney,gallbladder,vessels,spleen,mean"
        assert len(csv) == 3

    def test_checkpoint_eval(self, dataset, run_dir, tmp_path):
        out = tmp_path / "ev"
        code = main(["eval", "--data", str(dataset),
                     "--checkpoint", str(run_dir / "checkpoint"),
                     "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "dice.csv").exists() and (out / "summary.txt").exists()

    def test_requires_source(self, dataset):
        assert main(["eval", "--data", str(dataset)]) == EXIT_VALIDATION

    def test_missing_masks_dir(self, tmp_path):
        assert main(["eval", "--data", str(tmp_path),
                     "--pred-masks", str(tmp_path)]) == EXIT_IO


class TestExtract:
    def test_writes_levels(self, dataset, run_dir, tmp_path):
        out = tmp_path / "feat"
        code = main(["extract", "--checkpoint", str(run_dir / "checkpoint"),
                     "--image", str(dataset / "images" / "000.png"),
                     "--out", str(out)])
        assert code == EXIT_OK
        names = [f"level_stride{s}.tns4" for s in (4, 8, 16, 32)]
        for name, hw in zip(names, (16, 8, 4, 2)):
            arr = load_tensor(out / name)
            assert arr.shape == (1, 8, hw, hw)
        manifest = (out / "manifest.txt").read_text().split()
        assert manifest == names

    def test_missing_checkpoint(self, dataset, tmp_path):
        code = main(["extract", "--checkpoint", str(tmp_path / "nope"),
                     "--image", str(dataset / "images" / "000.png"),
                     "--out", str(tmp_path / "feat")])
        assert code == EXIT_IO


class TestRender:
    def test_overlay_written(self, dataset, tmp_path):
        out = tmp_path / "ov.png"
        code = main(["render", "--image", str(dataset / "images" / "000.png"),
                     "--mask", str(dataset / "masks" / "000.png"),
                     "--out", str(out)])
        assert code == EXIT_OK
        assert out.exists()

    def test_missing_input(self, tmp_path):
        assert main(["render", "--image", str(tmp_path / "a.png"),
                     "--mask", str(tmp_path / "b.png"),
                     "--out", str(tmp_path / "c.png")]) == EXIT_IO


class TestGradcheckCommand:
    def test_filtered_pass(self, capsys):
        assert main(["gradcheck", "--op", "relu", "--trials", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_injected_bug_caught_and_named(self, capsys):
        code = main(["gradcheck", "--op", "conv", "--trials", "1",
                     "--inject-bug", "conv-backward"])
        assert code == EXIT_VALIDATION
        out = capsys.readouterr().out
        fails = [l for l in out.splitlines() if "FAIL" in l]
        assert fails and any("conv" in l for l in fails)
