import json

import numpy as np
import pytest

from skelfont import raster
from skelfont.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestErrorPaths:
    def test_missing_config_exit_1(self, capsys, tmp_path):
        code, out, err = run(
            capsys, "train", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
            "--config", str(tmp_path / "missing.json"),
        )
        assert code == 1
        assert "error_code: CONFIG_NOT_FOUND" in err

    def test_unknown_flag_rejected(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["skeletonize", "--input", "a", "--output", "b", "--bogus"])
        assert exc.value.code == 1

    def test_missing_input_dir(self, capsys, tmp_path):
        code, out, err = run(
            capsys, "skeletonize", "--input", str(tmp_path / "none"),
            "--output", str(tmp_path / "out"),
        )
        assert code == 1
        assert "error_code: MISSING_FILE" in err

    def test_help_lists_flags_with_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["skeletonize", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--input", "--output", "--max-iters", "--no-close", "--dilate"):
            assert flag in out
        assert "default 100" in out and "default 1" in out

    def test_every_subcommand_has_help(self, capsys):
        for cmd in ("skeletonize", "synth-data", "pretrain-sg", "train",
                    "generate", "eval", "grid"):
            with pytest.raises(SystemExit) as exc:
                main([cmd, "--help"])
            assert exc.value.code == 0
            assert capsys.readouterr().out


class TestSkeletonizeCommand:
    def test_three_pngs(self, capsys, tmp_path):
        src = tmp_path / "in"
        src.mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            arr = np.ones((32, 32))
            arr[8:24, 8 + i : 20 + i] = 0.0
            raster.save_image(raster.RasterImage(arr), src / f"g{i}.png")
        code, out, err = run(
            capsys, "skeletonize", "--input", str(src), "--output", str(tmp_path / "out")
        )
        assert code == 0
        assert "resolved config" in out
        assert len(list((tmp_path / "out").glob("*.png"))) == 3
        report = json.loads(out.strip().splitlines()[-1])
        assert report["processed"] == 3


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """One tiny end-to-end run shared by the command tests below."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    corpus = root / "corpus"
    code = main([
        "synth-data", "--out", str(corpus), "--glyphs", "10",
        "--canvas", "32", "--seed", "3",
    ])
    assert code == 0
    cfg = {
        "epochs": 1, "image_size": 32, "channels": 8, "sg_channels": 8,
        "weights": {"lambda1": 1, "lambda2": 1, "lambda3": 1, "lambda4": 10},
    }
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    code = main([
        "pretrain-sg", "--data", str(corpus), "--out", str(root / "sg"),
        "--config", str(cfg_path), "--seed", "0",
    ])
    assert code == 0
    code = main([
        "train", "--data", str(corpus), "--sg", str(root / "sg"),
        "--out", str(root / "run"), "--config", str(cfg_path),
        "--seed", "0", "--max-steps", "3",
    ])
    assert code == 0
    return root


class TestPipelineCommands:
    def test_train_outputs(self, pipeline_dir):
        run_dir = pipeline_dir / "run"
        assert (run_dir / "train_log.ndjson").is_file()
        assert (run_dir / "loss_curves.png").is_file()
        ckpts = list((run_dir / "checkpoints").iterdir())
        assert ckpts

    def test_generate_auto_skeleton(self, capsys, pipeline_dir):
        ckpt = sorted((pipeline_dir / "run" / "checkpoints").iterdir())[-1]
        src = pipeline_dir / "corpus" / "source" / "g0000.png"
        code, out, err = run(
            capsys, "generate", "--ckpt", str(ckpt), "--input", str(src),
        )
        assert code == 0
        produced = src.with_suffix(".gen.png")
        assert produced.is_file()
        img = raster.load_image(produced)
        assert (img.height, img.width) == (32, 32)

    def test_generate_custom_skeleton_path(self, capsys, pipeline_dir, tmp_path):
        ckpt = sorted((pipeline_dir / "run" / "checkpoints").iterdir())[-1]
        src = pipeline_dir / "corpus" / "source" / "g0001.png"
        skel = pipeline_dir / "corpus" / "_skeletons" / "source" / "g0001.png"
        out_png = tmp_path / "custom.png"
        code, _, _ = run(
            capsys, "generate", "--ckpt", str(ckpt), "--input", str(src),
            "--skeleton", str(skel), "--output", str(out_png),
        )
        assert code == 0 and out_png.is_file()

    def test_eval_report(self, capsys, pipeline_dir):
        ckpt = sorted((pipeline_dir / "run" / "checkpoints").iterdir())[-1]
        out_dir = pipeline_dir / "eval"
        code, out, err = run(
            capsys, "eval", "--ckpt", str(ckpt), "--data", str(pipeline_dir / "corpus"),
            "--split", "train", "--out", str(out_dir), "--seed", "0",
        )
        assert code == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert set(report) == {"acc_top1", "ffd", "n_images", "classifier_checkpoint"}
        assert 0.0 <= report["acc_top1"] <= 1.0
        assert report["ffd"] >= 0.0
        assert (out_dir / "predictions.csv").is_file()
        assert (out_dir / "samples_grid.png").is_file()

    def test_grid_with_attention(self, capsys, pipeline_dir):
        ckpt = sorted((pipeline_dir / "run" / "checkpoints").iterdir())[-1]
        out_png = pipeline_dir / "sheet.png"
        code, out, err = run(
            capsys, "grid", "--ckpt", str(ckpt), "--data", str(pipeline_dir / "corpus"),
            "--split", "train", "--count", "4", "--out", str(out_png), "--attention",
        )
        assert code == 0
        assert out_png.is_file()
        assert (pipeline_dir / "sheet_attention.png").is_file()

    def test_seeded_rerun_identical_outputs(self, capsys, pipeline_dir, tmp_path):
        corpus_a, corpus_b = tmp_path / "a", tmp_path / "b"
        for dest in (corpus_a, corpus_b):
            code, *_ = run(
                capsys, "synth-data", "--out", str(dest), "--glyphs", "3",
                "--canvas", "32", "--seed", "9",
            )
            assert code == 0
        for rel in sorted(p.relative_to(corpus_a) for p in corpus_a.rglob("*")):
            if (corpus_a / rel).is_file():
                assert (corpus_a / rel).read_bytes() == (corpus_b / rel).read_bytes()
