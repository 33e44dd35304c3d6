import numpy as np
import pytest

from cfprompt.cli import main
from cfprompt.io import read_csv, read_dataset, read_pgm
from cfprompt.scm import IMAGE_SIDE

TINY = """\
corpus_size = 300
diffusion_steps = 30
diffusion_hidden = 64
classifier_steps = 30
classifier_hidden = 32
encoder_steps = 30
encoder_per_class = 20
prompt_epochs = 3
T = 10
eval_images = 6
dump_images = 2
test_per_class = 5
shots = 2
repeats = 2
"""

PIPELINE = ("gen-data", "pretrain-diffusion", "train-classifier", "gen-cf", "train-prompts", "eval")


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(cfg_path, out, *cmds, extra=()):
    for c in cmds:
        status = main([c, "--config", str(cfg_path), "--out", str(out), *extra])
        assert status == 0, c


@pytest.fixture(scope="module")
def pipeline(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run(cfg_path, out, *PIPELINE)
    return out


def test_pipeline_artifacts(pipeline):
    for rel in ("data/corpus.cfsd", "data/train.cfsd", "data/test.cfsd", "models/denoiser.ckpt",
                "models/classifier.ckpt", "cf/counterfactuals.cfsd", "cf/pairs.csv", "models/prompts.ckpt",
                "metrics/eval.csv", "metrics/prompt_history.csv", "config.txt"):
        assert (pipeline / rel).exists(), rel
    assert read_pgm(pipeline / "cf/images/0001_diff.pgm").shape == (IMAGE_SIDE, IMAGE_SIDE)
    info, rows = read_csv(pipeline / "metrics/eval.csv")
    assert info["schema"] == "eval/1" and len(rows) == 1


def test_lineage_embedded_everywhere(pipeline, cfg_path):
    from cfprompt.config import load_config
    h = load_config(cfg_path).hash()
    _, info = read_dataset(pipeline / "cf/counterfactuals.cfsd")
    assert info["lineage"] == h
    assert read_csv(pipeline / "cf/pairs.csv")[0]["lineage"] == h


def test_gen_data_is_byte_identical(cfg_path, tmp_path):
    run(cfg_path, tmp_path / "a", "gen-data")
    run(cfg_path, tmp_path / "b", "gen-data")
    for name in ("corpus", "train", "test", "encoder"):
        a = (tmp_path / "a" / "data" / f"{name}.cfsd").read_bytes()
        assert a == (tmp_path / "b" / "data" / f"{name}.cfsd").read_bytes()


def test_metrics_csvs_reproducible(pipeline, cfg_path, tmp_path):
    run(cfg_path, tmp_path, *PIPELINE)
    for rel in ("cf/pairs.csv", "metrics/eval.csv", "metrics/prompt_history.csv"):
        assert (pipeline / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


def test_missing_artifact_names_producer(cfg_path, tmp_path, capsys):
    assert main(["gen-cf", "--config", str(cfg_path), "--out", str(tmp_path)]) == 2
    assert "run `gen-data` first" in capsys.readouterr().err
    run(cfg_path, tmp_path, "gen-data")
    assert main(["gen-cf", "--config", str(cfg_path), "--out", str(tmp_path)]) == 2
    assert "run `pretrain-diffusion` first" in capsys.readouterr().err


def test_bad_config_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("seed = 1\nnope = 2\n")
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert f"{p}:2: unknown key" in capsys.readouterr().err


def test_eval_refuses_mismatched_lineage(pipeline, cfg_path, capsys):
    assert main(["eval", "--config", str(cfg_path), "--out", str(pipeline), "--seed", "5"]) == 2
    assert "--allow-lineage-mismatch" in capsys.readouterr().err
    assert main(["eval", "--config", str(cfg_path), "--out", str(pipeline), "--seed", "5",
                 "--allow-lineage-mismatch"]) == 0


def test_sweep_lambda_rows(pipeline, cfg_path):
    run(cfg_path, pipeline, "sweep", extra=("--axis", "lambda", "--values", "0,0.5,1,2"))
    info, rows = read_csv(pipeline / "metrics/sweep_lambda.csv")
    assert info["schema"] == "sweep-lambda/1" and len(rows) == 4
    assert list(rows[0])[:5] == ["lambda", "seen_acc", "unseen_acc", "L_basic", "L_cf"]
    assert [float(r["lambda"]) for r in rows] == [0, 0.5, 1, 2]


def test_sweep_scale_rows(pipeline, cfg_path):
    run(cfg_path, pipeline, "sweep", extra=("--axis", "s", "--values", "0,1"))
    _, rows = read_csv(pipeline / "metrics/sweep_s.csv")
    assert len(rows) == 2 and all(0 <= float(r["flip_rate"]) <= 1 for r in rows)


def test_sweep_needs_axis(pipeline, cfg_path):
    assert main(["sweep", "--config", str(cfg_path), "--out", str(pipeline)]) == 2


def test_verify_theory(cfg_path, tmp_path, capsys):
    assert main(["verify-theory", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "metrics/theory.csv")
    assert rows and all(r["passed"] == "1" for r in rows)
    assert "FAIL" not in capsys.readouterr().out


def test_counterfactual_labels_differ(pipeline):
    _, rows = read_csv(pipeline / "cf/pairs.csv")
    assert all(r["y"] != r["y_cf"] for r in rows)
    assert np.all(np.isfinite([float(r["l2"]) for r in rows]))
