"""End-to-end command-line pipeline on a miniature configuration."""

import csv

import numpy as np
import pytest

from siad.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from siad.fileio import read_noise, read_result_rows, read_threshold

TINY_CONFIG = """
[cohort]
n_train = 12
n_test = 6
n_inference = 10
n_variance = 4
n_diseased = 6
side = 8
seed = 5
signal_amplitude = 4.0
signal_size = 2

[model]
channels = 4
latent = 2

[train]
epochs = 2
batch_size = 6

[detect]
quantile = 0.95
noise_source = known

[experiment]
n_null = 10
workers = 1
bins = 20
"""


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """generate -> train -> calibrate once; the commands under test reuse it."""
    out = tmp_path_factory.mktemp("run")
    config = out / "config.ini"
    config.write_text(TINY_CONFIG)
    base = ["--config", str(config), "--out", str(out)]
    assert main(["generate", *base]) == EXIT_OK
    assert main(["train", *base]) == EXIT_OK
    assert main(["calibrate", *base]) == EXIT_OK
    return out, base


class TestUsageAndErrors:
    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == EXIT_USAGE
        capsys.readouterr()

    def test_missing_manifest_is_data_error(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path)]) == EXIT_DATA
        capsys.readouterr()

    def test_unknown_config_key_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[cohort]\nnonsense = 1\n")
        assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_DATA
        capsys.readouterr()

    def test_generate_refuses_overwrite_without_force(self, pipeline_dir, capsys):
        out, base = pipeline_dir
        assert main(["generate", *base]) == EXIT_DATA
        capsys.readouterr()


class TestGenerate:
    def test_outputs_exist(self, pipeline_dir):
        out, _ = pipeline_dir
        assert (out / "manifest.csv").exists()
        assert (out / "roi.bin").exists()
        assert (out / "images" / "train-0000.bin").exists()

    def test_force_regeneration_is_idempotent(self, pipeline_dir, capsys):
        out, base = pipeline_dir
        before = (out / "images" / "train-0000.bin").read_bytes()
        assert main(["generate", *base, "--force"]) == EXIT_OK
        after = (out / "images" / "train-0000.bin").read_bytes()
        assert before == after
        capsys.readouterr()


class TestTrainCommand:
    def test_training_curve_written(self, pipeline_dir):
        out, _ = pipeline_dir
        with open(out / "training_curve.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["epoch"] == "0"
        best = [float(r["holdout_loss"]) for r in rows]
        # running best never increases
        running = np.minimum.accumulate(best)
        assert all(running[i + 1] <= running[i] for i in range(len(running) - 1))


class TestCalibrateCommand:
    def test_threshold_and_noise_recorded(self, pipeline_dir):
        out, _ = pipeline_dir
        thr = read_threshold(out / "threshold.json")
        assert thr.source_quantile == 0.95
        noise = read_noise(out / "noise.json")
        assert noise.provenance == "known-by-construction"
        assert noise.sigma2 == 1.0

    def test_estimated_noise_mode(self, pipeline_dir, tmp_path, capsys):
        out, base = pipeline_dir
        config = tmp_path / "config.ini"
        config.write_text(TINY_CONFIG.replace("noise_source = known",
                                              "noise_source = estimated"))
        assert main(["calibrate", "--config", str(config), "--out", str(out)]) == EXIT_OK
        noise = read_noise(out / "noise.json")
        assert noise.provenance == "estimated"
        assert 0.5 < noise.sigma2 < 1.5
        capsys.readouterr()
        # restore the known-noise calibration for the remaining tests
        assert main(["calibrate", *base]) == EXIT_OK


class TestTestCommand:
    def test_single_subject_outputs(self, pipeline_dir, capsys):
        out, base = pipeline_dir
        assert main(["test", *base, "--subject", "inference-0000"]) == EXIT_OK
        capsys.readouterr()
        rows = read_result_rows(out / "result_inference-0000.csv")
        assert len(rows) == 1 and rows[0][0] == "inference-0000"
        assert (out / "mask_inference-0000.csv").exists()
        assert (out / "mask_inference-0000.bin").exists()

    def test_rerun_is_identical(self, pipeline_dir, capsys):
        out, base = pipeline_dir
        assert main(["test", *base, "--subject", "inference-0001"]) == EXIT_OK
        first = (out / "result_inference-0001.csv").read_bytes()
        assert main(["test", *base, "--subject", "inference-0001"]) == EXIT_OK
        assert (out / "result_inference-0001.csv").read_bytes() == first
        capsys.readouterr()

    def test_unknown_subject(self, pipeline_dir, capsys):
        _, base = pipeline_dir
        assert main(["test", *base, "--subject", "nobody"]) == EXIT_DATA
        capsys.readouterr()


class TestExperiments:
    def test_null_experiment_outputs(self, pipeline_dir, capsys):
        out, base = pipeline_dir
        assert main(["experiment-null", *base]) == EXIT_OK
        capsys.readouterr()
        rows = read_result_rows(out / "null_pvalues.csv")
        assert len(rows) == 10
        for row in rows:
            if row[-1] == "tested":
                assert float(row[5]) >= float(row[4])  # bonferroni >= naive
        with open(out / "null_histogram.csv", newline="") as fh:
            hist = list(csv.DictReader(fh))
        assert len(hist) == 20
        with open(out / "null_ks.csv", newline="") as fh:
            ks = list(csv.DictReader(fh))
        assert {r["method"] for r in ks} == {"naive", "selective"}

    def test_fdr_experiment_row_sums(self, pipeline_dir, capsys):
        out, base = pipeline_dir
        assert main(["experiment-fdr", *base]) == EXIT_OK
        capsys.readouterr()
        with open(out / "fdr_summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 + 3  # naive, bonferroni, selective at three levels
        for row in rows:
            total = (int(row["rejections"]) + int(row["failures"])
                     + int(row["degenerate_skips"]))
            assert total == 10  # n_inference

    def test_power_experiment_and_report(self, pipeline_dir, capsys):
        out, base = pipeline_dir
        assert main(["experiment-power", *base]) == EXIT_OK
        assert main(["report", *base]) == EXIT_OK
        capsys.readouterr()
        with open(out / "table1.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            labels = [row[0] for row in reader]
        assert header == ["method", "reject_the_null", "failed_to_reject", "fdr"]
        assert labels[0] == "Naive" and labels[1] == "Bonferroni"
        assert any(label.startswith("SI [alpha=0.05]") for label in labels)
        assert (out / "table2.csv").exists()
        assert (out / "histogram.dat").exists()

    def test_report_without_experiments_is_data_error(self, tmp_path, capsys):
        assert main(["report", "--out", str(tmp_path)]) == EXIT_DATA
        capsys.readouterr()

    def test_piece_cap_maps_to_numerical_exit_code(self, pipeline_dir, tmp_path,
                                                   capsys):
        out, _ = pipeline_dir
        config = tmp_path / "config.ini"
        config.write_text(TINY_CONFIG.replace("quantile = 0.95",
                                              "quantile = 0.95\nmax_pieces = 1"))
        codes = set()
        # a planted-anomaly subject is certain to reach the parametric search
        for sid in ("diseased-0000", "diseased-0001", "diseased-0002"):
            codes.add(main(["test", "--config", str(config), "--out", str(out),
                            "--subject", sid]))
        capsys.readouterr()
        assert EXIT_NUMERICAL in codes
