import csv

import numpy as np
import pytest

from lddmm_gan import cli, data, gan
from lddmm_gan.errors import DivergenceError


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--out", str(out), "--count", "8", "--size", "32",
                     "--outer-mean", "8", "--outer-std", "2", "--seed", "4"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--data", str(dataset), "--epochs", "1", "--batch", "4", "--out", str(out)]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_lines(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)


class TestSimulate:
    def test_count_and_manifest(self, dataset):
        rows = read_csv(dataset / "manifest.csv")
        assert len(rows) == 8
        assert len(list((dataset / "images").glob("*.raw"))) == 8
        assert all((dataset / r["labels"]).exists() for r in rows)
        assert data.load_raw(dataset / rows[0]["image"]).shape == (32, 32)

    def test_same_seed_same_manifest(self, tmp_path):
        for run in ("a", "b"):
            cli.main(["simulate", "--out", str(tmp_path / run), "--count", "3", "--size", "16",
                      "--outer-mean", "5", "--outer-std", "1", "--inner-mean", "2", "--inner-std", "0.5"])
        assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()

    def test_default_count(self):
        args = cli.build_parser().parse_args(["simulate"])
        assert (args.count, args.size) == (2560, 64)

    def test_invalid_size(self, tmp_path, capsys):
        assert cli.main(["simulate", "--out", str(tmp_path), "--size", "8"]) == cli.EXIT_USAGE
        assert "size" in capsys.readouterr().err


class TestTrain:
    def test_defaults_echoed(self, trained):
        conf = config_lines(trained / "run_config.txt")
        assert float(conf["lam"]) == 1000 and float(conf["sigma2"]) == 1.0
        assert float(conf["alpha"]) == 0.0025 and float(conf["s"]) == 4 and float(conf["beta"]) == 0.2
        assert int(conf["T"]) == 10 and float(conf["lr_g"]) == 5e-5 and float(conf["lr_d"]) == 1e-6
        assert conf["seed"] == "0" and conf["mode"] == "svf-gan"

    def test_outputs(self, trained):
        assert (trained / "generator.ckpt").exists() and (trained / "discriminator.ckpt").exists()
        rows = read_csv(trained / "train_log.csv")
        assert len(rows) == 2 and list(rows[0]) == gan.LOG_COLUMNS

    def test_baseline_trace(self, dataset, tmp_path):
        out = tmp_path / "b"
        assert cli.main(["train", "--mode", "baseline-svf", "--data", str(dataset), "--iterations", "5",
                         "--pair", "0,1", "--out", str(out)]) == 0
        rows = read_csv(out / "energy_trace.csv")
        assert len(rows) == 6 and list(rows[0]) == cli.TRACE_COLUMNS
        for name in ("velocity.raw", "displacement.raw", "warped.raw", "run_config.txt"):
            assert (out / name).exists()

    @pytest.mark.parametrize("flag,value", [("--beta", "1.5"), ("--lambda", "0"), ("--lr-g", "-1"),
                                            ("--steps", "0")])
    def test_invalid_flag_named(self, dataset, tmp_path, capsys, flag, value):
        assert cli.main(["train", "--data", str(dataset), flag, value, "--out", str(tmp_path)]) == cli.EXIT_USAGE
        assert flag in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == cli.EXIT_DATA

    def test_bad_pair(self, dataset, tmp_path):
        assert cli.main(["train", "--mode", "baseline-svf", "--data", str(dataset), "--pair", "0,99",
                         "--out", str(tmp_path)]) == cli.EXIT_USAGE

    def test_divergence_exit_code(self, dataset, tmp_path, monkeypatch):
        def boom(*a, **kw):
            raise DivergenceError("10 consecutive batches diverged", step=9)
        monkeypatch.setattr(cli, "train", boom)
        assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path)]) == cli.EXIT_DIVERGENCE

    def test_output_root_from_environment(self, dataset, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
        assert cli.main(["train", "--data", str(dataset), "--epochs", "0"]) == 0
        assert (tmp_path / "train" / "run_config.txt").exists()

    def test_no_output_directory(self, dataset, monkeypatch):
        monkeypatch.delenv(cli.OUT_ENV, raising=False)
        assert cli.main(["train", "--data", str(dataset)]) == cli.EXIT_USAGE


class TestRegister:
    def test_contract(self, dataset, trained, tmp_path):
        src, tgt = dataset / "images" / "torus_00000.raw", dataset / "images" / "torus_00001.raw"
        assert cli.main(["register", "--model", str(trained), "--source", str(src), "--target", str(tgt),
                         "--out", str(tmp_path)]) == 0
        for name in ("velocity.raw", "displacement.raw", "warped.raw", "metrics.csv", "run_config.txt",
                     "pair_panel.pgm", "pair_panel.png"):
            assert (tmp_path / name).exists()
        assert data.load_raw(tmp_path / "velocity.raw").shape == (32, 32, 2)
        assert len(read_csv(tmp_path / "metrics.csv")) == 1

    def test_source_equals_target(self, dataset, trained, tmp_path):
        img = dataset / "images" / "torus_00002.raw"
        assert cli.main(["register", "--model", str(trained), "--source", str(img), "--target", str(img),
                         "--out", str(tmp_path)]) == 0
        I, warped = data.load_raw(img), data.load_raw(tmp_path / "warped.raw")
        # mse_rel is undefined for I0 == I1; the residual is normalized by the image energy
        assert np.sum((warped - I) ** 2) / np.sum(I ** 2) <= 0.05

    def test_missing_model(self, dataset, tmp_path):
        img = str(dataset / "images" / "torus_00000.raw")
        assert cli.main(["register", "--model", str(tmp_path / "none"), "--source", img, "--target", img,
                         "--out", str(tmp_path)]) == cli.EXIT_DATA

    def test_grid_mismatch(self, dataset, trained, tmp_path):
        other = tmp_path / "small.raw"
        data.save_raw(np.zeros((16, 16), np.float32), other)
        img = str(dataset / "images" / "torus_00000.raw")
        assert cli.main(["register", "--model", str(trained), "--source", img, "--target", str(other),
                         "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


class TestEvaluate:
    def _pairs(self, path, rows):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["source", "target"])
            w.writeheader()
            w.writerows(rows)

    def test_two_pairs_with_labels(self, dataset, trained, tmp_path):
        pairs = dataset / "pairs_eval.csv"
        self._pairs(pairs, [{"source": "images/torus_00000.raw", "target": "images/torus_00001.raw"},
                            {"source": "images/torus_00002.raw", "target": "images/torus_00003.raw"}])
        out = tmp_path / "e"
        assert cli.main(["evaluate", "--pairs", str(pairs), "--labels", str(dataset / "labels"),
                         "--model", str(trained), "--out", str(out)]) == 0
        rows = read_csv(out / "metrics.csv")
        assert len(rows) == 2
        assert all(0 <= float(r["dice_annulus"]) <= 1 for r in rows)
        assert (out / "pair0001_panel.png").exists()

    def test_zero_pairs_is_an_error(self, dataset, tmp_path):
        pairs = tmp_path / "empty.csv"
        self._pairs(pairs, [])
        out = tmp_path / "e"
        assert cli.main(["evaluate", "--pairs", str(pairs), "--out", str(out)]) == cli.EXIT_DATA
        assert not (out / "metrics.csv").exists()

    def test_missing_pairs_file(self, tmp_path):
        assert cli.main(["evaluate", "--pairs", str(tmp_path / "x.csv"), "--out", str(tmp_path)]) == cli.EXIT_DATA
