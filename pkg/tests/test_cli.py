"""Command-line workflows: config files, exit codes, artifact layout."""

import os

import numpy as np
import pytest

from chromatile import config as configmod
from chromatile.cli import main
from chromatile.errors import DataError, UsageError
from chromatile.eval import parse_csv


def run(args, **env):
    return main([str(a) for a in args])


def read(path):
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def tree_bytes(root, skip=("run.log",)):
    """Map of relative path -> bytes for every file under root."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            if name in skip:
                continue
            full = os.path.join(dirpath, name)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = fh.read()
    return out


class TestConfigFile:
    def test_parse_comments_blanks_and_dotted_keys(self):
        text = "# a comment\n\npretrain.lr = 0.01\nsweep.seeds = 1,2,3\n"
        values = configmod.parse_config_text(text)
        assert values == {"pretrain.lr": "0.01", "sweep.seeds": "1,2,3"}

    def test_duplicate_key_errors(self):
        with pytest.raises(DataError):
            configmod.parse_config_text("a = 1\na = 2\n")

    def test_missing_separator_errors(self):
        with pytest.raises(DataError):
            configmod.parse_config_text("just some words\n")

    def test_typed_getters(self):
        values = {"i": "3", "f": "0.5", "b": "true", "il": "1,2", "sl": "x,y"}
        assert configmod.as_int(values, "i") == 3
        assert configmod.as_float(values, "f") == 0.5
        assert configmod.as_bool(values, "b") is True
        assert configmod.as_int_list(values, "il") == [1, 2]
        assert configmod.as_str_list(values, "sl") == ["x", "y"]
        assert configmod.as_int(values, "absent", 9) == 9

    def test_typed_getter_failures(self):
        with pytest.raises(UsageError):
            configmod.as_int({"k": "noise"}, "k")
        with pytest.raises(UsageError):
            configmod.as_bool({"k": "perhaps"}, "k")
        with pytest.raises(UsageError):
            configmod.as_int({}, "k")  # required key missing


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A micro dataset plus a one-epoch pretraining checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data_cfg = root / "data.cfg"
    data_cfg.write_text(
        "synthetic.n_tiles = 20\n"
        "synthetic.extent = 32\n"
        "synthetic.noise = 0.0\n",
        encoding="utf-8",
    )
    fast_cfg = root / "fast.cfg"
    fast_cfg.write_text(
        "pretrain.epochs = 1\n"
        "pretrain.batch_size = 4\n"
        "finetune.epochs = 1\n"
        "finetune.eval_every = 1\n",
        encoding="utf-8",
    )
    dataset = root / "dataset"
    assert run(["gen-data", "--seed", 5, "--out", dataset, "--config", data_cfg]) == 0
    pretrain = root / "pretrain"
    assert (
        run(
            [
                "pretrain",
                "--seed",
                5,
                "--out",
                pretrain,
                "--data",
                dataset,
                "--config",
                fast_cfg,
            ]
        )
        == 0
    )
    return {
        "root": root,
        "dataset": dataset,
        "pretrain": pretrain,
        "data_cfg": data_cfg,
        "fast_cfg": fast_cfg,
    }


class TestGenData:
    def test_same_seed_same_bytes(self, workspace, tmp_path):
        for name in ("a", "b"):
            assert (
                run(
                    [
                        "gen-data",
                        "--seed",
                        5,
                        "--out",
                        tmp_path / name,
                        "--config",
                        workspace["data_cfg"],
                    ]
                )
                == 0
            )
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(workspace["dataset"])

    def test_threads_do_not_change_bytes(self, workspace, tmp_path):
        assert (
            run(
                [
                    "gen-data",
                    "--seed",
                    5,
                    "--out",
                    tmp_path / "t",
                    "--config",
                    workspace["data_cfg"],
                    "--threads",
                    3,
                ]
            )
            == 0
        )
        assert tree_bytes(tmp_path / "t") == tree_bytes(workspace["dataset"])

    def test_invalid_extent_errors_before_writing(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("synthetic.extent = 8\n", encoding="utf-8")
        out = tmp_path / "never"
        assert run(["gen-data", "--out", out, "--config", cfg]) == 1
        assert not out.exists()

    def test_chroma_out_env_is_default_root(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("CHROMA_OUT", str(tmp_path / "env"))
        assert (
            run(["gen-data", "--seed", 5, "--config", workspace["data_cfg"]]) == 0
        )
        assert (tmp_path / "env" / "manifest.tsv").is_file()

    def test_missing_output_root_errors(self, workspace, monkeypatch):
        monkeypatch.delenv("CHROMA_OUT", raising=False)
        assert run(["gen-data", "--config", workspace["data_cfg"]]) == 1


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        assert run(["definitely-not-a-command"]) == 1
        assert "error" in capsys.readouterr().err

    def test_no_command_is_usage_error(self):
        assert run([]) == 1

    def test_missing_dataset_is_data_error(self, workspace, tmp_path):
        code = run(
            [
                "pretrain",
                "--out",
                tmp_path / "o",
                "--data",
                tmp_path / "missing",
                "--config",
                workspace["fast_cfg"],
            ]
        )
        assert code == 2

    def test_divergent_loss_is_numerical_error(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "boom.cfg"
        cfg.write_text(
            "pretrain.epochs = 1\npretrain.batch_size = 4\npretrain.lr = 1e18\n",
            encoding="utf-8",
        )
        code = run(
            [
                "pretrain",
                "--out",
                tmp_path / "o",
                "--data",
                workspace["dataset"],
                "--config",
                cfg,
            ]
        )
        assert code == 3
        assert "non-finite" in capsys.readouterr().err


class TestPretrain:
    def test_report_shape_and_config_override(self, workspace):
        rows, columns = parse_csv(read(workspace["pretrain"] / "report.csv"))
        assert columns == ["epoch", "lr", "train_loss", "val_metric", "is_best"]
        assert [r["epoch"] for r in rows] == ["0", "1"]

    def test_resume_reproduces_uninterrupted_run(self, workspace, tmp_path):
        cfg2 = tmp_path / "two.cfg"
        cfg2.write_text(
            "pretrain.epochs = 2\npretrain.batch_size = 4\n", encoding="utf-8"
        )
        base = [
            "--seed",
            5,
            "--data",
            workspace["dataset"],
            "--config",
            cfg2,
        ]
        assert run(["pretrain", "--out", tmp_path / "full"] + base) == 0

        import shutil

        shutil.copytree(workspace["pretrain"], tmp_path / "resumed")
        assert (
            run(["pretrain", "--out", tmp_path / "resumed", "--resume"] + base) == 0
        )
        # the continued run reproduces the uninterrupted report and weights
        assert read(tmp_path / "full" / "report.csv") == read(
            tmp_path / "resumed" / "report.csv"
        )
        assert (tmp_path / "full" / "last.ckpt").read_bytes() == (
            tmp_path / "resumed" / "last.ckpt"
        ).read_bytes()

        from chromatile.models import read_checkpoint

        meta_full, _ = read_checkpoint(str(tmp_path / "full" / "best.ckpt"))
        meta_resumed, _ = read_checkpoint(str(tmp_path / "resumed" / "best.ckpt"))
        assert meta_full["best_epoch"] == meta_resumed["best_epoch"]
        assert meta_full["best_metric"] == meta_resumed["best_metric"]

    def test_resume_without_checkpoint_is_data_error(self, workspace, tmp_path):
        code = run(
            [
                "pretrain",
                "--out",
                tmp_path / "empty",
                "--data",
                workspace["dataset"],
                "--config",
                workspace["fast_cfg"],
                "--resume",
            ]
        )
        assert code == 2

    def test_full_profile_recipe_recorded_in_metadata(self, tmp_path):
        from chromatile.models import read_checkpoint

        # the wide profile needs its designed 128-pixel extent
        data_cfg = tmp_path / "data.cfg"
        data_cfg.write_text(
            "synthetic.n_tiles = 5\n"
            "synthetic.extent = 128\n"
            "synthetic.noise = 0.0\n",
            encoding="utf-8",
        )
        dataset = tmp_path / "dataset"
        assert run(["gen-data", "--seed", 3, "--out", dataset, "--config", data_cfg]) == 0
        cfg = tmp_path / "full0.cfg"
        cfg.write_text("pretrain.epochs = 0\n", encoding="utf-8")
        out = tmp_path / "fullprof"
        code = run(
            [
                "pretrain",
                "--out",
                out,
                "--data",
                dataset,
                "--config",
                cfg,
                "--profile",
                "full",
            ]
        )
        assert code == 0
        meta, _ = read_checkpoint(str(out / "last.ckpt"))
        assert meta["profile"] == "full"
        assert meta["lr"] == "0.01"
        assert meta["batch_size"] == "16"
        assert meta["epochs"] == "0"  # config override wins over the profile
        assert meta["encoder.stage_widths"] == "64,128,256,512"


class TestFinetune:
    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        args = [
            "finetune",
            "--seed",
            5,
            "--data",
            workspace["dataset"],
            "--config",
            workspace["fast_cfg"],
            "--init",
            "scratch",
            "--input",
            "spectral",
            "--budget",
            "6",
            "--seeds",
            "1",
        ]
        assert run(args + ["--out", tmp_path / "a"]) == 0
        assert run(args + ["--out", tmp_path / "b"]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        cell = tmp_path / "a" / "finetune" / "scratch-spectral-b6-s1"
        assert (cell / "best.ckpt").is_file()
        rows, _ = parse_csv(read(cell / "metrics.csv"))
        assert rows[0]["metric"] == "map"
        assert 0.0 <= float(rows[0]["value"]) <= 1.0

    def test_colorization_init_restores_encoder(self, workspace, tmp_path, capsys):
        code = run(
            [
                "finetune",
                "--seed",
                5,
                "--out",
                tmp_path / "o",
                "--data",
                workspace["dataset"],
                "--config",
                workspace["fast_cfg"],
                "--init",
                f"colorization:{workspace['pretrain'] / 'best.ckpt'}",
                "--input",
                "spectral",
                "--seeds",
                "1",
            ]
        )
        assert code == 0
        # matching band set: every encoder array restores, none re-initialized
        assert "reinitialized" not in capsys.readouterr().out

    def test_colorization_init_reinitializes_stem_for_band_subset(
        self, workspace, tmp_path, capsys
    ):
        code = run(
            [
                "finetune",
                "--seed",
                5,
                "--out",
                tmp_path / "o",
                "--data",
                workspace["dataset"],
                "--config",
                workspace["fast_cfg"],
                "--init",
                f"colorization:{workspace['pretrain'] / 'best.ckpt'}",
                "--input",
                "subset:B05,B08",
                "--seeds",
                "1",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "reinitialized" in out and "stem" in out

    def test_budget_above_train_size_names_both_numbers(
        self, workspace, tmp_path, capsys
    ):
        code = run(
            [
                "finetune",
                "--out",
                tmp_path / "o",
                "--data",
                workspace["dataset"],
                "--init",
                "scratch",
                "--input",
                "spectral",
                "--budget",
                "50000",
                "--seeds",
                "1",
            ]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert "50000" in err
        n_train = read(workspace["dataset"] / "manifest.tsv").count("\ttrain")
        assert str(n_train) in err

    def test_unknown_init_errors(self, workspace, tmp_path):
        code = run(
            [
                "finetune",
                "--out",
                tmp_path / "o",
                "--data",
                workspace["dataset"],
                "--init",
                "telepathy",
                "--input",
                "spectral",
                "--seeds",
                "1",
            ]
        )
        assert code == 1


@pytest.fixture(scope="module")
def sweep(workspace, tmp_path_factory):
    """The full factorial sweep at zero training epochs, plus ensembles."""
    out = tmp_path_factory.mktemp("sweep")
    zero_cfg = out / "zero.cfg"
    zero_cfg.write_text("finetune.epochs = 0\n", encoding="utf-8")
    code = run(
        [
            "finetune",
            "--seed",
            5,
            "--out",
            out,
            "--data",
            workspace["dataset"],
            "--config",
            zero_cfg,
            "--init",
            f"scratch,colorization:{workspace['pretrain'] / 'best.ckpt'}",
            "--input",
            "rgb,spectral",
            "--budget",
            "4,8,12",
            "--seeds",
            "1,2,3",
        ]
    )
    assert code == 0
    for budget in (4, 8, 12):
        for seed in (1, 2, 3):
            code = run(
                [
                    "ensemble",
                    "--out",
                    out,
                    "--data",
                    workspace["dataset"],
                    "--rgb",
                    out / "finetune" / f"scratch-rgb-b{budget}-s{seed}" / "best.ckpt",
                    "--spectral",
                    out
                    / "finetune"
                    / f"colorization-spectral-b{budget}-s{seed}"
                    / "best.ckpt",
                ]
            )
            assert code == 0
    assert run(["report", "--out", out]) == 0
    return out


class TestSweepAccounting:
    def test_exactly_36_metric_rows(self, sweep):
        rows, columns = parse_csv(read(sweep / "report" / "metrics.csv"))
        assert columns == ["init", "input", "budget", "seed", "metric", "value"]
        assert len(rows) == 36
        cells = {(r["init"], r["input"], r["budget"], r["seed"]) for r in rows}
        assert len(cells) == 36  # no duplicates: full factorial coverage
        assert {r["init"] for r in rows} == {"scratch", "colorization"}
        assert {r["input"] for r in rows} == {"rgb", "spectral"}
        assert {r["budget"] for r in rows} == {"4", "8", "12"}
        assert {r["seed"] for r in rows} == {"1", "2", "3"}

    def test_exactly_9_ensemble_rows(self, sweep):
        rows, columns = parse_csv(read(sweep / "report" / "ensemble.csv"))
        assert columns == ["budget", "seed", "metric", "rgb", "spectral", "ensemble"]
        assert len(rows) == 9
        assert {(r["budget"], r["seed"]) for r in rows} == {
            (str(b), str(s)) for b in (4, 8, 12) for s in (1, 2, 3)
        }
        for row in rows:
            for branch in ("rgb", "spectral", "ensemble"):
                assert 0.0 <= float(row[branch]) <= 1.0

    def test_report_rerun_is_byte_identical(self, sweep):
        before = tree_bytes(sweep / "report")
        assert run(["report", "--out", sweep]) == 0
        assert tree_bytes(sweep / "report") == before


class TestEnsembleCommand:
    def test_identical_checkpoints_give_equal_metrics(self, workspace, tmp_path):
        out = tmp_path / "o"
        ckpt_dir = out / "finetune"
        assert (
            run(
                [
                    "finetune",
                    "--seed",
                    5,
                    "--out",
                    out,
                    "--data",
                    workspace["dataset"],
                    "--config",
                    workspace["fast_cfg"],
                    "--init",
                    "scratch",
                    "--input",
                    "spectral",
                    "--seeds",
                    "1",
                ]
            )
            == 0
        )
        ckpt = ckpt_dir / "scratch-spectral-ball-s1" / "best.ckpt"
        assert (
            run(
                [
                    "ensemble",
                    "--out",
                    out,
                    "--data",
                    workspace["dataset"],
                    "--rgb",
                    ckpt,
                    "--spectral",
                    ckpt,
                    "--tag",
                    "same",
                ]
            )
            == 0
        )
        rows, _ = parse_csv(read(out / "ensemble" / "same" / "metrics.csv"))
        values = {r["branch"]: r["value"] for r in rows}
        assert values["rgb"] == values["spectral"] == values["ensemble"]

        predictions = read(out / "ensemble" / "same" / "predictions.csv")
        header = predictions.splitlines()[0].split(",")
        assert header[0] == "tile_id" and header[1] == "class_0"
        n_test = read(workspace["dataset"] / "manifest.tsv").count("\ttest")
        assert len(predictions.splitlines()) == 1 + n_test


class TestExplainCommand:
    def test_outputs_heatmaps_and_divergence(self, sweep, workspace, tmp_path):
        out = tmp_path / "o"
        code = run(
            [
                "explain",
                "--out",
                out,
                "--data",
                workspace["dataset"],
                "--checkpoint",
                sweep / "finetune" / "scratch-rgb-b4-s1" / "best.ckpt",
                "--checkpoint",
                sweep / "finetune" / "colorization-spectral-b4-s1" / "best.ckpt",
                "--limit",
                "2",
            ]
        )
        assert code == 0
        explain_dir = out / "explain"
        pgms = sorted(p.name for p in explain_dir.glob("*.pgm"))
        assert len(pgms) == 8  # 2 tiles x 2 branches x (map + composite)
        for name in pgms:
            assert (explain_dir / name).read_bytes().startswith(b"P5\n")
        rows, columns = parse_csv(read(explain_dir / "divergence.csv"))
        assert columns == ["tile_id", "class_index", "divergence"]
        assert len(rows) == 2
        for row in rows:
            assert 0.0 <= float(row["divergence"]) <= 1.0

    def test_unknown_tile_id_errors(self, sweep, workspace, tmp_path, capsys):
        code = run(
            [
                "explain",
                "--out",
                tmp_path / "o",
                "--data",
                workspace["dataset"],
                "--checkpoint",
                sweep / "finetune" / "scratch-rgb-b4-s1" / "best.ckpt",
                "--tiles",
                "tile_99999",
            ]
        )
        assert code == 1
        assert "tile_99999" in capsys.readouterr().err

    def test_explicit_class_index(self, sweep, workspace, tmp_path):
        out = tmp_path / "o"
        code = run(
            [
                "explain",
                "--out",
                out,
                "--data",
                workspace["dataset"],
                "--checkpoint",
                sweep / "finetune" / "scratch-rgb-b4-s1" / "best.ckpt",
                "--limit",
                "1",
                "--class",
                "2",
            ]
        )
        assert code == 0
        names = [p.name for p in (out / "explain").glob("*.pgm")]
        assert names and all("-c2" in name for name in names)
