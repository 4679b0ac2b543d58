import csv
import subprocess
import sys

import pytest

from krylovexp import cli
from krylovexp.harness import CSV_COLUMNS
from krylovexp.la_core import read_matrix_market


def opts_for(*argv):
    return cli.resolve_options(cli.build_parser().parse_args(list(argv)))


class TestOptions:
    def test_defaults(self):
        opts = opts_for()
        assert opts["test"] == 1 and opts["mesh"] == 64
        assert opts["nu"] == pytest.approx(1 / 6400)
        assert opts["methods"] == ("ebk",)

    def test_lists(self):
        opts = opts_for("--method", "ebk,ros2", "--dt", "20,10", "--tol", "1e-4,1e-6", "--ns", "30,60")
        assert opts["methods"] == ("ebk", "ros2")
        assert opts["dts"] == (20.0, 10.0)
        assert opts["tols"] == (1e-4, 1e-6)
        assert opts["ns_list"] == (30, 60)

    def test_config_file_and_precedence(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# benchmark\ntest = 2\nmethod=ee2-rt, ros2\n--dt = 5  # trailing comment\n"
                       "export-matrix = A.mtx\ntrace = yes\nout = r.csv\n")
        opts = opts_for("--config", str(cfg), "--dt", "10")
        assert opts["test"] == 2
        assert opts["methods"] == ("ee2-rt", "ros2")
        assert opts["dts"] == (10.0,)
        assert opts["export_matrix"] == "A.mtx"
        assert opts["trace"] is True

    @pytest.mark.parametrize("text", ["bogus = 1\n", "just words\n", "trace = maybe\n", "mesh = many\n"])
    def test_bad_config(self, tmp_path, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        with pytest.raises(cli.ConfigError):
            opts_for("--config", str(cfg))

    @pytest.mark.parametrize("argv", [
        ["--method", "rk4"],
        ["--mesh", "256"],
        ["--dt", "0"],
        ["--tol=-1e-4"],
        ["--trace"],
        ["--jobs", "0"],
    ])
    def test_rejected_options(self, argv):
        with pytest.raises(cli.ConfigError):
            opts_for(*argv)

    def test_fullscale_flag_unlocks_large_meshes(self):
        assert opts_for("--mesh", "512", "--fullscale")["mesh"] == 512

    def test_argparse_choices(self):
        with pytest.raises(SystemExit):
            opts_for("--mesh", "100")
        with pytest.raises(SystemExit):
            opts_for("--test", "3")


class TestMain:
    def test_usage_errors_exit_2(self, capsys):
        assert cli.main(["--mesh", "256"]) == cli.EXIT_USAGE
        assert "--fullscale" in capsys.readouterr().err

    def test_empty_method_list(self, capsys, tmp_path):
        out = tmp_path / "empty.csv"
        assert cli.main(["--method", "", "--out", str(out)]) == cli.EXIT_OK
        assert out.read_text().splitlines() == [",".join(CSV_COLUMNS)]

    def test_diagnostics_only(self, capsys):
        assert cli.main(["--method", "", "--diagnostics", "-"]) == 0
        lines = capsys.readouterr().out.splitlines()
        keys = {line.split("=")[0] for line in lines if "=" in line}
        assert {"min_h", "max_h", "ratio", "max_elem_peclet", "asymmetry_ratio"} <= keys

    @pytest.mark.slow
    def test_full_run(self, tmp_path, capsys):
        out = tmp_path / "res.csv"
        argv = ["--test", "1", "--method", "ebk,ros2", "--dt", "100", "--tol", "1e-4", "--ns", "60",
                "--out", str(out), "--trace", "--export-matrix", str(tmp_path / "A.mtx"),
                "--diagnostics", str(tmp_path / "diag.txt"), "--jobs", "2"]
        assert cli.main(argv) == cli.EXIT_OK
        text = capsys.readouterr().out
        assert "EBK" in text and "ROS2" in text
        with out.open() as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == list(CSV_COLUMNS)
        assert [r["method"] for r in rows] == ["ebk", "ros2"]
        assert float(rows[0]["error"]) < 1e-6 and int(rows[1]["lss"]) == 20
        assert (tmp_path / "res_traces").is_dir()
        assert read_matrix_market(tmp_path / "A.mtx").shape == (63 * 63, 63 * 63)
        assert "min_h=" in (tmp_path / "diag.txt").read_text()

    @pytest.mark.slow
    def test_failed_row_exits_nonzero(self, tmp_path, capsys):
        cfg = tmp_path / "fail.cfg"
        cfg.write_text("method = ebk\ntol = 1e-15\nns = 30\ninterp = linear\n")
        assert cli.main(["--config", str(cfg), "--out", str(tmp_path / "f.csv")]) == cli.EXIT_ROW_FAILED
        assert "FAILED EBK" in capsys.readouterr().err
        rows = list(csv.DictReader((tmp_path / "f.csv").open()))
        assert rows[0]["error"] == "nan"

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "krylovexp", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "--export-matrix" in proc.stdout
