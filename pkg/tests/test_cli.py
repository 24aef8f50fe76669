import json

import pytest

from treedp import cli, market

from conftest import arbitrage_model, sshaped_t2_model


@pytest.fixture
def superlinear_file(tmp_path):
    p = tmp_path / "superlinear.json"
    p.write_text(json.dumps(market.market_to_dict(sshaped_t2_model())))
    return str(p)


@pytest.fixture
def arbitrage_file(tmp_path):
    p = tmp_path / "arbitrage.json"
    p.write_text(json.dumps(market.market_to_dict(arbitrage_model())))
    return str(p)


@pytest.fixture
def toy_file(tmp_path):
    # one-period no-arbitrage model that solves in well under a second
    model_dict = {
        "assets": 1,
        "initial_cash": 1.0,
        "cost": {"kind": "power", "coeff": 0.1, "exponent": 2.0},
        "utility": {"kind": "sshaped", "gamma": 2.0, "kappa": 1.0, "beta": 1.0},
        "tree": [
            {"id": "r", "time": 0, "parent": None, "prob": 1.0, "data": {"Z": [1.0]}},
            {"id": "u", "time": 1, "parent": "r", "prob": 0.5, "data": {"Z": [2.0]}},
            {"id": "d", "time": 1, "parent": "r", "prob": 0.5, "data": {"Z": [0.5]}},
        ],
    }
    p = tmp_path / "toy.json"
    p.write_text(json.dumps(model_dict))
    return str(p)


class TestCheck:
    def test_superlinear_exit_0(self, superlinear_file, tmp_path, capsys):
        code = cli.main(["check", superlinear_file, "--out", str(tmp_path / "o")])
        assert code == 0
        report = json.loads((tmp_path / "o" / "check_report.json").read_text())
        assert report["horizon_positivity"]["verdict"] == "holds"

    def test_arbitrage_exit_2_with_witness(self, arbitrage_file, tmp_path, capsys):
        code = cli.main(["check", arbitrage_file, "--out", str(tmp_path / "o")])
        assert code == 2
        report = json.loads((tmp_path / "o" / "check_report.json").read_text())
        assert report["horizon_positivity"]["verdict"] == "fails"
        assert report["horizon_positivity"]["witness"]
        witness_csv = (tmp_path / "o" / "witness.csv").read_text().splitlines()
        assert witness_csv[0].startswith("node")
        assert any(line.startswith("r,") for line in witness_csv[1:])

    def test_terminal_form(self, superlinear_file, tmp_path, capsys):
        code = cli.main([
            "check", superlinear_file, "--form", "terminal",
            "--out", str(tmp_path / "o"),
        ])
        assert code == 0

    def test_out_dir_from_env(self, superlinear_file, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("TREEDP_OUT", str(tmp_path / "env_out"))
        code = cli.main(["check", superlinear_file])
        assert code == 0
        assert (tmp_path / "env_out" / "check_report.json").exists()

    def test_malformed_exit_1(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{oops")
        with pytest.raises(SystemExit) as err:
            cli.main(["check", str(p)])
        assert err.value.code == 1


class TestSolve:
    def test_toy_solve(self, toy_file, tmp_path, capsys):
        out = tmp_path / "o"
        code = cli.main([
            "solve", toy_file, "--out", str(out),
            "--radius", "1.0", "--points", "65",
        ])
        assert code == 0
        report = json.loads((out / "solve_report.json").read_text())
        assert report["gap"] <= 1e-3 * (1 + abs(report["value"]))
        assert report["verify"]["optimal"]
        assert (out / "policy.csv").exists()
        assert (out / "value_tables.csv").exists()

    def test_unchecked_arbitrage_blocks(self, arbitrage_file, tmp_path, capsys):
        code = cli.main(["solve", arbitrage_file, "--out", str(tmp_path / "o")])
        assert code == 2

    def test_forced_arbitrage_exit_4(self, arbitrage_file, tmp_path, capsys):
        out = tmp_path / "o"
        code = cli.main(["solve", arbitrage_file, "--force", "--out", str(out)])
        assert code == 4
        report = json.loads((out / "solve_report.json").read_text())
        assert report["error"] == "SearchBoxExhausted"
        assert "root" in report["message"] or "r" in report["message"]

    def test_bad_config_exit_1(self, toy_file, capsys):
        with pytest.raises(SystemExit) as err:
            cli.main(["solve", toy_file, "--grid", "4"])
        assert err.value.code == 1


class TestOracle:
    def test_toy_oracle_pass(self, toy_file, tmp_path, capsys):
        out = tmp_path / "o"
        code = cli.main([
            "oracle", toy_file, "--grids=-1:1:201", "--out", str(out),
            "--radius", "1.0", "--points", "65",
        ])
        assert code == 0
        report = json.loads((out / "oracle_report.json").read_text())
        assert report["pass"]
        assert report["gap"] <= report["tolerance"]

    def test_budget_exceeded_exit_5(self, superlinear_file, tmp_path, capsys):
        code = cli.main([
            "oracle", superlinear_file, "--grids=-1:1:500",
            "--out", str(tmp_path / "o"),
        ])
        assert code == 5

    def test_bad_grid_spec_exit_1(self, toy_file, capsys):
        with pytest.raises(SystemExit) as err:
            cli.main(["oracle", toy_file, "--grids", "nope"])
        assert err.value.code == 1


class TestDeterminism:
    def test_reports_byte_identical_across_threads(self, toy_file, tmp_path, capsys):
        blobs = {}
        for threads in (1, 2, 8):
            out = tmp_path / f"t{threads}"
            code = cli.main([
                "solve", toy_file, "--out", str(out),
                "--radius", "1.0", "--points", "65", "--threads", str(threads),
            ])
            assert code == 0
            blobs[threads] = (
                (out / "solve_report.json").read_bytes(),
                (out / "policy.csv").read_bytes(),
                (out / "value_tables.csv").read_bytes(),
            )
        assert blobs[1] == blobs[2] == blobs[8]
