import io
import json
import subprocess
import sys

import pytest

from corrtest.cli import main, read_study
from corrtest.exceptions import ParseError
from corrtest.model import ModelParams, log_likelihood

WORKED_CSV = "group,m0,m1,m2,n0,n1\nA,9,7,23,20,34\nB,7,5,13,19,36\n"
RP_CSV = ("group,m0,m1,m2,n0,n1\nDOM,15,6,7,0,0\nAR,7,5,9,0,0\n"
          "SL,3,2,14,0,0\nISO,67,24,57,0,0\n")


@pytest.fixture
def csv_file(tmp_path):
    def write(text, name="data.csv"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


def run(argv):
    out = io.StringIO()
    code = main(argv, out=out)
    return code, out.getvalue()


class TestParsing:
    def test_labels_preserved(self, csv_file):
        data = read_study(csv_file(WORKED_CSV))
        assert data.labels == ("A", "B")

    @pytest.mark.parametrize("text, line", [
        ("group,m0,m1,m2,n0,n1\nA,9,-7,23,20,34\n", 2),
        ("group,m0,m1,m2,n0\nA,9,7,23,20\n", 1),
        ("group,m0,m1,m2,n0,n1\nA,9,7,23,20,34\nA,1,1,1,1,1\n", 3),
        ("group,m0,m1,m2,n0,n1\nA,9,7,x,20,34\n", 2),
        ("group,m0,m1,m2,n0,n1\nA,9,7,23,20\n", 2),
    ])
    def test_parse_errors(self, csv_file, text, line):
        with pytest.raises(ParseError) as info:
            read_study(csv_file(text))
        assert info.value.line == line

    def test_negative_count_exit_code(self, csv_file):
        code, _ = run(["fit", csv_file("group,m0,m1,m2,n0,n1\nA,9,-7,23,20,34\n")])
        assert code == 2

    def test_missing_file(self, tmp_path):
        assert run(["fit", str(tmp_path / "nope.csv")])[0] == 2


class TestFit:
    def test_worked_estimates(self, csv_file):
        code, out = run(["fit", csv_file(WORKED_CSV)])
        assert code == 0
        for value in ("0.6482", "1.3182", "0.5862", "0.6528", "0.6425", "1.3172", "0.5964", "0.5699"):
            assert value in out

    def test_json_round_trip(self, csv_file):
        path = csv_file(WORKED_CSV)
        code, out = run(["fit", path, "--json"])
        record = json.loads(out)
        data = read_study(path)
        for key in ("constrained", "unconstrained"):
            fit = record[key]
            ll = log_likelihood(data, ModelParams(fit["pi_hat"], fit["R_hat"]))
            assert abs(ll - fit["log_lik"]) < 1e-9

    def test_bilateral_only(self, csv_file):
        code, out = run(["fit", csv_file(RP_CSV), "--json"])
        fit = json.loads(out)["constrained"]
        assert fit["pi_hat"][0] == (37 + 2 * 87) / (2 * 216)
        assert fit["R_hat"] == 4 * 216 * 87 / (37 + 2 * 87) ** 2

    def test_unilateral_only(self, csv_file):
        code, out = run(["fit", csv_file("group,m0,m1,m2,n0,n1\nA,0,0,0,70,30\n")])
        assert code == 0 and "0.3000" in out and "not estimable" in out

    def test_numerical_failure_exit_code(self, csv_file):
        code, _ = run(["fit", csv_file("group,m0,m1,m2,n0,n1\nA,5,0,9,3,6\nB,9,6,4,8,3\n")])
        assert code == 3


class TestTest:
    def test_worked_statistics(self, csv_file):
        code, out = run(["test", csv_file(WORKED_CSV), "--method", "all"])
        assert code == 0
        rows = {line.split()[0]: line.split()[1:] for line in out.splitlines()[1:]}
        assert rows["LR"] == ["0.0394", "1", "0.8426"]
        assert rows["Wald"] == ["0.0391", "1", "0.8432"]
        assert rows["Score"] == ["0.0395", "1", "0.8424"]
        assert abs(float(rows["DonnerAdjusted"][0]) - 0.0864) < 5e-3
        assert rows["DonnerAdjusted"][2] == "0.7688"

    def test_score_json(self, csv_file):
        code, out = run(["test", csv_file(WORKED_CSV), "--method", "score", "--json"])
        record = json.loads(out)
        assert record["method"] == "Score" and round(record["p_value"], 4) == 0.8424

    def test_pair(self, csv_file):
        code, out = run(["test", csv_file(WORKED_CSV), "--method", "wald", "--pair", "A", "B", "--json"])
        wald, pair = json.loads(out)
        assert pair["pair"] == ["A", "B"]
        assert pair["statistic"] == pytest.approx(wald["statistic"], rel=1e-12)

    def test_one_group(self, csv_file, capsys):
        code, _ = run(["test", csv_file("group,m0,m1,m2,n0,n1\nA,9,7,23,20,34\n")])
        assert code == 2
        assert "need at least 2 groups" in capsys.readouterr().err

    def test_unknown_method(self, csv_file):
        assert run(["test", csv_file(WORKED_CSV), "--method", "exact"])[0] == 2


class TestSimulate:
    def test_reps_zero(self):
        assert run(["simulate", "alpha", "--pi", "0.5", "--R", "1", "--reps", "0"])[0] == 2

    def test_infeasible(self):
        assert run(["simulate", "power", "--pi", "0.3,0.8", "--R", "1.5", "--reps", "10"])[0] == 2

    def test_power_prints_seed(self):
        code, out = run(["simulate", "power", "--g", "2", "--m", "40,40", "--n", "40,40",
                         "--pi", "0.25,0.4", "--R", "1.0", "--reps", "200", "--seed", "7"])
        assert code == 0 and "seed: 7" in out

    def test_random_seed_is_reported(self):
        code, out = run(["simulate", "alpha", "--pi", "0.5", "--rho", "0.5", "--reps", "20", "--json"])
        assert isinstance(json.loads(out)["config"]["seed"], int)

    def test_sweep_rows(self, tmp_path):
        out_file = tmp_path / "sweep.csv"
        code, out = run(["simulate", "sweep", "--g", "2", "--m", "100,100", "--n", "100,100",
                         "--pairs", "5", "--reps", "50", "--seed", "1", "--out", str(out_file)])
        assert code == 0 and "seed=1" in out
        lines = out_file.read_text().splitlines()
        assert lines[0] == "pair_index,pi0,rho0,method,rejection_rate,mc_se,skipped"
        assert len(lines) == 1 + 5 * 4

    def test_thread_count_does_not_change_csv(self, tmp_path):
        texts = []
        for threads in ("1", "3"):
            path = tmp_path / f"power{threads}.csv"
            run(["simulate", "power", "--m", "20,40", "--pi", "0.25,0.4", "--R", "1.5",
                 "--reps", "1500", "--seed", "3", "--threads", threads, "--out", str(path)])
            texts.append(path.read_bytes())
        assert texts[0] == texts[1]


def test_module_entry_point(csv_file):
    proc = subprocess.run([sys.executable, "-m", "corrtest", "test", csv_file(WORKED_CSV),
                           "--method", "lr"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.0394" in proc.stdout
