import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from ebsde_chain.chain_core import path_matrix
from ebsde_chain.cli import EXIT_INVALID, EXIT_OK, EXIT_UNVERIFIED, main, spec_hash
from ebsde_chain.reference_table import ROWS

from conftest import dominated_matrix


@pytest.fixture
def files(tmp_path):
    A = path_matrix()

    def write(name, obj):
        p = tmp_path / name
        p.write_text(json.dumps(obj))
        return str(p)

    B = dominated_matrix(A, 0.3, np.random.default_rng(0))
    return {
        "dir": tmp_path,
        "chain": write("chain.json", {"n": 4, "rates": A.rates.tolist()}),
        "target": write("target.json", {"n": 4, "rates": B.rates.tolist()}),
        "e2": write("e2.json", {"type": "rate_uncertainty", "zeta": [1], "beta": 2.0}),
        "zero": write("zero.json", {"type": "zero"}),
        "bad_key": write("bad.json", {"type": "rate_uncertainty", "zeta": [1], "beta": 2.0, "bogus": 1}),
        "malformed": write("malformed.json", {}) and str(tmp_path / "malformed.json"),
        "write": write,
    }


def _run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_solve_table_row(files, capsys):
    code, out, _ = _run(["solve", "--chain", files["chain"], "--driver", files["e2"]], capsys)
    assert code == EXIT_OK
    res = json.loads(out)
    _, v, lam, _ = ROWS[2]
    assert abs(res["lambda"] - lam) <= 5e-4
    assert np.abs(np.array(res["v"]) - v).max() <= 5e-4
    assert res["verification"]["passed"]
    assert res["tool"] == "ebsde-chain" and len(res["spec_hash"]) == 64


def test_solve_zero_driver(files, capsys):
    out_path = files["dir"] / "sol.json"
    code, _, _ = _run(["solve", "--chain", files["chain"], "--driver", files["zero"], "--method", "vanishing",
                       "--normalize", "anchor:1", "--out", str(out_path)], capsys)
    res = json.loads(out_path.read_text())
    assert code == EXIT_OK and res["lambda"] == 0.0 and res["v"][1] == 0.0


def test_solve_deterministic_output(files, capsys):
    a = files["dir"] / "a.json"
    b = files["dir"] / "b.json"
    for p in (a, b):
        main(["solve", "--chain", files["chain"], "--driver", files["e2"], "--out", str(p)])
    assert a.read_bytes() == b.read_bytes()


def test_twelve_significant_digits(files, capsys):
    _, out, _ = _run(["solve", "--chain", files["chain"], "--driver", files["e2"]], capsys)
    lam = json.loads(out)["lambda"]
    assert len(repr(lam).replace("0.", "").lstrip("0")) <= 12


def test_unknown_key_exit_2(files, capsys):
    code, _, err = _run(["solve", "--chain", files["chain"], "--driver", files["bad_key"]], capsys)
    assert code == EXIT_INVALID
    assert "bogus" in err


def test_malformed_json_exit_2(files, capsys):
    (files["dir"] / "malformed.json").write_text('{"type": "zero",')
    code, _, err = _run(["solve", "--chain", files["chain"], "--driver", str(files["dir"] / "malformed.json")],
                        capsys)
    assert code == EXIT_INVALID and "malformed JSON" in err


def test_invalid_value_pointer(files, capsys):
    bad = files["write"]("badchain.json", {"rates": [[-1, 1], [1, "x"]]})
    code, _, err = _run(["diagnose", "--chain", bad], capsys)
    assert code == EXIT_INVALID and "/rates/1/1" in err


def test_column_sum_error_exit_2(files, capsys):
    bad = files["write"]("eye.json", {"rates": [[1, 0], [0, 1]]})
    code, _, _ = _run(["diagnose", "--chain", bad], capsys)
    assert code == EXIT_INVALID


def test_missing_file_exit_2(files, capsys):
    code, _, _ = _run(["diagnose", "--chain", str(files["dir"] / "nope.json")], capsys)
    assert code == EXIT_INVALID


def test_discounted(files, capsys):
    code, out, _ = _run(["discounted", "--chain", files["chain"], "--driver", files["e2"], "--alpha", "0.5",
                         "--horizon", "10"], capsys)
    res = json.loads(out)
    assert code == EXIT_OK and res["bound_ok"] and res["horizon"]["bound_ok"]
    assert res["horizon"]["gap"] <= np.exp(-5) / 0.5


def test_table51(files, capsys):
    code, out, err = _run(["table51"], capsys)
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 10
    assert rows[0]["zeta"] == "{}" and float(rows[0]["lambda"]) == 0.0
    assert all(float(rows[0][f"v_e{i}"]) == 0.0 for i in range(1, 5))
    assert rows[-1]["zeta"] == "{e1,e2,e3,e4}" and float(rows[-1]["lambda"]) == pytest.approx(1.0, abs=1e-12)
    assert max(float(r["deviation"]) for r in rows) <= 5e-4
    for r, (_, _, _, pi_zeta) in zip(rows, ROWS):
        assert abs(float(r["pi_zeta"]) - pi_zeta) <= 1e-10
    assert "max deviation" in err


def test_table51_other_beta_not_compared(files, capsys):
    code, out, err = _run(["table51", "--beta", "1.0"], capsys)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == EXIT_OK and err == ""
    for r, (_, _, _, pi_zeta) in zip(rows, ROWS):
        assert float(r["lambda"]) == pytest.approx(pi_zeta, abs=1e-10)


def test_control(files, capsys):
    from ebsde_chain.control import random_control_problem

    P = random_control_problem(4, 3, np.random.default_rng(1))
    prob = files["write"]("mdp.json", {"states": 4, "controls": ["a", "b", "c"],
                                       "reference": P.reference.rates.tolist(),
                                       "rate_matrices": [M.rates.tolist() for M in P.rate_matrices],
                                       "cost": P.cost.tolist(), "gamma": P.gamma})
    code, out, _ = _run(["control", "--problem", prob, "--brute-force-check"], capsys)
    res = json.loads(out)
    assert code == EXIT_OK and res["brute_force"]["agrees"]
    assert abs(res["policy_value"] - res["lambda"]) <= 1e-8
    code, out, _ = _run(["control", "--problem", prob, "--robust", "--brute-force-check"], capsys)
    res2 = json.loads(out)
    assert code == EXIT_OK and res2["robust"] and res2["lambda"] == pytest.approx(res["lambda"], abs=1e-10)


def test_simulate(files, capsys):
    csv_path = files["dir"] / "traj.csv"
    code, out, _ = _run(["simulate", "--chain", files["chain"], "--horizon", "50", "--samples", "3",
                         "--seed", "7", "--csv", str(csv_path)], capsys)
    res = json.loads(out)
    assert code == EXIT_OK and res["jumps"] > 0
    assert abs(sum(res["occupation"]) - 1) <= 1e-9
    header = csv_path.read_text().splitlines()[0]
    assert header == "path,time,state"


def test_couple(files, capsys):
    code, out, _ = _run(["couple", "--chain", files["chain"], "--x", "0", "--y", "3", "--samples", "1000"],
                        capsys)
    res = json.loads(out)
    assert code == EXIT_OK and res["tail_rate"] > 0 and res["mean_meeting_time"] > 0


def test_couple_same_state_exit_2(files, capsys):
    code, _, _ = _run(["couple", "--chain", files["chain"], "--x", "1", "--y", "1"], capsys)
    assert code == EXIT_INVALID


def test_split(files, capsys):
    code, out, _ = _run(["split", "--chain", files["chain"], "--target", files["target"], "--gamma", "0.3",
                         "--horizon", "2000", "--seed", "1"], capsys)
    res = json.loads(out)
    assert code == EXIT_OK and res["literal"] is False
    assert abs(res["layer1_occupation"] - 0.3) <= 0.03


def test_split_not_controlled_exit_2(files, capsys):
    code, _, err = _run(["split", "--chain", files["target"], "--target", files["chain"], "--gamma", "0.9",
                         "--horizon", "10"], capsys)
    assert code == EXIT_INVALID and "controlled" in err


def test_diagnose(files, capsys):
    code, out, _ = _run(["diagnose", "--chain", files["chain"], "--driver", files["e2"]], capsys)
    res = json.loads(out)
    assert code == EXIT_OK and res["irreducible"]
    assert res["balance"]["class"] == "strictly balanced"
    assert np.allclose(res["stationary"], [0.125, 0.375, 0.375, 0.125])


def test_threads_env(files, capsys, monkeypatch):
    monkeypatch.setenv("EBSDE_THREADS", "1")
    assert main(["diagnose", "--chain", files["chain"]]) == EXIT_OK
    monkeypatch.setenv("EBSDE_THREADS", "zero")
    assert main(["diagnose", "--chain", files["chain"]]) == EXIT_INVALID


def test_argparse_error_is_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve"])
    assert exc.value.code == 2


def test_spec_hash_stable():
    assert spec_hash({"a": 1, "b": [1, 2]}) == spec_hash({"b": [1, 2], "a": 1})
    assert spec_hash({"a": 1}) != spec_hash({"a": 2})


def test_unverified_exit_code_constant():
    assert EXIT_UNVERIFIED == 4


def test_console_script(files):
    proc = subprocess.run([sys.executable, "-m", "ebsde_chain.cli", "diagnose", "--chain", files["chain"]],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["n"] == 4
