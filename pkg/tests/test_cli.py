import subprocess
import sys

import numpy as np
import pytest

from _oracle import pnorm_oracle
from pnormreg import cli, io
from pnormreg.audit import InvariantViolation


def run(args):
    return cli.main([str(a) for a in args])


def test_identity_solve(tmp_path):
    b = np.array([1.0, -2.0, 0.5])
    io.write_matrix(tmp_path / "A.mtx", np.eye(3))
    io.write_vector(tmp_path / "b.txt", b)
    out = tmp_path / "r.json"
    assert run(["solve", "--matrix", tmp_path / "A.mtx", "--rhs", tmp_path / "b.txt", "--p", 4, "--out", out]) == 0
    rep = io.read_report(out)
    assert np.allclose(rep["x"], b) and rep["converged"]


def test_square_full_rank_unique(tmp_path):
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 4))
    b = rng.standard_normal(4)
    io.write_matrix(tmp_path / "A.mtx", A)
    io.write_vector(tmp_path / "b.txt", b)
    out = tmp_path / "r.json"
    assert run(["solve", "--matrix", tmp_path / "A.mtx", "--rhs", tmp_path / "b.txt", "--p", 3, "--out", out]) == 0
    assert np.allclose(io.read_report(out)["x"], np.linalg.solve(A, b), atol=1e-10)


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_generated_instance_against_oracle(tmp_path, p):
    cli.generate_instance("dense", 30, 5, 0, tmp_path)
    out = tmp_path / "r.json"
    eps = 1e-4
    code = run(["solve", "--matrix", tmp_path / "A.mtx", "--rhs", tmp_path / "b.txt", "--p", p, "--eps", eps,
                "--out", out, "--trace", tmp_path / "t.csv", "--mwu-trace", tmp_path / "m.csv"])
    assert code == 0
    rep = io.read_report(out)
    A, b = io.read_matrix(tmp_path / "A.mtx"), io.read_vector(tmp_path / "b.txt")
    fo = float(np.sum(np.abs(pnorm_oracle(A, b, p)) ** p))
    assert rep["objective"] <= (1 + eps) * fo
    x = np.array(rep["x"])
    # the report round-trips the objective to the last bit
    assert abs(cli.lp_objective(x, p) - rep["objective"]) <= 1e-15 * rep["objective"]
    assert (tmp_path / "t.csv").read_text().startswith("iter,objective")


def test_triangle_flow(tmp_path):
    io.write_graph(tmp_path / "g.csv", [(0, 1), (2, 1), (0, 2)])
    io.write_vertex_values(tmp_path / "d.csv", [0, 1], [1.0, -1.0])
    out = tmp_path / "r.json"
    assert run(["flow", "--graph", tmp_path / "g.csv", "--demands", tmp_path / "d.csv", "--out", out]) == 0
    rep = io.read_report(out)
    assert np.allclose(rep["x"], [2 / 3, 1 / 3, 1 / 3], atol=1e-10) and rep["conservation"] <= 1e-12


def test_generated_graph_labels(tmp_path):
    cli.generate_instance("graph", 20, 8, 1, tmp_path)
    out = tmp_path / "r.json"
    assert run(["labels", "--graph", tmp_path / "graph.csv", "--labels", tmp_path / "labels.csv",
                "--p", 3, "--out", out]) == 0
    rep = io.read_report(out)
    assert len(rep["x"]) == 8 and len(rep["edge_differences"]) == 20
    assert run(["flow", "--graph", tmp_path / "graph.csv", "--demands", tmp_path / "demands.csv",
                "--p", 1.5, "--out", out]) == 0


def test_generate_is_deterministic(tmp_path):
    for kind in ("dense", "graph"):
        a = cli.generate_instance(kind, 20, 8, 11, tmp_path / "a")
        b = cli.generate_instance(kind, 20, 8, 11, tmp_path / "b")
        assert all(pa.read_bytes() == pb.read_bytes() for pa, pb in zip(a, b))


def test_selfcheck_passes(capsys):
    assert run(["selfcheck"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_input_error_exit_code(tmp_path, capsys):
    assert run(["solve", "--matrix", tmp_path / "none.mtx", "--rhs", tmp_path / "none.txt"]) == 1
    io.write_matrix(tmp_path / "A.mtx", np.eye(2))
    io.write_vector(tmp_path / "b.txt", [1.0, 2.0, 3.0])
    assert run(["solve", "--matrix", tmp_path / "A.mtx", "--rhs", tmp_path / "b.txt"]) == 1
    io.write_vector(tmp_path / "b.txt", [1.0, 2.0])
    assert run(["solve", "--matrix", tmp_path / "A.mtx", "--rhs", tmp_path / "b.txt", "--p", 1.0]) == 1
    assert run(["generate", "--m", 2, "--n", 5, "--outdir", tmp_path]) == 1


def test_invariant_violation_exit_code(tmp_path, monkeypatch):
    io.write_matrix(tmp_path / "A.mtx", np.eye(2))
    io.write_vector(tmp_path / "b.txt", [1.0, 2.0])

    def boom(*a, **k):
        raise InvariantViolation("forced")

    monkeypatch.setattr(cli, "solve_pnorm", boom)
    assert run(["solve", "--matrix", tmp_path / "A.mtx", "--rhs", tmp_path / "b.txt", "--strict"]) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pnormreg", "generate", "--outdir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and (tmp_path / "A.mtx").exists()
