import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnormreg import io


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_matrix_round_trip_is_exact(n, m, seed):
    import tempfile
    A = np.random.default_rng(seed).standard_normal((n, m)) * 10.0 ** np.random.default_rng(seed).integers(-30, 30)
    with tempfile.TemporaryDirectory() as d:
        io.write_matrix(f"{d}/A.mtx", A, comment="x")
        B = io.read_matrix(f"{d}/A.mtx")
        io.write_vector(f"{d}/b.txt", A[:, 0])
        v = io.read_vector(f"{d}/b.txt")
    assert np.array_equal(A, B) and np.array_equal(v, A[:, 0])


def test_matrix_errors(tmp_path):
    (tmp_path / "bad.mtx").write_text("not a matrix\n")
    with pytest.raises(io.InputError):
        io.read_matrix(tmp_path / "bad.mtx")
    with pytest.raises(io.InputError):
        io.read_matrix(tmp_path / "missing.mtx")
    (tmp_path / "b.txt").write_text("1.0 nan\n")
    with pytest.raises(io.InputError):
        io.read_vector(tmp_path / "b.txt")


def test_graph_reader(tmp_path):
    f = tmp_path / "g.csv"
    f.write_text("head,tail\n# comment\n0,1\n2,1,1.0\n")
    n, edges = io.read_graph(f)
    assert n == 3 and edges.tolist() == [[0, 1], [2, 1]]
    for bad in ("0,0\n", "0,1,2.5\n", "-1,0\n", "0\n", ""):
        f.write_text(bad)
        with pytest.raises(io.InputError):
            io.read_graph(f)


def test_vertex_values(tmp_path):
    f = tmp_path / "s.csv"
    io.write_vertex_values(f, [0, 3], [0.1, -2.0])
    vs, xs = io.read_vertex_values(f, 4)
    assert vs.tolist() == [0, 3] and xs.tolist() == [0.1, -2.0]
    with pytest.raises(io.InputError):
        io.read_vertex_values(f, 3)
    f.write_text("0,1\n0,2\n")
    with pytest.raises(io.InputError):
        io.read_vertex_values(f)


def test_report_encoding(tmp_path):
    rep = {"x": np.array([0.1, 1 / 3]), "ok": np.bool_(True), "n": np.int64(3), "bad": float("inf"),
           "nested": {"s": "a"}}
    path = tmp_path / "r.json"
    io.write_report(path, rep)
    back = io.read_report(path)
    assert back["x"] == [0.1, 1 / 3] and back["ok"] is True and back["n"] == 3 and back["bad"] is None
    assert json.loads(io.dumps_report({"v": 1e-300}))["v"] == 1e-300
