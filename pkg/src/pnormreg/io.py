"""Readers and writers for instances, reports and traces.

Matrices use Matrix Market, vectors plain whitespace-separated text,
graphs and vertex values CSV, reports JSON.  Every float is written with
17 significant digits so that it reads back bit-for-bit.
"""
from __future__ import annotations

import csv
import json
import math

import numpy as np
import scipy.io
import scipy.sparse as sp


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def read_matrix(path) -> np.ndarray:
    try:
        A = scipy.io.mmread(str(path))
    except Exception as exc:  # scipy raises a mix of ValueError/IndexError/OSError
        raise InputError(f"cannot read matrix {path}: {exc}") from exc
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    if np.iscomplexobj(A):
        raise InputError("complex matrices are not supported")
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise InputError("matrix has non-finite entries")
    return A


def write_matrix(path, A, comment: str = "") -> None:
    A = np.asarray(A, dtype=float)
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix array real general\n")
        if comment:
            fh.write(f"% {comment}\n")
        fh.write(f"{A.shape[0]} {A.shape[1]}\n")
        for v in A.T.ravel():  # column-major
            fh.write(fmt(v) + "\n")


def read_vector(path) -> np.ndarray:
    try:
        with open(path) as fh:
            toks = fh.read().split()
        v = np.array([float(t) for t in toks])
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read vector {path}: {exc}") from exc
    if not np.all(np.isfinite(v)):
        raise InputError("vector has non-finite entries")
    return v


def write_vector(path, v) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(fmt(x) for x in np.asarray(v, dtype=float).ravel()) + "\n")


def _csv_rows(path):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    # tolerate a header line
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
    return rows


def read_graph(path):
    """Edge list ``head,tail[,weight]``; returns ``(n_vertices, edges)``.

    Weights other than one are rejected: the objective is the unweighted
    p-norm.
    """
    edges = []
    for k, row in enumerate(_csv_rows(path)):
        if len(row) not in (2, 3):
            raise InputError(f"line {k + 1}: expected head,tail[,weight]")
        try:
            h, t = int(row[0]), int(row[1])
            w = float(row[2]) if len(row) == 3 else 1.0
        except ValueError as exc:
            raise InputError(f"line {k + 1}: {exc}") from exc
        if h < 0 or t < 0:
            raise InputError(f"line {k + 1}: negative vertex index")
        if h == t:
            raise InputError(f"line {k + 1}: self loop")
        if w != 1.0:
            raise InputError(f"line {k + 1}: weighted edges are not supported")
        edges.append((h, t))
    if not edges:
        raise InputError("empty graph")
    edges = np.array(edges, dtype=np.int64)
    return int(edges.max()) + 1, edges


def write_graph(path, edges) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for h, t in np.asarray(edges):
            w.writerow([int(h), int(t)])


def read_vertex_values(path, n_vertices: int | None = None):
    """CSV ``vertex,value`` pairs; returns ``(vertices, values)``."""
    vs, xs = [], []
    for k, row in enumerate(_csv_rows(path)):
        if len(row) != 2:
            raise InputError(f"line {k + 1}: expected vertex,value")
        try:
            vs.append(int(row[0]))
            xs.append(float(row[1]))
        except ValueError as exc:
            raise InputError(f"line {k + 1}: {exc}") from exc
    vs = np.array(vs, dtype=np.int64)
    xs = np.array(xs)
    if vs.size and (vs.min() < 0 or (n_vertices is not None and vs.max() >= n_vertices)):
        raise InputError("vertex index out of range")
    if np.unique(vs).size != vs.size:
        raise InputError("duplicate vertex")
    if not np.all(np.isfinite(xs)):
        raise InputError("non-finite value")
    return vs, xs


def write_vertex_values(path, vertices, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for v, x in zip(vertices, values):
            w.writerow([int(v), fmt(x)])


def _encode(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ", ".join(json.dumps(str(k)) + ": " + _encode(v) for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return fmt(x) if math.isfinite(x) else "null"
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def dumps_report(report: dict) -> str:
    """JSON text with 17 significant digits per float; non-finite floats become null."""
    return _encode(report) + "\n"


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_report(report))


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) if isinstance(row.get(c), (float, np.floating)) else row.get(c, "")
                        for c in columns])
