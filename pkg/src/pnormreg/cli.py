"""Command line front end.

Modes
-----
solve     ``--matrix A.mtx --rhs b.txt``: min ||x||_p subject to A x = b
flow      ``--graph g.csv --demands d.csv``: min p-norm flow
labels    ``--graph g.csv --labels s.csv``: p-Lipschitz labelling
selfcheck run a small invariant suite
generate  write a seeded random instance

Exit status is 0 on convergence, 2 on non-convergence (or a failed
self-check) and 1 on input errors.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .audit import Audit, InvariantViolation
from .gamma_core import safe_pow
from .graph_flows import GraphInstance, solve_lipschitz_labels, solve_pnorm_flow
from .mwu_residual import write_trace_csv
from .quadratic_solver import InfeasibleError
from .refinement import ProblemInstance, solve_pnorm

log = logging.getLogger("pnormreg")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
OUTER_TRACE_COLUMNS = ["iter", "objective", "kkt", "bin", "res_guaranteed", "bins_visited",
                       "bins_failed", "oracle_calls"]


@dataclass
class RunConfig:
    mode: str
    p: float = 2.0
    eps: float = 1e-4
    matrix: str | None = None
    rhs: str | None = None
    graph: str | None = None
    demands: str | None = None
    labels: str | None = None
    out: str | None = None
    trace: str | None = None
    mwu_trace: str | None = None
    strict: bool = False
    maintain: bool = False
    seed: int = 0
    kind: str = "dense"
    m: int = 30
    n: int = 5
    outdir: str = "."
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.mode in ("solve", "flow", "labels"):
            if not (1 < self.p < math.inf):
                raise io.InputError("p must lie in (1, inf)")
            if not (0 < self.eps < 1):
                raise io.InputError("eps must lie in (0, 1)")


def lp_objective(x, p: float) -> float:
    return float(np.sum(safe_pow(np.abs(np.asarray(x, dtype=float)), p)))


def _report_dict(cfg: RunConfig, x, objective, rep, audit: Audit, extra=None) -> dict:
    out = {
        "mode": cfg.mode,
        "p": cfg.p,
        "eps": cfg.eps,
        "x": [float(v) for v in x],
        "objective": objective,
        "iterations": rep.outer_iters,
        "oracle_calls": rep.oracle_calls,
        "kkt_residual": rep.kkt_residual,
        "converged": bool(rep.converged),
        "stop_reason": rep.stop_reason,
    }
    if extra:
        out.update(extra)
    if audit.enabled:
        out["audit"] = audit.summary()
    return out


def _emit(cfg: RunConfig, report: dict, rep) -> None:
    text = io.dumps_report(report)
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if cfg.trace:
        io.write_csv(cfg.trace, rep.trace, OUTER_TRACE_COLUMNS)
    if cfg.mwu_trace:
        rows = rep.mwu_trace if rep.mwu_trace else (rep.inner.mwu_trace if rep.inner is not None else [])
        write_trace_csv(rows, cfg.mwu_trace)


def _audit(cfg: RunConfig) -> Audit:
    return Audit("raise") if cfg.strict else Audit()


def run_solve(cfg: RunConfig) -> int:
    if not cfg.matrix or not cfg.rhs:
        raise io.InputError("solve needs --matrix and --rhs")
    A = io.read_matrix(cfg.matrix)
    b = io.read_vector(cfg.rhs)
    if b.size != A.shape[0]:
        raise io.InputError(f"rhs has {b.size} entries, matrix has {A.shape[0]} rows")
    inst = ProblemInstance(A, b, cfg.p, cfg.eps)
    audit = _audit(cfg)
    rep = solve_pnorm(inst, audit=audit, maintain=cfg.maintain, keep_trace=bool(cfg.mwu_trace))
    x = np.asarray(rep.x, dtype=float)
    feas = float(np.linalg.norm(A @ x - b))
    report = _report_dict(cfg, x, lp_objective(x, cfg.p), rep, audit, {"feasibility": feas})
    _emit(cfg, report, rep)
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def _read_graph(cfg: RunConfig):
    if not cfg.graph:
        raise io.InputError(f"{cfg.mode} needs --graph")
    return io.read_graph(cfg.graph)


def run_flow(cfg: RunConfig) -> int:
    n, edges = _read_graph(cfg)
    if not cfg.demands:
        raise io.InputError("flow needs --demands")
    vs, vals = io.read_vertex_values(cfg.demands)
    n = max(n, int(vs.max()) + 1 if vs.size else n)
    b = np.zeros(n)
    b[vs] = vals
    g = GraphInstance(n, edges, cfg.p, cfg.eps, b=b)
    audit = _audit(cfg)
    rep = solve_pnorm_flow(g, audit=audit)
    x = np.asarray(rep.x, dtype=float)
    cons = float(np.linalg.norm(g.A.T @ x - b))
    report = _report_dict(cfg, x, lp_objective(x, cfg.p), rep, audit, {"conservation": cons})
    _emit(cfg, report, rep)
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def run_labels(cfg: RunConfig) -> int:
    n, edges = _read_graph(cfg)
    if not cfg.labels:
        raise io.InputError("labels needs --labels")
    vs, vals = io.read_vertex_values(cfg.labels, n)
    g = GraphInstance(n, edges, cfg.p, cfg.eps, labelled=vs, s=vals)
    audit = _audit(cfg)
    u, rep = solve_lipschitz_labels(g, audit=audit)
    # the reported objective is the p-norm of the edge differences of u
    diffs = g.A @ u
    report = _report_dict(cfg, u, lp_objective(diffs, cfg.p), rep, audit,
                          {"edge_differences": [float(v) for v in diffs]})
    _emit(cfg, report, rep)
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def generate_instance(kind: str, m: int, n: int, seed: int, outdir) -> list[Path]:
    """Write a seeded random instance and return the file paths.

    ``dense``: ``A`` is ``n x m`` Gaussian, ``b = A x`` for a Gaussian ``x``.
    ``graph``: connected graph on ``n`` vertices with ``m`` edges (random
    spanning tree plus random extra edges), balanced Gaussian demands and
    two labelled vertices.
    """
    if not (m >= n >= 1):
        raise io.InputError("need m >= n >= 1")
    rng = np.random.default_rng(seed)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if kind == "dense":
        A = rng.standard_normal((n, m))
        b = A @ rng.standard_normal(m)
        pa, pb = outdir / "A.mtx", outdir / "b.txt"
        io.write_matrix(pa, A, comment=f"seed {seed}")
        io.write_vector(pb, b)
        return [pa, pb]
    if kind == "graph":
        if n < 2:
            raise io.InputError("graph instances need n >= 2")
        if m > n * (n - 1) // 2:
            raise io.InputError("too many edges for a simple graph")
        order = rng.permutation(n)
        edges, seen = [], set()
        for k in range(1, n):
            h, t = int(order[k]), int(order[rng.integers(0, k)])
            edges.append((h, t))
            seen.add(frozenset((h, t)))
        while len(edges) < m:
            h, t = (int(v) for v in rng.integers(0, n, 2))
            if h != t and frozenset((h, t)) not in seen:
                edges.append((h, t))
                seen.add(frozenset((h, t)))
        b = rng.standard_normal(n)
        b -= b.mean()
        T = rng.choice(n, size=2, replace=False)
        paths = [outdir / "graph.csv", outdir / "demands.csv", outdir / "labels.csv"]
        io.write_graph(paths[0], edges)
        io.write_vertex_values(paths[1], np.arange(n), b)
        io.write_vertex_values(paths[2], np.sort(T), [0.0, 1.0])
        return paths
    raise io.InputError(f"unknown instance kind {kind!r}")


def selfcheck(seed: int = 0) -> dict:
    """Small invariant suite; returns ``{name: bool}``."""
    from .gamma_core import GammaParams, gamma, gamma_prime, local_approx_bounds
    from .inverse_maintenance import _inv_spd, low_rank_update
    from .quadratic_solver import (ConstraintStack, enhanced_solve, solve_weighted_l2,
                                   stacked_kkt_solve)

    rng = np.random.default_rng(seed)
    res = {}
    p = rng.uniform(1.1, 16, 200)
    t = rng.uniform(0, 3, 200)
    x = rng.standard_normal(200)
    lam = rng.uniform(0.1, 10, 200)
    res["gamma_homogeneity"] = all(
        abs(gamma(pi, li * ti, li * xi) - li**pi * gamma(pi, ti, xi)) <= 1e-12 * li**pi * gamma(pi, ti, xi)
        for pi, ti, xi, li in zip(p, t, x, lam))
    ok = True
    for pi in (1.5, 3.0, 6.0):
        gp = GammaParams.from_p(pi)
        xx = rng.standard_normal(20)
        dd = rng.standard_normal(20)
        lo, hi = local_approx_bounds(gp, xx, dd)
        f1 = safe_pow(np.abs(xx + dd), pi)
        ok &= bool(np.all(lo <= f1 * (1 + 1e-12) + 1e-12) and np.all(f1 <= hi * (1 + 1e-12) + 1e-12))
        tt = np.abs(rng.standard_normal(20)) + 0.1
        h = 1e-6
        num = (gamma(pi, tt, xx + h) - gamma(pi, tt, xx - h)) / (2 * h)
        ok &= bool(np.allclose(num, gamma_prime(pi, tt, xx), rtol=1e-5, atol=1e-8))
    res["local_approx_and_derivative"] = bool(ok)
    A = rng.standard_normal((4, 12))
    r = rng.uniform(0.5, 2, 12)
    d = rng.standard_normal(4)
    st = ConstraintStack(A, d)
    D, _ = solve_weighted_l2(st, r)
    D2, _ = stacked_kkt_solve(st, r)
    res["l2_solve_vs_kkt"] = bool(np.max(np.abs(D - D2)) <= 1e-8)
    B = rng.standard_normal((12, 3))
    gvec = rng.standard_normal(12)
    f, _ = enhanced_solve(B, r, gvec, 1.0)
    f2, _ = stacked_kkt_solve(ConstraintStack(np.vstack([B.T, gvec]), np.r_[0, 0, 0, 1.0]), r)
    res["enhanced_vs_stacked"] = bool(np.max(np.abs(f - f2)) <= 1e-8)
    Ahat = rng.standard_normal((12, 4))
    Z = _inv_spd(Ahat.T @ (Ahat / r[:, None]))
    r2 = r.copy()
    r2[:3] *= 3
    Zw = low_rank_update(Ahat, Z, r, r2)
    Zf = _inv_spd(Ahat.T @ (Ahat / r2[:, None]))
    res["woodbury_vs_fresh"] = bool(np.max(np.abs(Zw - Zf)) <= 1e-8 * max(1.0, np.max(np.abs(Zf))))
    audit = Audit("record")
    A = rng.standard_normal((3, 20))
    b = A @ rng.standard_normal(20)
    rep = solve_pnorm(ProblemInstance(A, b, 3.0, 1e-6), audit=audit)
    res["solve_p3_converged"] = bool(rep.converged and np.linalg.norm(A @ rep.x - b) <= 1e-8)
    res["audit_clean"] = all(v["violations"] == 0 for k, v in audit.summary().items()
                             if k not in audit.advisory)
    tri = GraphInstance(3, [(0, 1), (2, 1), (0, 2)], 2.0, b=np.array([1.0, -1.0, 0.0]))
    res["triangle_flow"] = bool(np.allclose(solve_pnorm_flow(tri).x, [2 / 3, 1 / 3, 1 / 3],
                                            atol=1e-10))
    path = GraphInstance(3, [(0, 1), (1, 2)], 2.0, labelled=np.array([0, 2]), s=np.array([0.0, 1.0]))
    res["path_labelling"] = bool(abs(solve_lipschitz_labels(path)[0][1] - 0.5) <= 1e-10)
    return res


def run_selfcheck(cfg: RunConfig) -> int:
    res = selfcheck(cfg.seed)
    for name, ok in res.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if cfg.out:
        io.write_report(cfg.out, {"mode": "selfcheck", "checks": res})
    return EXIT_OK if all(res.values()) else EXIT_NOT_CONVERGED


def run_generate(cfg: RunConfig) -> int:
    for path in generate_instance(cfg.kind, cfg.m, cfg.n, cfg.seed, cfg.outdir):
        print(path)
    return EXIT_OK


def run(cfg: RunConfig) -> int:
    """Dispatch one run and map failures to exit codes."""
    handlers = {"solve": run_solve, "flow": run_flow, "labels": run_labels,
                "selfcheck": run_selfcheck, "generate": run_generate}
    try:
        cfg.validate()
        return handlers[cfg.mode](cfg)
    except (io.InputError, InfeasibleError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pnormreg", description="High-accuracy p-norm regression and flows.")
    sub = ap.add_subparsers(dest="mode", required=True)

    def common(sp_):
        sp_.add_argument("--p", type=float, default=2.0)
        sp_.add_argument("--eps", type=float, default=1e-4)
        sp_.add_argument("--out", help="report path (JSON); stdout if omitted")
        sp_.add_argument("--trace", help="per-iteration trace CSV")
        sp_.add_argument("--mwu-trace", dest="mwu_trace", help="MWU step trace CSV")
        sp_.add_argument("--strict", action="store_true",
                         help="raise on invariant violations (also PNORMREG_STRICT=raise)")

    s = sub.add_parser("solve", help="min ||x||_p s.t. A x = b")
    s.add_argument("--matrix", required=True)
    s.add_argument("--rhs", required=True)
    s.add_argument("--maintain", action=argparse.BooleanOptionalAction, default=False,
                   help="lazy inverse maintenance in the MWU solver")
    common(s)
    f = sub.add_parser("flow", help="minimum p-norm flow")
    f.add_argument("--graph", required=True)
    f.add_argument("--demands", required=True)
    common(f)
    lb = sub.add_parser("labels", help="p-Lipschitz labelling")
    lb.add_argument("--graph", required=True)
    lb.add_argument("--labels", required=True)
    common(lb)
    c = sub.add_parser("selfcheck", help="run the invariant suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    g = sub.add_parser("generate", help="write a random instance")
    g.add_argument("--kind", choices=["dense", "graph"], default="dense")
    g.add_argument("--m", type=int, default=30)
    g.add_argument("--n", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--outdir", default=".")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PNORMREG_LOGLEVEL", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    cfg = RunConfig(**{k: v for k, v in vars(args).items() if v is not None})
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
