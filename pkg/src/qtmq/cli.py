"""Command-line front end: ``qtmq {spectrum,solve,verify,thermo,symmetry}``.

Exit codes: 0 all checks pass, 1 failure (including usage errors),
2 reportable finding (for example the largest eigenvalue not reproduced).
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime
import io
import json
import logging
import math
import os
import sys
import tempfile
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import thermo as TH
from . import transfer as T
from . import verify as V
from . import wronskian as W
from .errors import QTMError, UnmatchedLargest
from .params import ModelParams

SCHEMA_VERSION = 1
EXIT_PASS, EXIT_FAIL, EXIT_FINDING = 0, 1, 2
COMMANDS = ("spectrum", "solve", "verify", "thermo", "symmetry")
RELATION_CHOICES = ("wronskian_identity", "bethe", "tq", "fusion_q", "fusion_hierarchy", "factorization",
                    "qq_root_of_unity", "spectrum_match", "aba_qminus", "loop", "loop_symmetry",
                    "operator_identities", "all")

log = logging.getLogger("qtmq")


class UsageError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    command: str
    params: Dict
    starts: int = 4096
    seed: int = 0
    tol: float = 1e-10
    z: complex = 1.0
    out: Optional[str] = None
    format: str = "json"
    jobs: int = 1
    relation: Optional[str] = None
    sector: int = 0
    n_list: tuple = (4, 6, 8, 10, 12)
    verbosity: int = 0

    def model(self) -> ModelParams:
        return ModelParams(**self.params)

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["z"] = [self.z.real, self.z.imag]
        d["n_list"] = list(self.n_list)
        d.pop("out")
        return d


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--n", type=int, default=4, help="Trotter number N (even)")
    p.add_argument("--gamma", type=float, default=None, help="anisotropy angle in radians (default pi/5, or 2 pi/ell)")
    p.add_argument("--beta", type=float, default=1.0, help="inverse temperature")
    p.add_argument("--field", type=float, default=0.4, help="magnetic field h")
    p.add_argument("--z-re", type=float, default=1.0)
    p.add_argument("--z-im", type=float, default=0.0)
    p.add_argument("--ell", type=int, default=None, help="root-of-unity order (q^ell = 1)")
    p.add_argument("--out", default=None, help="output path (stdout if omitted)")
    p.add_argument("--format", default=None, choices=("json", "csv", "bin"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--starts", type=int, default=4096)
    p.add_argument("--tol", type=float, default=1e-10, help="solver residual tolerance")
    p.add_argument("--sector", type=int, default=0, help="S_A sector (solve: full system when nonzero)")
    p.add_argument("--n-list", default="4,6,8,10,12", help="Trotter numbers for thermo")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qtmq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "verify":
            p.add_argument("--relation", required=True, choices=RELATION_CHOICES)
    return parser


def parse_args(argv: Sequence[str]) -> RunConfig:
    ns = build_parser().parse_args(list(argv))
    if ns.n < 2 or ns.n % 2:
        raise UsageError(f"--n {ns.n}: Trotter number must be even and >= 2")
    if ns.beta <= 0:
        raise UsageError(f"--beta {ns.beta}: inverse temperature must be positive")
    if ns.starts < 1 or ns.jobs < 1:
        raise UsageError("--starts and --jobs must be positive")
    gamma = ns.gamma
    if ns.ell is not None:
        if ns.ell < 3:
            raise UsageError(f"--ell {ns.ell}: order must be >= 3")
        if gamma is None:
            gamma = 2 * math.pi / ns.ell
        elif abs(np.exp(1j * gamma * ns.ell) - 1) > 1e-10:
            raise UsageError(f"--ell {ns.ell} conflicts with --gamma {gamma}: q^ell != 1")
    if gamma is None:
        gamma = math.pi / 5
    relation = getattr(ns, "relation", None)
    if relation in ("loop", "loop_symmetry") or ns.command == "symmetry":
        if ns.field != 0:
            raise UsageError(f"--field {ns.field}: loop check requires zero field")
        if ns.ell is None:
            raise UsageError("--ell is required for the loop symmetry check")
    if relation in ("factorization", "qq_root_of_unity") and ns.ell is None:
        raise UsageError(f"--ell is required for --relation {relation}")
    try:
        n_list = tuple(int(x) for x in ns.n_list.split(","))
    except ValueError:
        raise UsageError(f"--n-list {ns.n_list!r}: expected comma-separated integers")
    fmt = ns.format or ("csv" if ns.command == "thermo" else "json")
    if fmt == "bin" and ns.command != "spectrum":
        raise UsageError("--format bin is only available for spectrum")
    if fmt == "bin" and ns.out is None:
        raise UsageError("--format bin needs --out")
    params = {"N": ns.n, "gamma": gamma, "beta": ns.beta, "h": ns.field, "ell": ns.ell}
    try:
        ModelParams(**params)
    except QTMError as exc:
        raise UsageError(f"invalid parameters: {exc}")
    return RunConfig(ns.command, params, ns.starts, ns.seed, ns.tol, complex(ns.z_re, ns.z_im), ns.out, fmt,
                     ns.jobs, "loop_symmetry" if relation == "loop" else relation, ns.sector, n_list, ns.verbose)


# ---------------------------------------------------------------------------
# serialization


def cplx(z) -> List[float]:
    z = complex(z)
    return [z.real, z.imag]


def cplx_list(a) -> List[List[float]]:
    return [cplx(v) for v in np.asarray(a).ravel()]


def solution_to_dict(sol: W.WronskianSolution) -> Dict:
    return {"sector": sol.sector, "e_plus": cplx_list(sol.e_plus.coeffs), "e_minus": cplx_list(sol.e_minus.coeffs),
            "residual": sol.residual_full, "flags": dict(sol.flags),
            "matched_lambda": None if sol.matched_lambda is None else cplx(sol.matched_lambda),
            "provenance": sol.provenance}


def solution_from_dict(d: Dict, params: ModelParams) -> W.WronskianSolution:
    ep = np.array([complex(*v) for v in d["e_plus"]])
    em = np.array([complex(*v) for v in d["e_minus"]])
    return W.make_solution(params, ep, em, d["sector"], d.get("provenance"))


def envelope(kind: str, config: RunConfig, payload: Dict) -> Dict:
    return {"schema": f"qtmq/{kind}", "version": SCHEMA_VERSION, "config": config.to_dict(),
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(), **payload}


def atomic_write(path: str, data, binary: bool = False) -> None:
    """Write to a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".qtmq-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb" if binary else "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(config: RunConfig, text: str) -> None:
    if config.out is None:
        sys.stdout.write(text)
    else:
        atomic_write(config.out, text)


def dumps(doc: Dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# commands


def solve_special(params: ModelParams, config: RunConfig) -> W.SolutionSet:
    system = W.assemble_reduced_system(params)
    return W.solve_multistart(system, W.SolverConfig(n_starts=config.starts, seed=config.seed, tol=config.tol),
                              jobs=config.jobs)


def cmd_spectrum(config: RunConfig) -> int:
    params = config.model()
    op = T.build_qtm(config.z, params)
    if config.format == "bin":
        T.dump_dense(op, config.out + ".tmp-dump", config.z, params)
        os.replace(config.out + ".tmp-dump", config.out)
        return EXIT_PASS
    rec = T.eig(op, keep_vectors=False)
    if config.format == "csv":
        buf = io.StringIO()
        buf.write("index,sector,re,im,residual\n")
        for i, (lam, s, r) in enumerate(zip(rec.eigenvalues, rec.sectors, rec.residuals)):
            buf.write(f"{i},{int(s)},{float(lam.real)!r},{float(lam.imag)!r},{float(r)!r}\n")
        emit(config, buf.getvalue())
    else:
        emit(config, dumps(envelope("spectrum", config, {
            "params": params.to_dict(), "z": cplx(config.z), "eigenvalues": cplx_list(rec.eigenvalues),
            "sectors": [int(s) for s in rec.sectors], "residuals": [float(r) for r in rec.residuals]})))
    return EXIT_PASS


def cmd_solve(config: RunConfig) -> int:
    params = config.model()
    if config.sector == 0:
        sols = solve_special(params, config)
    else:
        system = W.assemble_full_system(params, config.sector)
        sols = W.solve_multistart(system, W.SolverConfig(n_starts=config.starts, seed=config.seed, tol=config.tol),
                                  jobs=config.jobs)
    payload = {"params": params.to_dict(), "n_solutions": len(sols), "n_starts": sols.n_starts,
               "failures": sols.failures, "degree_drops": sols.degree_drops,
               "solutions": [solution_to_dict(s) for s in sols]}
    if config.format == "csv":
        raise UsageError("solve writes JSON only")
    emit(config, dumps(envelope("solve", config, payload)))
    return EXIT_PASS


def _relation_reports(relation: str, params: ModelParams, config: RunConfig):
    """Reports for one relation id; returns ``(reports, solutions or None)``."""
    z = config.z
    needs_solutions = relation in ("wronskian_identity", "bethe", "tq", "fusion_q", "spectrum_match", "aba_qminus")
    sols = solve_special(params, config) if needs_solutions else None
    reports = []
    if relation == "wronskian_identity":
        reports = [V.wronskian_identity_residual(s, params) for s in sols]
    elif relation == "bethe":
        reports = [V.bethe_residual(s.e_plus, params) for s in sols]
    elif relation == "tq":
        reports = [V.tq_residual(s.e_plus, V.matched_tau1(s, params), params) for s in sols]
    elif relation == "fusion_q":
        reports = [V.fusion_q_residual(s, d, params) for s in sols for d in (2, 3)]
    elif relation == "spectrum_match":
        spec = T.eig(T.build_qtm(z, params), sector=0, keep_vectors=False)
        reports = [V.spectrum_match(sols, spec, z, params)]
    elif relation == "aba_qminus":
        reports = [V.aba_qminus_check(s.e_plus, s.e_minus, params) for s in sols]
    elif relation == "fusion_hierarchy":
        reports = [V.fusion_hierarchy_residual(params, z, d) for d in (2, 3)]
    elif relation == "operator_identities":
        reports = [V.operator_identities(params)]
    elif relation == "factorization":
        reports = [V.factorization_residual(params, s) for s in T.sectors(params.N)]
    elif relation == "qq_root_of_unity":
        reports = [V.qq_relation_residual(params, 0.7 + 0.3j, 0.5, 1.3)]
    elif relation == "loop_symmetry":
        reports = [V.loop_symmetry_report(params, z, s) for s in T.sectors(params.N) if (2 * s) % params.ell == 0]
    return reports, sols


def cmd_verify(config: RunConfig) -> int:
    params = config.model()
    if config.relation == "all":
        relations = ["operator_identities", "wronskian_identity", "bethe", "tq", "fusion_q", "spectrum_match"]
        if params.ell is not None:
            relations += ["factorization", "qq_root_of_unity"]
    else:
        relations = [config.relation]
    reports, sols, finding = [], None, None
    for rel in relations:
        try:
            reps, s = _relation_reports(rel, params, config)
        except UnmatchedLargest as exc:
            finding = str(exc)
            reps, s = ([exc.report] if exc.report is not None else []), None
        reports += reps
        sols = s if s is not None else sols
    payload = {"params": params.to_dict(), "reports": [r.to_dict() for r in reports],
               "finding": finding, "all_passed": all(r.passed for r in reports)}
    if sols is not None:
        payload["solutions"] = [solution_to_dict(s) for s in sols]
    emit(config, dumps(envelope("verify", config, payload)))
    if finding:
        return EXIT_FINDING
    return EXIT_PASS if payload["all_passed"] else EXIT_FAIL


def cmd_thermo(config: RunConfig) -> int:
    params = config.model()
    point = TH.free_energy(params, config.n_list)
    if config.format == "csv":
        buf = io.StringIO()
        TH.write_csv(point, buf)
        emit(config, buf.getvalue())
    else:
        rows = TH.thermo_rows(point)
        emit(config, dumps(envelope("thermo", config, {
            "params": params.to_dict(), "columns": list(TH.THERMO_COLUMNS), "rows": rows,
            "f_extrapolated": point.f_extrapolated, "fit_diagnostics": point.fit_diagnostics})))
    return EXIT_PASS


def cmd_symmetry(config: RunConfig) -> int:
    params = config.model()
    reports = []
    for gen in ("E1", "F1", "E0", "F0"):
        for s in T.sectors(params.N):
            reports.append(V.loop_symmetry_report(params, config.z, s, generator=gen))
    commensurate = [r for r in reports if r.details["commensurate"]]
    ok = all(r.passed and r.details["monotone"] for r in commensurate)
    emit(config, dumps(envelope("symmetry", config, {
        "params": params.to_dict(), "reports": [r.to_dict() for r in reports], "all_passed": ok})))
    return EXIT_PASS if ok else EXIT_FAIL


HANDLERS = {"spectrum": cmd_spectrum, "solve": cmd_solve, "verify": cmd_verify, "thermo": cmd_thermo,
            "symmetry": cmd_symmetry}


def run(config: RunConfig) -> int:
    return HANDLERS[config.command](config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        config = parse_args(argv)
    except UsageError as exc:
        print(f"qtmq: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    logging.basicConfig(level=logging.WARNING - 10 * min(config.verbosity, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(config)
    except UsageError as exc:
        print(f"qtmq: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except QTMError as exc:
        print(f"qtmq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
