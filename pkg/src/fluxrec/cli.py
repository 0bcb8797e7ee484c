"""Command-line entry point: one binary, one subcommand per module.

Exit codes: 0 success, 1 domain/numerical failure, 2 IO/schema/usage
errors.  Every run writes a JSON manifest next to its outputs with
input/output digests, resolved config, seeds and runtime; all CSV
output is byte-stable for fixed inputs and seeds.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .config import SCHEMAS, parse_config, resolve_field
from .errors import FluxRecError, MalformedFileError
from .fem import BoundaryVector, FactorizedSystem, ProblemData, trace
from .geometry import (
    GAMMA_A,
    GAMMA_I,
    boundary_map,
    generate_annulus_mesh,
    load_mesh,
    refine_uniform,
    save_mesh,
)
from .inversion import add_noise, build_forward_operator, choose_rho_discrepancy, tikhonov_solve
from .manifest import RunManifest
from .rates import ExperimentConfig, emit_report, run_rate_study
from .spectral import build_spectral_basis, synthesize_flux_with_smoothness
from .stability import fit_stability_modulus, generate_probe_ensemble
from .vsc import check_vsc_inequality, fit_vsc_constants, sample_admissible_fluxes

TRACE_CSV_HEADER = "vertex_index,arc_coord,value"


def _fmt(x) -> str:
    return repr(float(x))


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_boundary_csv(path, mesh, vector: BoundaryVector) -> None:
    bmap = boundary_map(mesh, vector.tag)
    lines = [TRACE_CSV_HEADER]
    for idx, arc, val in zip(bmap.vertex_indices, bmap.arc_coords, vector.values):
        lines.append(f"{idx},{_fmt(arc)},{_fmt(val)}")
    _write_lines(path, lines)


def read_boundary_csv(path, mesh, tag) -> BoundaryVector:
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0] != TRACE_CSV_HEADER:
        raise MalformedFileError(f"bad header in {path}", 1)
    n = len(boundary_map(mesh, tag))
    if len(raw) - 1 != n:
        raise MalformedFileError(f"{path} has {len(raw) - 1} records, expected {n}")
    values = np.empty(n)
    for ln, line in enumerate(raw[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise MalformedFileError(f"expected 3 fields, got {len(parts)}", ln)
        try:
            values[ln - 2] = float(parts[2])
        except ValueError:
            raise MalformedFileError(f"malformed record {line!r}", ln) from None
    return BoundaryVector(tag, values)


def _problem_data(mesh, cfg) -> ProblemData:
    n_v = mesh.n_vertices
    n_a = len(boundary_map(mesh, GAMMA_A))
    return ProblemData(
        resolve_field(cfg["alpha"], n_v, "alpha"),
        resolve_field(cfg["k"], n_a, "k"),
        resolve_field(cfg["f"], n_v, "f"),
        resolve_field(cfg["u_a"], n_a, "u_a"),
    )


def _finish_manifest(manifest: RunManifest, outputs, manifest_path, t0) -> None:
    for p in outputs:
        manifest.add_output(p)
    manifest.version = __version__
    manifest.runtime_seconds = time.time() - t0
    manifest.write(manifest_path)


def cmd_mesh_gen(args) -> int:
    t0 = time.time()
    mesh = generate_annulus_mesh(args.r_inner, args.r_outer, args.h)
    for _ in range(args.refine):
        mesh = refine_uniform(mesh)
    save_mesh(mesh, args.out)
    manifest = RunManifest("mesh-gen", {
        "r_inner": args.r_inner, "r_outer": args.r_outer,
        "h": args.h, "refine": args.refine}, seeds=[])
    _finish_manifest(manifest, [args.out], args.out + ".manifest.json", t0)
    return 0


def cmd_forward(args) -> int:
    t0 = time.time()
    cfg = parse_config(args.config, SCHEMAS["forward"])
    mesh = load_mesh(args.mesh)
    data = _problem_data(mesh, cfg)
    flux = read_boundary_csv(args.flux, mesh, GAMMA_I)
    u = FactorizedSystem(mesh, data).solve_flux(flux)
    write_boundary_csv(args.out_trace, mesh, trace(u, GAMMA_A))
    manifest = RunManifest("forward", cfg, seeds=[])
    manifest.add_input(args.mesh)
    manifest.add_input(args.flux)
    if args.config:
        manifest.add_input(args.config)
    _finish_manifest(manifest, [args.out_trace], args.out_trace + ".manifest.json", t0)
    return 0


def cmd_spectrum(args) -> int:
    t0 = time.time()
    mesh = load_mesh(args.mesh)
    basis = build_spectral_basis(mesh)
    lines = ["n,lambda"]
    lines.extend(f"{n + 1},{_fmt(lam)}" for n, lam in enumerate(basis.eigenvalues))
    _write_lines(args.out, lines)
    manifest = RunManifest("spectrum", {}, seeds=[])
    manifest.add_input(args.mesh)
    _finish_manifest(manifest, [args.out], args.out + ".manifest.json", t0)
    return 0


def cmd_invert(args) -> int:
    t0 = time.time()
    cfg = parse_config(args.config, SCHEMAS["invert"])
    mesh = load_mesh(args.mesh)
    data = _problem_data(mesh, cfg)
    op = build_forward_operator(mesh, data)
    u_clean = read_boundary_csv(args.data_trace, mesh, GAMMA_A)
    u_delta = add_noise(mesh, u_clean, args.delta, args.seed)
    if args.rho is not None:
        rho = args.rho
    else:
        rho = choose_rho_discrepancy(op, u_delta, args.delta, cfg["tau_d"])
    result = tikhonov_solve(op, u_delta, rho)

    os.makedirs(args.out, exist_ok=True)
    result_path = os.path.join(args.out, "invert_result.csv")
    _write_lines(result_path, [
        "rho,residual_norm,solution_norm,iterations",
        ",".join([_fmt(result.rho), _fmt(result.residual_norm),
                  _fmt(result.solution_norm), str(result.iterations)]),
    ])
    flux_path = os.path.join(args.out, "flux_rec.csv")
    write_boundary_csv(flux_path, mesh, result.q_rec)
    manifest = RunManifest("invert", {**cfg, "delta": args.delta, "rho_flag": args.rho},
                           seeds=[args.seed])
    manifest.add_input(args.mesh)
    manifest.add_input(args.data_trace)
    if args.config:
        manifest.add_input(args.config)
    _finish_manifest(manifest, [result_path, flux_path],
                     os.path.join(args.out, "manifest.json"), t0)
    return 0


def cmd_vsc_check(args) -> int:
    t0 = time.time()
    cfg = parse_config(args.config, SCHEMAS["vsc-check"])
    s = args.s if args.s is not None else cfg["s"]
    kappa = args.kappa if args.kappa is not None else cfg["kappa"]
    mesh = load_mesh(args.mesh)
    data = _problem_data(mesh, cfg)
    op = build_forward_operator(mesh, data)
    basis = build_spectral_basis(mesh)
    q_dag = synthesize_flux_with_smoothness(basis, s, cfg["eps"], args.seed)

    n_cal = max(1, args.n_samples // 2)
    calibration = sample_admissible_fluxes(basis, q_dag, cfg["m0"], n_cal, args.seed + 1)
    evaluation = sample_admissible_fluxes(basis, q_dag, cfg["m0"], args.n_samples, args.seed + 2)
    spec = fit_vsc_constants(op, basis, q_dag, calibration, s, kappa, m0=cfg["m0"])
    report = check_vsc_inequality(op, basis, q_dag, spec, evaluation, m0=cfg["m0"])

    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "vsc_report.csv")
    lines = ["sample_id,lhs,rhs,margin,admissible"]
    for row in report.rows:
        lines.append(",".join([str(row.sample_id), _fmt(row.lhs), _fmt(row.rhs),
                               _fmt(row.margin), str(int(row.admissible))]))
    _write_lines(report_path, lines)
    summary_path = os.path.join(args.out, "summary.txt")
    _write_lines(summary_path, [
        f"C = {_fmt(spec.C)}",
        f"C0 = {_fmt(spec.C0)}",
        f"g0 = {_fmt(spec.g0)}",
        f"cprime = {_fmt(spec.cprime)}",
        f"f_coeff = {_fmt(spec.f_coeff)}",
        f"kappa = {_fmt(kappa)}",
        f"s = {_fmt(s)}",
        f"min_margin = {_fmt(report.min_margin)}",
        f"fraction_nonnegative = {_fmt(report.fraction_nonnegative)}",
        f"holds_empirically = {int(report.holds_empirically)}",
    ])
    manifest = RunManifest("vsc-check", {**cfg, "s": s, "kappa": kappa,
                                         "n_samples": args.n_samples}, seeds=[args.seed])
    manifest.add_input(args.mesh)
    if args.config:
        manifest.add_input(args.config)
    _finish_manifest(manifest, [report_path, summary_path],
                     os.path.join(args.out, "manifest.json"), t0)
    return 0


def cmd_stability_probe(args) -> int:
    t0 = time.time()
    cfg = parse_config(args.config, SCHEMAS["stability-probe"])
    kappa = args.kappa if args.kappa is not None else cfg["kappa"]
    mesh = load_mesh(args.mesh)
    n_v = mesh.n_vertices
    n_a = len(boundary_map(mesh, GAMMA_A))
    data = ProblemData(resolve_field(cfg["alpha"], n_v, "alpha"),
                       resolve_field(cfg["k"], n_a, "k"),
                       np.zeros(n_v), np.zeros(n_a))
    system = FactorizedSystem(mesh, data)
    basis = build_spectral_basis(mesh)
    samples = generate_probe_ensemble(system, basis, args.n_samples, args.seed)
    c_fit, c0_fit, max_violation = fit_stability_modulus(samples, kappa,
                                                         min_samples=min(50, args.n_samples))

    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "stability_report.csv")
    lines = ["sample_id,trace_norm,h1_norm,m_proxy,bound,slack"]
    for i, smp in enumerate(samples):
        if smp.trace_norm > 0.0:
            arg = c0_fit * smp.m_proxy / smp.trace_norm
            bound = c_fit * smp.m_proxy / np.log(arg) ** kappa if arg > 1.0 else float("nan")
        else:
            bound = float("nan")
        slack = bound - smp.h1_norm
        lines.append(",".join([str(i), _fmt(smp.trace_norm), _fmt(smp.h1_norm),
                               _fmt(smp.m_proxy), _fmt(bound), _fmt(slack)]))
    _write_lines(report_path, lines)
    summary_path = os.path.join(args.out, "summary.txt")
    _write_lines(summary_path, [
        f"C_fit = {_fmt(c_fit)}",
        f"C0_fit = {_fmt(c0_fit)}",
        f"kappa = {_fmt(kappa)}",
        f"max_violation = {_fmt(max_violation)}",
        f"n_samples = {len(samples)}",
    ])
    manifest = RunManifest("stability-probe", {**cfg, "kappa": kappa,
                                               "n_samples": args.n_samples}, seeds=[args.seed])
    manifest.add_input(args.mesh)
    if args.config:
        manifest.add_input(args.config)
    _finish_manifest(manifest, [report_path, summary_path],
                     os.path.join(args.out, "manifest.json"), t0)
    return 0


def cmd_rates(args) -> int:
    t0 = time.time()
    cfg = parse_config(args.config, SCHEMAS["rates"])
    experiment = ExperimentConfig(
        r_inner=cfg["r_inner"], r_outer=cfg["r_outer"], h=cfg["h"],
        refine_level=cfg["refine_level"],
        alpha=float(cfg["alpha"]), k=float(cfg["k"]),
        f=float(cfg["f"]), u_a=float(cfg["u_a"]),
        s=cfg["s"], kappa=cfg["kappa"], eps=cfg["eps"],
        delta_grid=cfg["delta_grid"], seeds_per_delta=cfg["seeds_per_delta"],
        base_seed=cfg["base_seed"], flux_seed=cfg["flux_seed"],
        rho_rule=cfg["rho_rule"], fixed_rho_schedule=cfg["fixed_rho_schedule"],
        tau_d=cfg["tau_d"], m0=cfg["m0"],
    )
    report = run_rate_study(experiment)
    outputs = emit_report(report, args.out_dir)
    seeds = [cfg["base_seed"] + 1000 * i + j
             for i in range(len(cfg["delta_grid"]))
             for j in range(cfg["seeds_per_delta"])]
    manifest = RunManifest("rates", cfg, seeds=seeds)
    if args.config:
        manifest.add_input(args.config)
    _finish_manifest(manifest, outputs, os.path.join(args.out_dir, "manifest.json"), t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluxrec",
        description="Distributed-flux reconstruction experiments on annular domains",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("mesh-gen", help="generate an annulus mesh")
    p.add_argument("--r-inner", type=float, default=0.5)
    p.add_argument("--r-outer", type=float, default=1.0)
    p.add_argument("--h", type=float, required=True)
    p.add_argument("--refine", type=int, default=0, help="uniform refinements after generation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh_gen)

    p = sub.add_parser("forward", help="solve the forward problem for a flux file")
    p.add_argument("--mesh", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--flux", required=True, help="flux CSV on GammaI in map order")
    p.add_argument("--out-trace", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("spectrum", help="boundary eigenvalues on GammaI")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("invert", help="Tikhonov inversion of a measured trace")
    p.add_argument("--mesh", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data-trace", required=True, help="clean trace CSV on GammaA")
    p.add_argument("--delta", type=float, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--rho", type=float, default=None, help="fixed regularization weight")
    group.add_argument("--discrepancy", action="store_true",
                       help="choose rho by the discrepancy principle (default)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("vsc-check", help="fit constants and check the source condition")
    p.add_argument("--mesh", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--s", type=float, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_vsc_check)

    p = sub.add_parser("stability-probe", help="fit the conditional-stability modulus")
    p.add_argument("--mesh", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_stability_probe)

    p = sub.add_parser("rates", help="noise-level sweep and logarithmic rate fit")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_rates)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FluxRecError as exc:
        print(f"fluxrec: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"fluxrec: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fluxrec: io error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
