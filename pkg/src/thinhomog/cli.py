"""Command line entry point: ``thinhomog run | cell | pullback-check``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ThinHomogError
from .fem2d import assemble_stiffness, lumped_mass, neumann_rhs_cell
from .geometry import cell_at
from .homog import r_energy, solve_cell_at
from .mesh import dump_mesh, mesh_cell
from .pullback import (
    AdmissibleProfile,
    assemble_transformed,
    build_pullback,
    equivalence_check,
    observed_order,
    write_discrepancy_csv,
)
from .study import _eps_list, emit_csv, emit_svg, load_config, run_study


def _cmd_run(args):
    cfg = load_config(args.config)
    if args.mesh_factor is not None:
        cfg = replace(cfg, mesh_factor=args.mesh_factor)
    if args.eps is not None:
        try:
            cfg = replace(cfg, eps_list=_eps_list(args.eps))
        except ValueError as exc:
            raise ConfigError(f"--eps: {exc}") from None
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_study(cfg)
    emit_csv(result, out / "convergence.csv")
    emit_svg(result, out / "convergence.svg")
    result.table.to_csv(out / "coefficients.csv")
    print(f"{'eps':>12} {'e_l2_plain':>12} {'e_h1_plain':>12} {'e_h1_corr':>12} {'norm_X':>10}")
    for r in result.rows:
        print(f"{r.epsilon:12.6g} {r.e_l2_plain:12.4e} {r.e_h1_plain:12.4e} {r.e_h1_corr:12.4e} {r.norm_X:10.4f}")
    for name, rate in result.rates.items():
        print(f"rate {name}: {rate:.3f}" if np.isfinite(rate) else f"rate {name}: exact")
    if result.gate is not None:
        g = result.gate
        status = "ok" if g["passed"] else "FAILED"
        print(f"mesh-factor gate at eps={g['eps']:g}: change {100 * g['change']:.2f}% ({status})")
    print(f"wrote {out / 'convergence.csv'}, {out / 'convergence.svg'}, {out / 'coefficients.csv'}")
    return 0 if result.gate is None or result.gate["passed"] else 3


def _cmd_cell(args):
    cfg = load_config(args.profile)
    profile = cfg.profile().with_bounds()
    cell = solve_cell_at(profile, args.x, args.ny, args.nz, cfg.tol_cell)
    areas = cell.mesh.areas()
    g = cell.grad
    energy = float(np.dot(areas, (g**2).sum(axis=1)))
    dy = float(np.dot(areas, g[:, 0]))
    total = float(areas.sum())
    mean = float(lumped_mass(cell.mesh) @ cell.values) / total
    re = r_energy(cell)
    print(f"x = {args.x:g}")
    print(f"r = {cell.r:.12g}")
    print(f"p = {cell.p:.12g}")
    print(f"energy identity residual |int|grad X|^2 - int dX/dy| / |Y*| = {abs(energy - dy) / total:.3e}")
    print(f"|r - r_energy| / r = {abs(cell.r - re) / cell.r:.3e}")
    print(f"mean of X = {mean:.3e}")
    if args.dump_mesh:
        dump_mesh(cell.mesh, args.dump_mesh)
        print(f"wrote {args.dump_mesh}")
    return 0


def _cmd_pullback(args):
    cfg = load_config(args.config)
    G = AdmissibleProfile.from_text(cfg.pullback_G, cfg.L)
    Ghat = AdmissibleProfile.from_text(cfg.pullback_Ghat, cfg.L)
    reports = []
    for ny in cfg.pullback_levels:
        rep, _, _ = equivalence_check(G, Ghat, ny, tol=cfg.tol_cell)
        reports.append(rep)
        print(f"ny={rep.ny:4d} nz={rep.nz:4d}  l2_rel={rep.l2_rel:.4e}  h1_rel={rep.h1_rel:.4e}")
    if len(reports) > 1:
        print(f"observed order: l2 {observed_order(reports, 'l2_rel'):.3f}, h1 {observed_order(reports):.3f}")
    ny = cfg.pullback_levels[0]
    mesh, pairing = mesh_cell(cell_at(G.spec, 0.0), ny, max(2, ny // 2))
    same = assemble_transformed(mesh, pairing, build_pullback(G, G))
    dA = abs(same.full_matrix - assemble_stiffness(mesh)).max()
    db = np.max(np.abs(same.full_rhs - neumann_rhs_cell(mesh)))
    print(f"identity map: max entry difference matrix {dA:.3e}, rhs {db:.3e}")
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_discrepancy_csv(reports, out / "pullback.csv")
    print(f"wrote {out / 'pullback.csv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="thinhomog", description="Thin-domain homogenization experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a convergence sweep over epsilon")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (default: output.dir from the config)")
    run.add_argument("--mesh-factor", type=float, dest="mesh_factor")
    run.add_argument("--eps", help="comma separated epsilon list, e.g. 1/8,1/16")
    run.set_defaults(func=_cmd_run)

    cell = sub.add_parser("cell", help="solve one cell problem and print r, p and identity residuals")
    cell.add_argument("--profile", required=True, help="config file with profile.* keys")
    cell.add_argument("--x", type=float, required=True)
    cell.add_argument("--ny", type=int, default=64)
    cell.add_argument("--nz", type=int, default=32)
    cell.add_argument("--dump-mesh", dest="dump_mesh")
    cell.set_defaults(func=_cmd_cell)

    pb = sub.add_parser("pullback-check", help="compare transformed and direct cell solutions")
    pb.add_argument("--config", required=True)
    pb.add_argument("--out")
    pb.set_defaults(func=_cmd_pullback)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ThinHomogError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
