"""
Command-line front end.

    python cli.py mesh --dim 2 --div 8x8 [--bounds 0,1,0,1] [--out box.off]
    python cli.py solve run.cfg
    python cli.py frames [--config frames.cfg] [--field sphere] [--div 16] [--refine 3]
    python cli.py check

Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 nonconvergence,
4 inadmissible state.
"""
import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from config import DEFAULT_FRAMES_SETTINGS, ConfigError, load_run_config, parse_divisions
from constitutive import MaterialParams, make_energy_model
from frames import catalog_entry, flatness_report, refinement_study, save_structured_vtk
from hw_solver import (BoundaryData, HWSolver, NonConvergenceError, SingularSystemError, SolverConfig,
                       export_solution)
from kinematics import InadmissibleStateError
from mesh import MeshParseError, build_box_mesh, load_off, save_off
from self_check import run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NONCONVERGENCE = 3
EXIT_INADMISSIBLE = 4


def _parse_bounds(text: str, dim: int):
    try:
        values = [float(t) for t in text.split(',')]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got '{text}'", 'bounds')
    if len(values) != 2 * dim:
        raise ConfigError(f"expected {2 * dim} values (lo,hi per axis), got {len(values)}", 'bounds')
    bounds = tuple((values[2 * a], values[2 * a + 1]) for a in range(dim))
    if any(hi <= lo for lo, hi in bounds):
        raise ConfigError("each axis needs lo < hi", 'bounds')
    return bounds


def cmd_mesh(args) -> int:
    divisions = parse_divisions(args.div, 'div', args.dim)
    bounds = _parse_bounds(args.bounds, args.dim) if args.bounds else None
    mesh = build_box_mesh(args.dim, divisions, bounds)
    out = args.out or f"box_{args.div}.{'off' if args.dim == 2 else 'toff'}"
    save_off(out, mesh)
    kind = 'triangles' if args.dim == 2 else 'tetrahedra'
    print(f"{out}: {mesh.num_vertices} vertices, {mesh.num_elements} {kind}")
    return EXIT_OK


def _boundary_data(mesh, cfg) -> BoundaryData:
    bcs = BoundaryData()
    for spec in cfg['dirichlet']:
        bcs.add_affine(mesh, spec.matrix, spec.offset, None if spec.everywhere else spec.markers)
    bcs.neumann = dict(cfg.get('neumann') or {})
    bcs.body_force = cfg.get('body_force')
    return bcs


def cmd_solve(args) -> int:
    cfg = load_run_config(args.config, 'solve')
    dim = cfg['dim']
    source, value = cfg['mesh']
    try:
        mesh = build_box_mesh(dim, value) if source == 'box' else load_off(value)
    except OSError as e:
        raise ConfigError(f"cannot read mesh: {e.strerror or e}", 'mesh', cfg.lines.get('mesh'))
    if mesh.dim != dim:
        raise ConfigError(f"mesh is {mesh.dim}D but dim = {dim}", 'mesh', cfg.lines.get('mesh'))

    if cfg.get('young') is not None:
        params = MaterialParams.from_young_poisson(cfg['young'], cfg['poisson'])
    else:
        params = MaterialParams(cfg['lambda'], cfg['mu'])
    model = make_energy_model(cfg['material'], params)
    settings = SolverConfig.from_settings({
        'tol_rel': cfg['tol_rel'],
        'tol_abs': cfg.get('tol_abs'),
        'max_iter': cfg['max_iter'],
        'mode': cfg['mode'],
    })
    bcs = _boundary_data(mesh, cfg)
    prefix = cfg['out_prefix']

    try:
        state, report = HWSolver(mesh, bcs, model, settings).solve()
    except InadmissibleStateError as e:
        logger.error(f"Inadmissible state: {e}")
        return EXIT_INADMISSIBLE
    except NonConvergenceError as e:
        export_solution(prefix, mesh, e.state, model, e.report)
        print(e.report.format_text())
        return EXIT_NONCONVERGENCE
    except SingularSystemError as e:
        logger.error(str(e))
        return EXIT_NONCONVERGENCE

    export_solution(prefix, mesh, state, model, report)
    print(report.format_text())
    return EXIT_OK


def _frames_settings(args) -> dict:
    settings = dict(DEFAULT_FRAMES_SETTINGS)
    if args.config:
        settings.update(load_run_config(args.config, 'frames').values)
    for key in ('field', 'dim', 'div', 'refine', 'tol', 'out_prefix'):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if not settings.get('field'):
        raise ConfigError("no frame field selected", 'field')
    return settings


def cmd_frames(args) -> int:
    settings = _frames_settings(args)
    name, dim, div = settings['field'], settings['dim'], settings['div']
    entry = catalog_entry(name)
    theta = entry.sample(div, dim)
    report = flatness_report(theta, settings['tol'])
    prefix = settings['out_prefix']

    report.to_frame().to_csv(f"{prefix}.csv", index=False, float_format='%.17g')
    curvature_norm = np.sqrt(np.sum(report.curvature.coeffs ** 2, axis=(-3, -2, -1)))
    save_structured_vtk(f"{prefix}.vtk", theta.grid,
                        {'torsion': report.torsion_field, 'curvature_norm': curvature_norm},
                        title=f"frames {name}")
    summary = f"{name} ({div} divisions): {report.summary()}"

    if settings['refine'] >= 2:
        levels = [div * 2 ** i for i in range(settings['refine'])]
        table, slopes = refinement_study(name, levels, dim)
        table.to_csv(f"{prefix}_refinement.csv", index=False, float_format='%.17g')
        summary += (f"; torsion slope {slopes['torsion_slope']:.3f}, "
                    f"curvature slope {slopes['curvature_slope']:.3f}")
        if dim == 2:
            finest = table.iloc[-1]
            summary += (f"; interior frame curvature in [{finest['frame_curvature_min']:.6f}, "
                        f"{finest['frame_curvature_max']:.6f}] at {int(finest['divisions'])} divisions")
    print(summary)
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_checks(verbose=True)
    return EXIT_OK if all(results.values()) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cli.py', description="Geometric Hu-Washizu elasticity toolkit")
    sub = parser.add_subparsers(dest='command', required=True)

    mesh = sub.add_parser('mesh', help="write a structured box mesh as OFF/TOFF")
    mesh.add_argument('--dim', type=int, choices=(2, 3), required=True)
    mesh.add_argument('--div', required=True, help="divisions, e.g. 8x8 or 2x2x2")
    mesh.add_argument('--bounds', help="lo,hi per axis, e.g. 0,1,0,2")
    mesh.add_argument('--out', help="output path")
    mesh.set_defaults(handler=cmd_mesh)

    solve = sub.add_parser('solve', help="run a Hu-Washizu solve from a run config")
    solve.add_argument('config')
    solve.set_defaults(handler=cmd_solve)

    frames = sub.add_parser('frames', help="moving-frame structure-equation diagnostics")
    frames.add_argument('--config')
    frames.add_argument('--field')
    frames.add_argument('--dim', type=int, choices=(2, 3))
    frames.add_argument('--div', type=int)
    frames.add_argument('--refine', type=int)
    frames.add_argument('--tol', type=float)
    frames.add_argument('--out', dest='out_prefix')
    frames.set_defaults(handler=cmd_frames)

    check = sub.add_parser('check', help="run the fast verification suite")
    check.set_defaults(handler=cmd_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.handler(args)
    except (ConfigError, MeshParseError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InadmissibleStateError as e:
        logger.error(str(e))
        return EXIT_INADMISSIBLE
    except OSError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
