"""Command-line entry point: ``convmg <command> --config run.json``.

Exit codes: 0 success, 1 a check or solver failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import convnet, fe, metrics, mldata
from . import multigrid as mg
from .fields import FieldSpec, evaluate_kappa, sample_parameters
from .grid import build_hierarchy

log = logging.getLogger("convmg")

DEFAULTS = {
    "seed": 0,
    "grid": {"coarse_cells": 5, "L": 3},
    "solver": {"k_pre": 3, "k_post": 3, "k0": 0, "omega": "auto", "m": 30, "rtol": 1e-10},
    "dataset": {"N1": 16, "decay": True},
    "verify": {"tolerance": 1e-12, "samples": 5, "mul_epsilon": 1e-3},
    "contraction": {"levels": [3, 4, 5], "k_values": [1, 2, 3, 4, 8], "draws": 10, "cycles": 8},
    "weights": {"L_values": [1, 2, 3, 4, 5, 6, 7, 8], "k": 3, "k0": 0, "m": "proportional", "epsilon": 1e-3},
    "metrics": {"N": 4, "ref_offset": 2, "predictions": "solution"},
}


class ConfigError(ValueError):
    pass


class CheckFailure(RuntimeError):
    pass


def load_schema() -> dict:
    return json.loads(resources.files("convmg").joinpath("schemas/run_config.schema.json").read_text())


def load_config(path) -> dict:
    """Read, validate and fill defaults; raises :class:`ConfigError`."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {loc}: {exc.message}") from exc
    cfg = {key: (dict(val) if isinstance(val, dict) else val) for key, val in DEFAULTS.items()}
    for key, val in raw.items():
        cfg[key] = {**cfg.get(key, {}), **val} if isinstance(val, dict) else val
    try:
        cfg["_spec"] = FieldSpec.from_json(cfg["field"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _solver_cfg(cfg, **override) -> mg.VCycleConfig:
    s = {k: v for k, v in cfg["solver"].items() if k != "rtol"}
    s.update(override)
    return mg.VCycleConfig(**s)


def _hier(cfg, L=None):
    return build_hierarchy(cfg["grid"]["coarse_cells"], L or cfg["grid"]["L"])


def _emit_csv(rows, header, out):
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out:
            fh.close()


# -- equivalence suite --------------------------------------------------------------

def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def equivalence_suite(cfg: dict, inject_fault: bool = False) -> list[dict]:
    """Classical vs assembled vs convolutional paths on every level of the configured grid."""
    tol = cfg["verify"]["tolerance"]
    nsamp = cfg["verify"]["samples"]
    hier = _hier(cfg)
    rng = np.random.default_rng(cfg["seed"])
    ks = convnet.build_kernel_set(hier, verify=not inject_fault)
    if inject_fault:
        ks.op[hier.L].weights[0, 0, 1, 1] *= 1.0 + 1e-6
    worst = dict.fromkeys(
        ["operator_vs_assembly", "conv_operator_equivalence", "kappa_integration", "coarsening",
         "restriction", "prolongation", "adjointness", "galerkin"], 0.0)
    for level in hier.levels:
        for _ in range(nsamp):
            kap = rng.uniform(0.1, 2.0, level.extended_shape)
            u = rng.standard_normal(level.dof)
            ti = fe.triangle_integrals(kap, level)
            Au = fe.apply_operator(ti, u)
            worst["operator_vs_assembly"] = max(worst["operator_vs_assembly"], _rel(Au, fe.assemble_matrix(level, kap) @ u))
            got = convnet.conv_apply_operator(ks, level, ti.data, u)
            worst["conv_operator_equivalence"] = max(worst["conv_operator_equivalence"], _rel(got, Au))
            ups = convnet.conv_triangle_integrals(ks, level, kap)
            worst["kappa_integration"] = max(worst["kappa_integration"], _rel(ups, ti.data))
            if level.level == 1:
                continue
            coarse = hier.level(level.level - 1)
            P = hier.prolongation(coarse.level)
            worst["coarsening"] = max(worst["coarsening"], _rel(convnet.conv_coarsen(ks, ti.data),
                                                                fe.coarsen_triangle_integrals(ti, coarse).data))
            r = rng.standard_normal(level.dof)
            c = rng.standard_normal(coarse.dof)
            worst["restriction"] = max(worst["restriction"], _rel(convnet.conv_restrict(ks, level.as_grid(r)).ravel(), P.T @ r))
            Pc = convnet.conv_prolong(ks, coarse.as_grid(c)).ravel()
            worst["prolongation"] = max(worst["prolongation"], _rel(Pc, P @ c))
            lhs, rhs = Pc @ r, c @ (P.T @ r)
            worst["adjointness"] = max(worst["adjointness"], abs(lhs - rhs) / max(abs(rhs), np.linalg.norm(Pc) * np.linalg.norm(r)))
            if level.dof <= 2500:
                A = fe.assemble_matrix(level, kap)
                ct = fe.coarsen_triangle_integrals(ti, coarse)
                Ac = fe.assemble_matrix(coarse, cells=(ct.lower, ct.upper))
                worst["galerkin"] = max(worst["galerkin"], _rel((P.T @ A @ P).toarray(), Ac.toarray()))
    results = [{"check": k, "max_deviation": v, "tolerance": tol, "passed": bool(v <= tol)} for k, v in worst.items()]

    spec = FieldSpec.default("UniformSmooth")
    kap = evaluate_kappa(spec, sample_parameters(spec, cfg["seed"], 0), hier.level(hier.L), extended=True)
    # the conv path has no direct coarse solve
    vc = mg.VCycleConfig(3, 3, k0=cfg["solver"]["k0"] or 40, m=3)
    a = convnet.conv_mg_solve(None, kap, 1.0, vc, hier, ks=ks)
    b = mg.mg_solve(None, kap, 1.0, vc, hier)
    dev = _rel(a, b)
    results.append({"check": "conv_vcycle_equivalence", "max_deviation": dev, "tolerance": tol, "passed": bool(dev <= tol)})

    eps = cfg["verify"]["mul_epsilon"]
    unit = convnet.build_mul_unit(2.0, eps)
    results.append({"check": "mul_unit_bound", "max_deviation": unit.achieved_error, "tolerance": eps,
                    "passed": bool(unit.achieved_error <= eps and unit.weight_count <= 9)})
    return results


# -- commands -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    seed = cfg["seed"] if args.seed is None else args.seed
    ds = cfg["dataset"]
    out = args.out or ds.get("out_dir")
    if not out:
        raise ConfigError("no output directory (use --out or dataset.out_dir)")
    hier = _hier(cfg)
    counts = mldata.decay_schedule(ds["N1"], hier.L) if ds["decay"] else [ds["N1"]] * hier.L
    manifest = mldata.generate_dataset(cfg["_spec"], hier, _solver_cfg(cfg), counts, seed, out,
                                       workers=args.workers, overwrite=args.overwrite,
                                       rtol=cfg["solver"]["rtol"])
    _print_manifest(manifest, out)
    return 0


def _print_manifest(manifest, path):
    print(f"dataset       {path}")
    print(f"field         {manifest['spec']['kind']} (p={manifest['spec']['p']})")
    print(f"levels        L={manifest['L']}, coarse cells {manifest['coarse_cells']}")
    print(f"counts        {manifest['counts']}")
    print("delta         " + ", ".join(f"{d:.6e}" for d in manifest["delta"]))
    print(f"cost          {manifest['cost']['finest_sample_equivalents']:.2f} finest-sample equivalents")


def cmd_inspect(args) -> int:
    ds = mldata.load_dataset(args.dataset, verify_checksums=not args.no_checksums)
    if args.json:
        print(json.dumps(ds.manifest, indent=2, sort_keys=True))
    else:
        _print_manifest(ds.manifest, args.dataset)
        for name, meta in sorted(ds.manifest["arrays"].items()):
            print(f"  {name:<20} {str(tuple(meta['shape'])):<16} {meta['sha256'][:12]}")
    return 0


def cmd_verify(args) -> int:
    if args.dataset:
        report = mldata.verify_dataset(args.dataset)
        tol = 1e-12
        results = [{"check": f"dataset_{k}", "max_deviation": v, "tolerance": tol, "passed": bool(v <= tol)}
                   for k, v in report.items()]
    else:
        if not args.config:
            raise ConfigError("verify needs --config (or --dataset)")
        results = equivalence_suite(load_config(args.config), inject_fault=args.inject_fault)
    if args.json:
        print(json.dumps({"passed": all(r["passed"] for r in results), "checks": results}, indent=2))
    else:
        for r in results:
            status = "PASS" if r["passed"] else "FAIL"
            print(f"{status}  {r['check']:<28} {r['max_deviation']:.3e}  (tol {r['tolerance']:.0e})")
    failed = [r["check"] for r in results if not r["passed"]]
    if failed:
        print(f"check failed: {failed[0]}", file=sys.stderr)
        return 1
    return 0


def cmd_contraction(args) -> int:
    cfg = load_config(args.config)
    c = cfg["contraction"]
    spec = cfg["_spec"]
    rows = []
    for L in c["levels"]:
        hier = _hier(cfg, L)
        kappas = [evaluate_kappa(spec, sample_parameters(spec, cfg["seed"], i), hier.level(L), extended=True)
                  for i in range(c["draws"])]
        for k in c["k_values"]:
            vc = _solver_cfg(cfg, k_pre=k, k_post=k, m=c["cycles"])
            ratios = np.array([mg.measure_contraction(kap, vc, hier) for kap in kappas])
            med = np.median(ratios, axis=0)
            rows.extend((L, k, i + 1, f"{r:.10g}") for i, r in enumerate(med))
    _emit_csv(rows, ["level", "k", "cycle", "ratio"], args.out)
    return 0


def weight_rows(L_values, k, k0, m, epsilon):
    """CSV rows ``(L, k, k0, m, epsilon, weights, d2_L)``; ``m='proportional'`` ties m to L and eps to 2^-L."""
    rows = []
    for L in L_values:
        m_L = L if m == "proportional" else int(m)
        eps = 2.0**-L if m == "proportional" else epsilon
        rows.append([L, k, k0, m_L, eps, convnet.count_weights(L, k, k0, m_L)])
    for i, row in enumerate(rows):
        consecutive = i >= 2 and rows[i][0] - rows[i - 1][0] == 1 == rows[i - 1][0] - rows[i - 2][0]
        row.append(rows[i][5] - 2 * rows[i - 1][5] + rows[i - 2][5] if consecutive else "")
    return rows


def cmd_weights(args) -> int:
    cfg = load_config(args.config)
    w = cfg["weights"]
    rows = weight_rows(w["L_values"], w["k"], w["k0"], w["m"], w["epsilon"])
    _emit_csv(rows, ["L", "k", "k0", "m", "epsilon", "weights", "d2_L"], args.out)
    return 0


def cmd_metrics(args) -> int:
    cfg = load_config(args.config)
    mcfg = cfg["metrics"]
    spec = cfg["_spec"]
    L = cfg["grid"]["L"]
    L_ref = L + mcfg["ref_offset"]
    hier_ref = _hier(cfg, L_ref)
    hier = hier_ref.truncated(L)
    vc = _solver_cfg(cfg)
    rtol = cfg["solver"]["rtol"]
    sols, refs = [], []
    for i in range(mcfg["N"]):
        y = sample_parameters(spec, cfg["seed"], i)
        sols.append(mg.solve_to_tolerance(evaluate_kappa(spec, y, hier.level(L), extended=True), 1.0, hier, vc, rtol)[0])
        refs.append(mg.solve_to_tolerance(evaluate_kappa(spec, y, hier_ref.level(L_ref), extended=True), 1.0,
                                          hier_ref, vc, rtol)[0])
    source = mcfg["predictions"]
    if source == "solution":
        preds = np.array(sols)
    elif source == "zero":
        preds = np.zeros((len(sols), hier.level(L).dof))
    else:
        preds = np.load(source)
    fingerprint = {"field": spec.kind, "solver": vc.to_json()}
    reports = [
        metrics.MetricReport("MRH1", metrics.mr_error(preds, sols, "H1", hier), len(sols), (L,), fingerprint),
        metrics.MetricReport("MRL2", metrics.mr_error(preds, sols, "L2", hier), len(sols), (L,), fingerprint),
        metrics.MetricReport("MRH1_ref", metrics.mr_error_ref(preds, refs, "H1", hier_ref, L), len(sols), (L, L_ref), fingerprint),
        metrics.MetricReport("MRL2_ref", metrics.mr_error_ref(preds, refs, "L2", hier_ref, L), len(sols), (L, L_ref), fingerprint),
    ]
    if args.json:
        print(json.dumps(metrics.report_rows(reports), indent=2))
    else:
        _emit_csv([(r.kind, f"{r.value:.10g}", r.N, "-".join(map(str, r.levels))) for r in reports],
                  ["kind", "value", "N", "levels"], args.out)
    return 0


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    spec = cfg["_spec"]
    hier = _hier(cfg)
    kap = evaluate_kappa(spec, sample_parameters(spec, cfg["seed"], args.index), hier.level(hier.L), extended=True)
    u, info = mg.solve_to_tolerance(kap, 1.0, hier, _solver_cfg(cfg), rtol=cfg["solver"]["rtol"])
    print(f"cycles {info.cycles}  relative residual {info.relative_residual:.3e}  "
          f"H1 norm {fe.h1_norm(u, hier.level(hier.L)):.10g}")
    if args.out:
        np.save(args.out, u)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convmg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a multilevel dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inspect", help="summarise a dataset directory")
    p.add_argument("dataset")
    p.add_argument("--json", action="store_true")
    p.add_argument("--no-checksums", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", help="equivalence suite, or dataset integrity with --dataset")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--json", action="store_true")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    for name, func, helptext in (
        ("contraction", cmd_contraction, "per-cycle contraction CSV (level, k, cycle, ratio)"),
        ("weights", cmd_weights, "weight-count CSV (L, k, k0, m, epsilon, weights)"),
        ("metrics", cmd_metrics, "mean relative error report"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        if name == "metrics":
            p.add_argument("--json", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("solve", help="solve one sample to tolerance")
    p.add_argument("--config", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", help="save the solution as .npy")
    p.set_defaults(func=cmd_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"convmg: error: {exc}", file=sys.stderr)
        return 2
    except (mg.SolverError, convnet.KernelVerificationError, mldata.DatasetError, CheckFailure) as exc:
        print(f"convmg: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"convmg: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
