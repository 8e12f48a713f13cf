"""Multilevel training data: per-level corrections, normalisation, storage.

A dataset directory holds ``manifest.json`` and one raw little-endian float64
file per array, row-major, shapes declared in the manifest.  Sample ``i``
(0-based) carries level-``l`` data iff ``i < N_l``.  See
``docs/dataset_format.md`` for the manifest layout.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fe
from .fields import FieldSpec, ParamVector, evaluate_kappa, sample_parameters
from .grid import GridHierarchy, build_hierarchy, nodal_interpolate_to_coarse
from .multigrid import VCycleConfig, solve_to_tolerance

log = logging.getLogger(__name__)

__all__ = [
    "FORMAT_VERSION",
    "DatasetError",
    "MultilevelSample",
    "Dataset",
    "decay_schedule",
    "relative_cost",
    "prolongate",
    "generate_sample",
    "generate_dataset",
    "load_dataset",
    "verify_dataset",
    "h1_loss",
    "recombine",
]

FORMAT_VERSION = 1
DTYPE = "<f8"
SOLVE_RTOL = 1e-10


class DatasetError(RuntimeError):
    pass


def decay_schedule(N1: int, L: int) -> list[int]:
    """``N_l = ceil(N1 * 2^(1-l))``, at least one sample per level."""
    if int(N1) != N1 or N1 < 1:
        raise ValueError("N1 must be a positive integer")
    if int(L) != L or L < 1:
        raise ValueError("L must be a positive integer")
    # exact in binary: N1 / 2^(l-1) is representable for the sizes of interest
    return [max(1, math.ceil(N1 / 2 ** (ell - 1))) for ell in range(1, L + 1)]


def relative_cost(counts) -> float:
    """Work of the schedule in units of one finest-level sample (cost per sample ~ 4^l)."""
    L = len(counts)
    return float(sum(n * 4.0 ** (ell - L) for ell, n in enumerate(counts, start=1)))


def prolongate(hier: GridHierarchy, u, ell_from: int, ell_to: int) -> np.ndarray:
    """Apply the prolongation chain from level ``ell_from`` up to ``ell_to``."""
    if ell_to < ell_from:
        raise ValueError("prolongation only goes to finer levels")
    u = np.asarray(u, dtype=float).ravel()
    if u.size != hier.level(ell_from).dof:
        raise ValueError(f"expected {hier.level(ell_from).dof} entries on level {ell_from}")
    for ell in range(ell_from, ell_to):
        u = hier.prolongation(ell) @ u
    return u


@dataclass
class MultilevelSample:
    index: int
    y: ParamVector
    kappa_per_level: list  # interior nodal values, level 1 first
    v_fine: np.ndarray
    corrections: list  # hat v_l on level l; hat v_1 = v_1
    cycles: int = 0
    residual: float = 0.0

    @property
    def L(self) -> int:
        return len(self.corrections)


def _corrections(hier: GridHierarchy, solutions: list) -> list:
    out = [solutions[0].copy()]
    for ell in range(2, len(solutions) + 1):
        out.append(solutions[ell - 1] - hier.prolongation(ell - 1) @ solutions[ell - 2])
    return out


def generate_sample(spec: FieldSpec, hier: GridHierarchy, solver_cfg: VCycleConfig | None, seed: int, index: int,
                    galerkin: bool = False, rtol: float = SOLVE_RTOL) -> MultilevelSample:
    """Solve on the finest level and derive coarser solutions by nodal interpolation.

    With ``galerkin=True`` every level is solved independently instead.
    """
    cfg = solver_cfg or VCycleConfig()
    y = sample_parameters(spec, seed, index)
    L = hier.L
    kappas = [evaluate_kappa(spec, y, hier.level(ell)) for ell in range(1, L + 1)]
    kap_fine = evaluate_kappa(spec, y, hier.level(L), extended=True)
    v_fine, info = solve_to_tolerance(kap_fine, 1.0, hier, cfg, rtol=rtol)
    if galerkin:
        solutions = []
        for ell in range(1, L):
            sub = hier.truncated(ell)
            kap = evaluate_kappa(spec, y, sub.level(ell), extended=True)
            solutions.append(solve_to_tolerance(kap, 1.0, sub, cfg, rtol=rtol)[0])
        solutions.append(v_fine)
    else:
        solutions = [nodal_interpolate_to_coarse(hier, L, ell, v_fine) for ell in range(1, L + 1)]
    return MultilevelSample(index, y, kappas, v_fine, _corrections(hier, solutions), info.cycles, info.relative_residual)


# -- datasets ---------------------------------------------------------------------

@dataclass
class Dataset:
    path: Path
    manifest: dict
    arrays: dict

    @property
    def L(self) -> int:
        return int(self.manifest["L"])

    @property
    def counts(self) -> list:
        return list(self.manifest["counts"])

    @property
    def delta(self) -> list:
        return list(self.manifest["delta"])

    def hierarchy(self) -> GridHierarchy:
        return build_hierarchy(self.manifest["coarse_cells"], self.L)

    def corrections(self, ell: int) -> np.ndarray:
        return self.arrays[f"level{ell}_correction"]

    def kappa(self, ell: int) -> np.ndarray:
        return self.arrays[f"level{ell}_kappa"]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_array(directory: Path, name: str, arr: np.ndarray) -> dict:
    fname = f"{name}.f64"
    data = np.ascontiguousarray(arr, dtype=DTYPE)
    (directory / fname).write_bytes(data.tobytes(order="C"))
    return {"file": fname, "shape": list(data.shape), "dtype": DTYPE, "order": "C", "sha256": _sha256(directory / fname)}


def _sample_job(args):
    spec_json, coarse_cells, L, cfg_json, seed, index, rtol = args
    spec = FieldSpec.from_json(spec_json)
    hier = build_hierarchy(coarse_cells, L)
    s = generate_sample(spec, hier, VCycleConfig(**cfg_json), seed, index, rtol=rtol)
    return s.y.y, s.kappa_per_level, s.corrections, s.v_fine


def _delta(corr: np.ndarray) -> float:
    if corr.shape[0] == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.sum(corr * corr, axis=1))))


def generate_dataset(spec: FieldSpec, hier: GridHierarchy, solver_cfg: VCycleConfig | None, schedule, seed: int,
                     out_dir, workers: int = 1, overwrite: bool = False, rtol: float = SOLVE_RTOL) -> dict:
    """Generate, normalise and write a multilevel dataset; returns the manifest.

    Output is assembled in a temporary sibling directory and renamed into place,
    so an aborted run leaves nothing behind.  Results do not depend on ``workers``.
    """
    cfg = solver_cfg or VCycleConfig()
    counts = [int(n) for n in schedule]
    L = hier.L
    if len(counts) != L:
        raise ValueError(f"schedule has {len(counts)} entries for {L} levels")
    if counts[0] < 1 or any(n < 0 for n in counts):
        raise ValueError("sample counts must be non-negative with N_1 >= 1")
    if any(b > a for a, b in zip(counts, counts[1:])):
        raise ValueError("sample counts must be non-increasing in the level")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not overwrite:
            raise DatasetError(f"{out_dir} exists and is not empty")
    out_dir.parent.mkdir(parents=True, exist_ok=True)

    jobs = [(spec.to_json(), hier.coarse_cells, L, cfg.to_json(), int(seed), i, rtol) for i in range(counts[0])]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sample_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_sample_job(j) for j in jobs]

    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        arrays = {"params": _write_array(tmp, "params", np.array([r[0] for r in results]).reshape(counts[0], spec.p))}
        deltas = []
        for ell in range(1, L + 1):
            n, dof = counts[ell - 1], hier.level(ell).dof
            kap = np.array([r[1][ell - 1] for r in results[:n]]).reshape(n, dof)
            corr = np.array([r[2][ell - 1] for r in results[:n]]).reshape(n, dof)
            arrays[f"level{ell}_kappa"] = _write_array(tmp, f"level{ell}_kappa", kap)
            arrays[f"level{ell}_correction"] = _write_array(tmp, f"level{ell}_correction", corr)
            deltas.append(_delta(corr))
        sol = np.array([r[3] for r in results[: counts[-1]]]).reshape(counts[-1], hier.level(L).dof)
        arrays["solution"] = _write_array(tmp, "solution", sol)
        manifest = {
            "format_version": FORMAT_VERSION,
            "spec": spec.to_json(),
            "L": L,
            "coarse_cells": hier.coarse_cells,
            "counts": counts,
            "delta": deltas,
            "seed": int(seed),
            "solver": {**cfg.to_json(), "rtol": rtol, "coarse_solutions": "nodal_interpolation", "source": 1.0},
            "layout": {"dtype": DTYPE, "order": "C", "byte_order": "little"},
            "cost": {"model": "sum_l N_l 4^(l-L)", "finest_sample_equivalents": relative_cost(counts)},
            "arrays": arrays,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("wrote %d samples to %s (cost %.1f finest-sample equivalents)", counts[0], out_dir,
             manifest["cost"]["finest_sample_equivalents"])
    return manifest


def load_dataset(path, verify_checksums: bool = True) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no manifest.json in {path}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {manifest.get('format_version')!r}")
    arrays = {}
    for name, meta in manifest["arrays"].items():
        fpath = path / meta["file"]
        if verify_checksums and _sha256(fpath) != meta["sha256"]:
            raise DatasetError(f"checksum mismatch for {meta['file']}")
        data = np.fromfile(fpath, dtype=meta["dtype"])
        expected = int(np.prod(meta["shape"]))
        if data.size != expected:
            raise DatasetError(f"{meta['file']} holds {data.size} values, manifest says {expected}")
        arrays[name] = data.reshape(meta["shape"])
    return Dataset(path, manifest, arrays)


def verify_dataset(path) -> dict:
    """Checksums, normalisation constants and telescoping, as ``{check: max deviation}``."""
    ds = load_dataset(path, verify_checksums=True)
    hier = ds.hierarchy()
    report = {"checksums": 0.0}
    report["delta"] = max(abs(_delta(ds.corrections(ell)) - d) for ell, d in enumerate(ds.delta, start=1))
    sol = ds.arrays["solution"]
    worst = 0.0
    for i in range(sol.shape[0]):
        rebuilt = recombine([ds.corrections(ell)[i] for ell in range(1, ds.L + 1)], [1.0] * ds.L, hier)
        worst = max(worst, float(np.max(np.abs(rebuilt - sol[i]))))
    report["telescoping"] = worst
    return report


# -- loss and inference --------------------------------------------------------------

def _check_levels(seq, hier: GridHierarchy, what: str):
    if len(seq) != hier.L:
        raise ValueError(f"need {what} for {hier.L} levels, got {len(seq)}")
    out = []
    for ell, v in enumerate(seq, start=1):
        v = np.asarray(v, dtype=float).ravel()
        if v.size != hier.level(ell).dof:
            raise ValueError(f"{what} on level {ell} has {v.size} entries, expected {hier.level(ell).dof}")
        out.append(v)
    return out


def h1_loss(predictions, sample, delta, hier: GridHierarchy) -> float:
    """``sum_l d_l^T M_l d_l`` with ``d_l = pred_l - corr_l / delta_l`` and ``M_l`` the H1 mass matrix.

    ``sample`` is a :class:`MultilevelSample` or a list of corrections.
    """
    corr = sample.corrections if isinstance(sample, MultilevelSample) else sample
    preds = _check_levels(predictions, hier, "predictions")
    corr = _check_levels(corr, hier, "corrections")
    if len(delta) != hier.L or any(d <= 0 for d in delta):
        raise ValueError("need one positive normalisation constant per level")
    total = 0.0
    for ell, (p, c, d) in enumerate(zip(preds, corr, delta), start=1):
        r = p - c / d
        total += float(r @ (fe.h1_mass_matrix(hier.level(ell)) @ r))
    return total


def recombine(predictions, delta, hier: GridHierarchy) -> np.ndarray:
    """``sum_l delta_l * prolongate(pred_l)`` on the finest level (Horner form)."""
    preds = _check_levels(predictions, hier, "predictions")
    if len(delta) != hier.L:
        raise ValueError("need one normalisation constant per level")
    u = delta[0] * preds[0]
    for ell in range(2, hier.L + 1):
        u = hier.prolongation(ell - 1) @ u + delta[ell - 1] * preds[ell - 1]
    return u
