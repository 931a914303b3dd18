"""Command-line entry point.

    qotlab solve      --config cfg.json --out DIR
    qotlab perturb    --config cfg.json --out DIR
    qotlab constants  --config cfg.json --out DIR
    qotlab example62  --config cfg.json --out DIR
    qotlab verify     --config cfg.json --out DIR --jobs 4

Exit codes: 0 success, 1 input error, 2 solver non-convergence, 3 bound violation.
The config schema is documented in README.md.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .constants import constants_csv, instance_constants, uniform_constants
from .core import (DEFAULT_MAX_ITER, DEFAULT_TOL, Instance, NotConvergedError,
                   extract_coupling, solution_to_dict, solve_dual)
from .fixtures import (analytic_foc_residual, example62, example62_tilt, hausdorff_segments,
                       quadratic_convex_instance, support_offset)
from .harness import (PerturbationSpec, SolveCache, curve_csv, linear_tilt,
                      lipschitz_ratio_curve, run_pair, run_pairs)
from .measures import ClassParams, DiscreteMeasure, MeasureError

log = logging.getLogger("qotlab")

EXIT_OK, EXIT_INPUT, EXIT_NOCONV, EXIT_VIOLATION = 0, 1, 2, 3
COMMANDS = ("solve", "perturb", "constants", "example62", "verify")


class InputError(ValueError):
    pass


# --------------------------------------------------------------------------
# canonical JSON


def _enc(o) -> str:
    if isinstance(o, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _enc(o[k])
                              for k in sorted(o, key=str)) + "}"
    if isinstance(o, (list, tuple)):
        return "[" + ",".join(_enc(v) for v in o) + "]"
    if isinstance(o, np.ndarray):
        return _enc(o.tolist())
    if o is None or isinstance(o, (bool, np.bool_)):
        return json.dumps(None if o is None else bool(o))
    if isinstance(o, (int, np.integer)):
        return str(int(o))
    if isinstance(o, (float, np.floating)):
        x = float(o)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        s = format(x, ".17g")
        return s if any(ch in s for ch in ".en") else s + ".0"
    if isinstance(o, str):
        return json.dumps(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, 17 significant digits: byte-identical for identical inputs."""
    return _enc(obj) + "\n"


# --------------------------------------------------------------------------
# config loading


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _resolve(value, base: Path):
    """Inline object or a path (relative to the config) to a JSON file."""
    if isinstance(value, str):
        return _read_json(base / value)
    return value


def load_instance(spec, base: Path, label: str = "instance") -> Instance:
    spec = _resolve(spec, base)
    if not isinstance(spec, dict):
        raise InputError(f"{label}: expected an object")
    try:
        if "example62" in spec:
            ex = spec["example62"]
            return example62(float(ex.get("eta", 0.0)), int(ex.get("grid_n", 801))).instance
        if "quadratic" in spec:
            kw = dict(spec["quadratic"])
            return quadratic_convex_instance(**kw).instance
        data = dict(spec)
        for key in ("p", "q", "cost"):
            if key in data:
                data[key] = _resolve(data[key], base)
        data.setdefault("label", label)
        return Instance.from_dict(data)
    except MeasureError as exc:
        raise InputError(f"{label}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InputError(f"{label}: {exc}") from None


def load_params(cfg: dict, base: Path) -> ClassParams:
    if "class_params" not in cfg:
        raise InputError("config: missing field 'class_params'")
    data = _resolve(cfg["class_params"], base)
    try:
        return ClassParams.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"class_params: {exc}") from None


def load_perturbation(data: dict, base: Path) -> PerturbationSpec:
    data = dict(_resolve(data, base))
    try:
        other = data.pop("other", None)
        if other is not None:
            other = DiscreteMeasure.from_dict(_resolve(other, base))
        tilt = data.pop("tilt", None)
        tilt_fn = {None: None, "linear": linear_tilt(), "example62": example62_tilt}[tilt]
        vector = data.pop("vector", None)
        return PerturbationSpec(data.pop("kind"), tuple(float(t) for t in data.pop("grid")),
                                data.pop("target", "P"), other,
                                None if vector is None else tuple(vector), tilt_fn)
    except KeyError as exc:
        raise InputError(f"perturbation: missing or unknown field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InputError(f"perturbation: {exc}") from None


# --------------------------------------------------------------------------
# commands


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def cmd_solve(cfg: dict, args) -> int:
    base = args.base
    if "instance" not in cfg:
        raise InputError("config: missing field 'instance'")
    inst = load_instance(cfg["instance"], base)
    tol = args.tol or float(cfg.get("tol", DEFAULT_TOL))
    pot = solve_dual(inst.p, inst.q, inst.cost, inst.eps, tol=tol,
                     max_iter=int(cfg.get("max_iter", DEFAULT_MAX_ITER)))
    coup = extract_coupling(pot, inst.p, inst.q, inst.cost, require_converged=False)
    record = {"instance": inst.label, "solution": solution_to_dict(pot, coup, inst.cost,
                                                                   inst.p, inst.q)}
    if "json" in args.formats:
        _write(args.out, "solution.json", canonical_json(record))
    print(f"{inst.label}: converged={pot.converged} sweeps={pot.sweeps} "
          f"residual={pot.foc_residual_inf:.3e} support={int(np.count_nonzero(coup.zeta > coup.support_tol))}")
    return EXIT_OK if pot.converged else EXIT_NOCONV


def cmd_constants(cfg: dict, args) -> int:
    params = load_params(cfg, args.base)
    if "instance" in cfg:
        consts = instance_constants(load_instance(cfg["instance"], args.base), params)
    else:
        consts = uniform_constants(params)
    table = constants_csv(consts)
    sys.stdout.write(table)
    if "csv" in args.formats:
        _write(args.out, "constants.csv", table)
    if "json" in args.formats:
        _write(args.out, "constants.json", canonical_json(consts.to_dict()))
    return EXIT_OK


def cmd_perturb(cfg: dict, args) -> int:
    if "instance" not in cfg or "perturbation" not in cfg:
        raise InputError("config: 'instance' and 'perturbation' are required")
    inst = load_instance(cfg["instance"], args.base)
    params = load_params(cfg, args.base)
    spec = load_perturbation(cfg["perturbation"], args.base)
    rows = lipschitz_ratio_curve(inst, spec, params, SolveCache(args.tol or DEFAULT_TOL))
    text = curve_csv(rows)
    sys.stdout.write(text)
    if "csv" in args.formats:
        _write(args.out, "curve.csv", text)
    if "json" in args.formats:
        _write(args.out, "curve.json", canonical_json(rows))
    return EXIT_OK


def cmd_example62(cfg: dict, args) -> int:
    etas = [float(e) for e in cfg.get("eta", [0.0, 0.1, 0.5])]
    grid_n = int(cfg.get("grid_n", 801))
    tol = args.tol or DEFAULT_TOL
    try:
        ref = example62(0.0, grid_n)
    except ValueError as exc:
        raise InputError(f"grid_n: {exc}") from None
    spacing = 1.0 / (grid_n - 1)
    rows, ok = [], True
    for eta in etas:
        try:
            ex = example62(eta, grid_n)
        except ValueError as exc:
            raise InputError(f"eta: {exc}") from None
        start = time.perf_counter()
        pot = solve_dual(ex.p, ex.q, ex.cost, ex.eps, tol=tol)
        coup = extract_coupling(pot, ex.p, ex.q, ex.cost, require_converged=False)
        elapsed = time.perf_counter() - start
        row = {
            "eta": eta,
            "analytic_foc_residual": analytic_foc_residual(ex),
            "hausdorff_to_eta0": hausdorff_segments(ex.analytic_support_segments(),
                                                    ref.analytic_support_segments()),
            "h_linf_error": float(np.max(np.abs(pot.h() - ex.h))),
            "support_offset": support_offset(ex, coup.zeta > coup.support_tol),
            "converged": pot.converged,
            "seconds": elapsed,
        }
        row["pass"] = bool(pot.converged and row["analytic_foc_residual"] <= 1e-12
                           and row["h_linf_error"] <= 5e-3
                           and row["support_offset"] <= spacing * (1 + 1e-9)
                           and (eta == 0 or row["hausdorff_to_eta0"] == 0.25))
        ok &= row["pass"]
        rows.append(row)
        print(f"eta={eta:g} residual={row['analytic_foc_residual']:.1e} "
              f"dH={row['hausdorff_to_eta0']:g} h_err={row['h_linf_error']:.1e} "
              f"support_offset={row['support_offset']:.2e} pass={row['pass']}")
    if "json" in args.formats:
        _write(args.out, "example62.json", canonical_json({"grid_n": grid_n, "rows": rows}))
    if not all(r["converged"] for r in rows):
        return EXIT_NOCONV
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_verify(cfg: dict, args) -> int:
    params = load_params(cfg, args.base)
    pairs_cfg = cfg.get("pairs")
    if not pairs_cfg:
        raise InputError("config: missing field 'pairs'")
    pairs = []
    for k, item in enumerate(pairs_cfg):
        if "a" not in item or "b" not in item:
            raise InputError(f"pairs[{k}]: needs 'a' and 'b'")
        pairs.append((load_instance(item["a"], args.base, f"pairs[{k}].a"),
                      load_instance(item["b"], args.base, f"pairs[{k}].b")))
    override = cfg.get("constants_override") or {}
    cache = SolveCache(args.tol or float(cfg.get("tol", DEFAULT_TOL)))
    if override:
        # evaluate each pair against deliberately altered constants
        reports = []
        for a, b in pairs:
            try:
                consts = dataclasses.replace(instance_constants(a, params), **override)
            except TypeError as exc:
                raise InputError(f"constants_override: {exc}") from None
            reports.append(run_pair(a, b, params, cache, constants=consts))
    else:
        reports = run_pairs(pairs, params, jobs=args.jobs, cache=cache)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair", "check", "hypothesis", "lhs", "rhs", "ratio", "pass"])
    failed = []
    for k, rep in enumerate(reports):
        for c in rep.checks:
            writer.writerow([k, c.id, int(c.hypothesis), _num(c.lhs), _num(c.rhs),
                             _num(c.ratio), "" if c.passed is None else int(c.passed)])
        failed += [(k, c.id) for c in rep.failures]
    if "json" in args.formats:
        _write(args.out, "reports.json", canonical_json([r.to_dict() for r in reports]))
    if "csv" in args.formats:
        _write(args.out, "summary.csv", buf.getvalue())
    for k, cid in failed:
        print(f"FAILED pair {k}: {cid}", file=sys.stderr)
    print(f"{len(reports)} pairs, {len(failed)} failing checks")
    return EXIT_VIOLATION if failed else EXIT_OK


def _num(x) -> str:
    return "" if x is None else repr(float(x))


HANDLERS = {"solve": cmd_solve, "perturb": cmd_perturb, "constants": cmd_constants,
            "example62": cmd_example62, "verify": cmd_verify}


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qotlab",
                                 description="Quadratically regularized OT: solver and stability checks")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="JSON config document")
    ap.add_argument("--out", type=Path, default=Path("qotlab-out"), help="output directory")
    ap.add_argument("--jobs", type=int, default=1, help="parallel pairs in verify (default 1)")
    ap.add_argument("--tol", type=float, default=None, help="solver FOC tolerance")
    ap.add_argument("--format", default="json,csv", help="comma list from {json,csv}")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.formats = {f.strip() for f in args.format.split(",") if f.strip()}
        bad = args.formats - {"json", "csv"}
        if bad:
            raise InputError(f"--format: unknown format(s) {sorted(bad)}")
        if args.tol is not None and not args.tol > 0:
            raise InputError("--tol: must be positive")
        if args.jobs < 1:
            raise InputError("--jobs: must be >= 1")
        if args.config is None:
            cfg, args.base = {}, Path.cwd()
        else:
            cfg = _read_json(args.config)
            if not isinstance(cfg, dict):
                raise InputError("config: top level must be an object")
            args.base = args.config.parent
        return HANDLERS[args.command](cfg, args)
    except (InputError, MeasureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NotConvergedError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
