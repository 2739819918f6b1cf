"""Command-line surface: phantom generation through constraint compliance.

Subcommands mirror the pipeline stages: ``phantom`` (fixtures),
``preprocess``, ``register``, ``warp``, ``jacobian``, ``metrics``,
``map-dose``, ``accumulate``, ``dvh``, ``comply`` and ``stats``.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.  All
outputs are written atomically after the computation succeeds, so a failed
run leaves no partial files; report paths also render a PNG figure next to
the delimited/JSON output unless ``--no-plot`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .config import AppConfig, ConfigError, load_config
from .dose import (
    ConstraintResult,
    DoseConstraint,
    FractionRecord,
    accumulate,
    check_constraints,
    compliance_summary,
    dvh,
    map_dose,
)
from .field import DisplacementField, jacobian_determinant, warp_image, warp_labels
from .grid import GridGeometry, LabelVolume, ScalarVolume
from .metrics import evaluate_structures
from .nifti import NiftiError, read_nifti, write_nifti
from .phantom import (
    DeformSpec,
    PhantomSpec,
    RetryBoundExceeded,
    make_course,
    make_registration_pair,
)
from .register import register_pair, register_rigid
from .stats import wilcoxon_rank_sum, wilcoxon_signed_rank
from . import reports


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}error: {message}")


class StagedOutputs:
    """Collects output writers; everything is renamed into place only after
    the whole command has succeeded."""

    def __init__(self):
        self._items = []

    def stage(self, path: str, write_fn):
        tmp = path + ".staged"
        write_fn(tmp)
        self._items.append((tmp, path))

    def commit(self):
        for tmp, path in self._items:
            os.replace(tmp, path)

    def cleanup(self):
        for tmp, _ in self._items:
            if os.path.exists(tmp):
                os.unlink(tmp)


def _run_staged(fn):
    def wrapper(args):
        staged = StagedOutputs()
        try:
            code = fn(args, staged)
        except BaseException:
            staged.cleanup()
            raise
        if code == 0:
            staged.commit()
        else:
            staged.cleanup()
        return code
    return wrapper


def _read_scalar(path: str) -> ScalarVolume:
    obj = read_nifti(path)
    if not isinstance(obj, ScalarVolume):
        raise NiftiError("bad-dim", f"{path}: expected a scalar volume, "
                         f"got {type(obj).__name__}")
    return obj


def _read_labels(path: str) -> LabelVolume:
    obj = read_nifti(path)
    if not isinstance(obj, LabelVolume):
        raise NiftiError("bad-dim", f"{path}: expected a label volume "
                         f"(uint8), got {type(obj).__name__}")
    return obj


def _read_field(path: str) -> DisplacementField:
    obj = read_nifti(path)
    if not isinstance(obj, DisplacementField):
        raise NiftiError("bad-dim", f"{path}: expected a displacement field, "
                         f"got {type(obj).__name__}")
    return obj


def _png_sibling(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".png"


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

@_run_staged
def _cmd_phantom(args, staged):
    geometry = GridGeometry(tuple(args.dims), tuple(args.spacing))
    spec = PhantomSpec.default(geometry, seed=args.seed,
                               noise_sigma=args.noise_sigma,
                               bias_amplitude=args.bias_amplitude)
    deform = DeformSpec(seed=args.seed, n_bumps=args.bumps,
                        bump_amplitude_mm=args.bump_amplitude,
                        max_peak_mm=args.max_peak)
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = {
        "seed": args.seed,
        "dims": list(geometry.dims),
        "spacing_mm": list(geometry.spacing),
        "noise_sigma": args.noise_sigma,
        "bias_amplitude": args.bias_amplitude,
        "bump_amplitude_mm": args.bump_amplitude,
        "max_peak_mm": args.max_peak,
        "files": {},
    }

    def out(name):
        return os.path.join(args.out_dir, name)

    if args.fractions:
        course = make_course(spec, args.fractions,
                             fraction_dose_gy=args.fraction_dose,
                             deform=deform)
        staged.stage(out("reference.nii"),
                     lambda p: write_nifti(course.reference_image, p))
        staged.stage(out("reference_labels.nii"),
                     lambda p: write_nifti(course.reference_labels, p))
        manifest["fractions"] = args.fractions
        manifest["fraction_dose_gy"] = args.fraction_dose
        manifest["files"]["reference"] = "reference.nii"
        manifest["files"]["reference_labels"] = "reference_labels.nii"
        for rec, img, lab in zip(course.records, course.fraction_images,
                                 course.fraction_labels):
            i = rec.index
            names = {f"fraction_{i}": img, f"fraction_{i}_labels": lab,
                     f"fraction_{i}_dose": rec.dose,
                     f"fraction_{i}_field": rec.field_to_fraction}
            for stem, obj in names.items():
                staged.stage(out(stem + ".nii"),
                             lambda p, o=obj: write_nifti(o, p))
                manifest["files"][stem] = stem + ".nii"
    else:
        pair = make_registration_pair(spec, deform)
        for stem, obj in (("moving", pair.moving_image),
                          ("moving_labels", pair.moving_labels),
                          ("fixed", pair.fixed_image),
                          ("fixed_labels", pair.fixed_labels),
                          ("true_field", pair.true_field)):
            staged.stage(out(stem + ".nii"),
                         lambda p, o=obj: write_nifti(o, p))
            manifest["files"][stem] = stem + ".nii"
    staged.stage(out("manifest.json"),
                 lambda p: reports.write_json(p, manifest))
    return 0


@_run_staged
def _cmd_preprocess(args, staged):
    from .register import preprocess_pair

    target = GridGeometry(tuple(args.dims), tuple(args.spacing),
                          tuple(args.origin))
    pre = preprocess_pair(_read_scalar(args.moving), _read_scalar(args.fixed),
                          _read_labels(args.moving_labels),
                          _read_labels(args.fixed_labels), target,
                          args.lo_pct, args.hi_pct)
    os.makedirs(args.out_dir, exist_ok=True)
    for stem, obj in (("moving", pre.moving), ("fixed", pre.fixed),
                      ("moving_labels", pre.moving_labels),
                      ("fixed_labels", pre.fixed_labels)):
        staged.stage(os.path.join(args.out_dir, stem + ".nii"),
                     lambda p, o=obj: write_nifti(o, p))
    if pre.moving_degenerate or pre.fixed_degenerate:
        print("warning: degenerate intensity window, output zeroed",
              file=sys.stderr)
    return 0


@_run_staged
def _cmd_register(args, staged):
    cfg = load_config(args.config)
    moving = _read_scalar(args.moving)
    fixed = _read_scalar(args.fixed)
    moving_labels = _read_labels(args.moving_labels)
    fixed_labels = _read_labels(args.fixed_labels)
    result = register_pair(moving, fixed, moving_labels, fixed_labels,
                           cfg.weights, cfg.registration)
    structures = evaluate_structures(result.warped_labels, fixed_labels)
    doc = reports.register_report(result, cfg.echo(),
                                  extra={"structures": structures})
    staged.stage(args.out_field,
                 lambda p: write_nifti(result.final_field, p))
    if args.out_warped:
        staged.stage(args.out_warped,
                     lambda p: write_nifti(result.warped_image, p))
    if args.out_warped_labels:
        staged.stage(args.out_warped_labels,
                     lambda p: write_nifti(result.warped_labels, p))
    if args.out_report:
        staged.stage(args.out_report, lambda p: reports.write_json(p, doc))
        if not args.no_plot:
            from .plots import plot_loss_trace
            staged.stage(_png_sibling(args.out_report),
                         lambda p: plot_loss_trace(result.per_step_loss, p))
    return 0


@_run_staged
def _cmd_rigid(args, staged):
    field = register_rigid(_read_scalar(args.moving), _read_scalar(args.fixed))
    staged.stage(args.out_field, lambda p: write_nifti(field, p))
    return 0


@_run_staged
def _cmd_warp(args, staged):
    field = _read_field(args.field)
    if args.labels:
        warped = warp_labels(_read_labels(args.input), field)
    else:
        warped = warp_image(_read_scalar(args.input), field)
    staged.stage(args.out, lambda p: write_nifti(warped, p))
    return 0


@_run_staged
def _cmd_jacobian(args, staged):
    field = _read_field(args.field)
    jac = jacobian_determinant(field)
    staged.stage(args.out, lambda p: write_nifti(jac, p))
    if args.plot:
        from .plots import plot_field_maps
        staged.stage(args.plot, lambda p: plot_field_maps(field, p))
    return 0


@_run_staged
def _cmd_metrics(args, staged):
    pred = _read_labels(args.pred)
    truth = _read_labels(args.truth)
    cfg = load_config(args.config)
    doc = reports.metrics_report(
        evaluate_structures(pred, truth, tuple(args.structures)), cfg.echo())
    staged.stage(args.out, lambda p: reports.write_json(p, doc))
    return 0


@_run_staged
def _cmd_map_dose(args, staged):
    dose = _read_scalar(args.dose)
    field = _read_field(args.field)
    mapped = map_dose(FractionRecord(args.fraction_index, dose, field),
                      field.geometry)
    staged.stage(args.out, lambda p: write_nifti(mapped, p))
    return 0


@_run_staged
def _cmd_accumulate(args, staged):
    doses = [_read_scalar(p) for p in args.doses]
    total = accumulate(doses)
    staged.stage(args.out, lambda p: write_nifti(total, p))
    return 0


@_run_staged
def _cmd_dvh(args, staged):
    curve = dvh(_read_scalar(args.dose), _read_labels(args.labels),
                args.structure, args.bin_width)
    staged.stage(args.out,
                 lambda p: reports.write_text_atomic(p, reports.dvh_csv(curve)))
    if not args.no_plot:
        from .plots import plot_dvh
        staged.stage(_png_sibling(args.out), lambda p: plot_dvh([curve], p))
    return 0


def _constraint_results_from_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("report") != "constraints":
        raise ValueError(f"{path}: not a constraint report")
    out = []
    for row in doc["constraints"]:
        c = DoseConstraint(row["id"], row["structure"], row["metric"],
                           row["op"], row["limit"])
        out.append(ConstraintResult(c, row["achieved"], row["pass"]))
    return out


@_run_staged
def _cmd_comply(args, staged):
    cfg = load_config(args.config)
    if args.summarize:
        per_patient = [_constraint_results_from_json(p) for p in args.summarize]
        rates = compliance_summary(per_patient)
        doc = reports.compliance_report(rates, len(per_patient), cfg.echo())
        staged.stage(args.out, lambda p: reports.write_json(p, doc))
        if not args.no_plot:
            from .plots import plot_compliance
            staged.stage(_png_sibling(args.out),
                         lambda p: plot_compliance(rates, p))
        return 0
    if not (args.dose and args.labels):
        raise UsageError("comply requires --dose and --labels "
                         "(or --summarize report files)")
    results = check_constraints(_read_scalar(args.dose),
                                _read_labels(args.labels), cfg.constraints)
    doc = reports.constraint_report(results, cfg.echo())
    staged.stage(args.out, lambda p: reports.write_json(p, doc))
    return 0


def _read_csv_columns(path: str, names):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        for name in names:
            if name not in reader.fieldnames:
                raise ValueError(f"{path}: no column '{name}' "
                                 f"(have {reader.fieldnames})")
        cols = {name: [] for name in names}
        for row in reader:
            for name in names:
                cell = row[name]
                if cell is None or cell.strip() == "":
                    raise ValueError(f"{path}: blank cell in column '{name}'")
                cols[name].append(float(cell))
    return [np.array(cols[name]) for name in names]


@_run_staged
def _cmd_stats(args, staged):
    cfg = load_config(args.config)
    a, b = _read_csv_columns(args.csv, [args.col_a, args.col_b])
    if args.paired:
        result = wilcoxon_signed_rank(a, b)
        test = "wilcoxon-signed-rank"
    else:
        result = wilcoxon_rank_sum(a, b)
        test = "wilcoxon-rank-sum"
    doc = reports.stats_report(result, {
        "test": test, "csv": os.path.basename(args.csv),
        "col_a": args.col_a, "col_b": args.col_b,
        "n_a": int(a.size), "n_b": int(b.size),
    }, cfg.echo())
    staged.stage(args.out, lambda p: reports.write_json(p, doc))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dosewarp",
                     description="progressive deformable registration and "
                                 "dose accumulation toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", help="generate synthetic fixtures")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=[48, 48, 32],
                   metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, nargs=3, default=[2.0, 2.0, 2.0],
                   metavar=("SX", "SY", "SZ"))
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--bias-amplitude", type=float, default=0.10)
    p.add_argument("--bumps", type=int, default=3)
    p.add_argument("--bump-amplitude", type=float, default=6.0)
    p.add_argument("--max-peak", type=float, default=8.0)
    p.add_argument("--fractions", type=int, default=0,
                   help="emit an n-fraction course instead of a pair")
    p.add_argument("--fraction-dose", type=float, default=8.0)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("preprocess", help="resample and normalize a pair")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving-labels", required=True)
    p.add_argument("--fixed-labels", required=True)
    p.add_argument("--dims", type=int, nargs=3, required=True)
    p.add_argument("--spacing", type=float, nargs=3, required=True)
    p.add_argument("--origin", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--lo-pct", type=float, default=10.0)
    p.add_argument("--hi-pct", type=float, default=90.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("register", help="progressive deformable registration")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving-labels", required=True)
    p.add_argument("--fixed-labels", required=True)
    p.add_argument("--config")
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-warped")
    p.add_argument("--out-warped-labels")
    p.add_argument("--out-report")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("rigid", help="translation-only baseline registration")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out-field", required=True)
    p.set_defaults(func=_cmd_rigid)

    p = sub.add_parser("warp", help="apply a displacement field")
    p.add_argument("--input", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", action="store_true",
                   help="nearest-neighbor warp of a label volume")
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("jacobian", help="Jacobian determinant of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="also render Jacobian/magnitude maps (PNG)")
    p.set_defaults(func=_cmd_jacobian)

    p = sub.add_parser("metrics", help="DSC/HD95/MDA between label volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--structures", nargs="+",
                   default=["bladder", "rectum", "ctv", "urethra"])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("map-dose", help="pull a fraction dose onto the reference")
    p.add_argument("--dose", required=True)
    p.add_argument("--field", required=True,
                   help="reference-to-fraction displacement field")
    p.add_argument("--fraction-index", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_map_dose)

    p = sub.add_parser("accumulate", help="sum co-located dose volumes")
    p.add_argument("--doses", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_accumulate)

    p = sub.add_parser("dvh", help="cumulative DVH for one structure (CSV)")
    p.add_argument("--dose", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--structure", required=True)
    p.add_argument("--bin-width", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=_cmd_dvh)

    p = sub.add_parser("comply", help="institutional constraint compliance")
    p.add_argument("--dose")
    p.add_argument("--labels")
    p.add_argument("--config")
    p.add_argument("--summarize", nargs="+", metavar="REPORT",
                   help="combine per-patient constraint reports into rates")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=_cmd_comply)

    p = sub.add_parser("stats", help="paired/unpaired Wilcoxon over CSV columns")
    p.add_argument("--csv", required=True)
    p.add_argument("--col-a", required=True)
    p.add_argument("--col-b", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--paired", action="store_true")
    mode.add_argument("--unpaired", action="store_true")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (RetryBoundExceeded, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (NiftiError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
