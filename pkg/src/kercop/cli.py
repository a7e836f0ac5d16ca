"""Command-line interface: ``kercop <command> ...``.

Errors are reported on stderr as one line starting with ``kercop-error:``
followed by the error class name, and the process exits with status 2.
"""

import argparse
import csv
import sys
import warnings

import numpy as np

from kercop import bench, model, modelfile
from kercop import estimators as est
from kercop import splinegrid as sg
from kercop.errors import DomainError, InvalidParameterError, KercopError
from kercop.numcore import ranks_to_pseudo
from kercop.plot import KINDS, PlotSpec, make_plot

ERROR_PREFIX = "kercop-error:"

METHOD_NAMES = {
    est.Method.MR: "Mirror-reflection",
    est.Method.BETA: "Beta kernels",
    est.Method.T: "Transformation estimator",
    est.Method.TLL1: "Transformation local likelihood, log-linear",
    est.Method.TLL2: "Transformation local likelihood, log-quadratic",
    est.Method.TLL1NN: "Transformation local likelihood, log-linear (nearest-neighbor)",
    est.Method.TLL2NN: "Transformation local likelihood, log-quadratic (nearest-neighbor)",
}


class CliError(KercopError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def read_csv(path, cols=(0, 1)):
    """Read a headered numeric CSV and return the selected columns."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise CliError(f"{path}: expected a header line and at least one data row")
    header, body = rows[0], rows[1:]
    width = len(header)
    if max(cols) >= width:
        raise CliError(f"{path}: has {width} columns, column {max(cols) + 1} requested")
    out = np.empty((len(body), len(cols)))
    for r, row in enumerate(body):
        for c_out, c in enumerate(cols):
            cell = row[c].strip() if c < len(row) else ""
            try:
                out[r, c_out] = float(cell)
            except ValueError:
                raise CliError(
                    f"{path}: non-numeric cell {cell!r} at row {r + 1}, column {c + 1} ({header[c].strip()})"
                ) from None
    return out


def write_csv(path, header, columns):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(x)) for x in row])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _parse_list(text, conv=str):
    return [conv(t) for t in text.split(",") if t.strip()]


def _fmt_matrix(m):
    return "matrix(c({}), 2, 2)".format(", ".join(f"{x:.4g}" for x in np.asarray(m).T.ravel()))


def format_summary(f, tau=None):
    bw = f.bandwidth
    tau = model.kendall_tau_quadrature(f) if tau is None else tau
    lines = [
        f"Kernel copula density estimate (tau = {tau:.2f})",
        "-" * 30,
        f"Observations: {f.n}",
        f"Method:       {METHOD_NAMES[f.method]} ('{f.method.value}')",
    ]
    if bw.scalar_b is not None:
        lines.append(f"Bandwidth:    b = {bw.scalar_b:.7g}")
    elif bw.nn_alpha is not None:
        lines.append(f"Bandwidth:    alpha = {bw.nn_alpha:.7g}")
        lines.append(f"              B = {_fmt_matrix(bw.shape)}")
    else:
        lines.append(f"Bandwidth:    B = {_fmt_matrix(bw.matrix_B)}")
    if bw.mult != 1.0:
        lines.append(f"              mult = {bw.mult:g}")
    lines.append(f"Renormalization iterations: {f.renorm_iters}")
    lines.append("---")
    try:
        st = model.fit_stats(f)
        lines.append(
            f"logLik: {st['loglik']:.2f}    AIC: {st['aic']:.2f}    "
            f"cAIC: {st['caic']:.2f}    BIC: {st['bic']:.2f}"
        )
    except InvalidParameterError as exc:
        lines.append(f"logLik: {f.loglik:.2f}    (information criteria unavailable: {exc})")
    lines.append(f"Effective number of parameters: {f.edf:.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args):
    cols = tuple(int(c) - 1 for c in _parse_list(args.cols)) if args.cols else (0, 1)
    if len(cols) != 2 or min(cols) < 0:
        raise CliError("--cols takes two 1-based column numbers, e.g. 1,2")
    data = read_csv(args.input, cols)
    if args.ranks:
        data = ranks_to_pseudo(data)
    elif np.any((data <= 0.0) | (data >= 1.0)):
        raise DomainError("data must lie strictly inside (0, 1); rerun with --ranks to rank-transform it")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        f = model.fit(
            data,
            method=args.method,
            knots=args.knots,
            mult=args.mult,
            renorm_iters=args.renorm_iter,
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    modelfile.save(f, args.output)
    print(format_summary(f))
    return 0


def cmd_summary(args):
    print(format_summary(modelfile.load(args.model)))
    return 0


def cmd_eval(args):
    f = modelfile.load(args.model)
    pts = read_csv(args.points)
    if args.what == "density":
        vals = model.density(f, pts)
    elif args.what == "cdf":
        vals = model.cdf(f, pts)
    else:
        sg._check_points(pts)
        vals = model.hfunc(f, pts[:, 1], pts[:, 0])
    write_csv(args.output, ["u", "v", args.what], [pts[:, 0], pts[:, 1], vals])
    return 0


def cmd_sample(args):
    f = modelfile.load(args.model)
    x = model.simulate(f, args.n, quasi=args.quasi, seed=args.seed)
    write_csv(args.output, ["u", "v"], [x[:, 0], x[:, 1]])
    return 0


def cmd_measures(args):
    f = modelfile.load(args.model)
    rep = model.dep_measures(f, n_qmc=args.n_qmc, seed=args.seed)
    d = rep.as_dict()
    names = [k for k in d if k != "samples_used"]
    print("".join(f"{k:>11}" for k in names))
    print("".join(f"{d[k]:>11.7f}" for k in names))
    print(f"(quasi-Monte Carlo, {rep.samples_used} points)")
    return 0


def cmd_plot(args):
    f = modelfile.load(args.model)
    levels = None
    if args.levels is not None:
        levels = _parse_list(args.levels, float)
    if not args.svg and not args.grid_csv:
        raise CliError("nothing to write: give --svg and/or --grid-csv")
    spec = PlotSpec(args.kind, args.resolution, levels, args.svg, args.grid_csv)
    _, _, _, lv = make_plot(f, spec)
    print("levels: " + ", ".join(f"{x:.6g}" for x in lv))
    return 0


def cmd_bench(args):
    scen = bench.scenario_matrix(
        _parse_list(args.families),
        _parse_list(args.taus, float),
        _parse_list(args.n, int),
    )
    methods = _parse_list(args.methods)
    seeds = [args.seed + r for r in range(args.reps)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", est.TLLConvergenceWarning)
        results = bench.run_study(scen, methods, reps=args.reps, seeds=seeds, workers=args.workers)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        bench.write_results_csv(results, fh, timing=args.timing)
    text = bench.format_summary(results)
    if args.summary:
        with open(args.summary, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser():
    p = _Parser(prog="kercop", description="Kernel copula density estimation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    methods = ", ".join(m.value for m in est.Method)

    q = sub.add_parser("fit", help="estimate a copula density from a CSV file")
    q.add_argument("input")
    q.add_argument("--method", default="TLL2NN", help=f"one of {methods} (default TLL2NN)")
    q.add_argument("--knots", type=int, default=sg.DEFAULT_KNOTS)
    q.add_argument("--mult", type=float, default=1.0)
    q.add_argument("--renorm-iter", type=int, default=sg.DEFAULT_RENORM_ITERS)
    q.add_argument("--ranks", action="store_true", help="rank-transform the data to pseudo-observations")
    q.add_argument("--cols", help="two 1-based column numbers (default 1,2)")
    q.add_argument("--seed", type=int, default=0, help="accepted for symmetry; fitting is deterministic")
    q.add_argument("--output", "-o", required=True)
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("summary", help="print the fit statistics stored in a model file")
    q.add_argument("model")
    q.set_defaults(func=cmd_summary)

    q = sub.add_parser("eval", help="evaluate density, cdf or h-function at points from a CSV")
    q.add_argument("model")
    q.add_argument("points")
    q.add_argument("--what", choices=("density", "cdf", "hfunc"), default="density")
    q.add_argument("--output", "-o", default="-")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("sample", help="simulate from a fitted model")
    q.add_argument("model")
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--quasi", action="store_true")
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--output", "-o", default="-")
    q.set_defaults(func=cmd_sample)

    q = sub.add_parser("measures", help="dependence measures of a fitted model")
    q.add_argument("model")
    q.add_argument("--n-qmc", type=int, default=10_000)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_measures)

    q = sub.add_parser("plot", help="surface or contour plot as SVG and/or grid CSV")
    q.add_argument("model")
    q.add_argument("--kind", choices=KINDS, default="contour")
    q.add_argument("--resolution", type=int, default=100)
    q.add_argument("--levels", help="comma-separated contour levels (default 0.1..0.9 of the maximum)")
    q.add_argument("--svg")
    q.add_argument("--grid-csv")
    q.set_defaults(func=cmd_plot)

    q = sub.add_parser("bench", help="run the simulation study")
    q.add_argument("--families", default=",".join(bench.DEFAULT_FAMILIES))
    q.add_argument("--taus", default=",".join(map(str, bench.DEFAULT_TAUS)))
    q.add_argument("--n", default=",".join(map(str, bench.DEFAULT_SIZES)))
    q.add_argument("--reps", type=int, default=bench.DEFAULT_REPS)
    q.add_argument("--methods", default=",".join(m.value for m in est.Method))
    q.add_argument("--seed", type=int, default=0, help="replicate r uses seed + r")
    q.add_argument("--out", required=True, help="results CSV")
    q.add_argument("--summary", help="also write the summary table to this file")
    q.add_argument("--workers", type=int, default=1, help="run replicates in this many processes")
    q.add_argument("--timing", action="store_true", help="add a wall-time column (breaks byte-reproducibility)")
    q.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (KercopError, ValueError, ArithmeticError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{ERROR_PREFIX} {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
