"""Plain-text persistence of fitted models.

The file is line oriented: a magic line, ``key=value`` records and the
knot and field arrays as whitespace-separated decimals with 17 significant
digits, which round-trips every double exactly.
"""

import numpy as np

from kercop import estimators as est
from kercop import splinegrid as sg
from kercop.errors import KercopError, ModelFormatError
from kercop.model import FittedCopula

MAGIC = "KERCOP-MODEL"
FORMAT_VERSION = 1


def _num(x):
    return format(float(x), ".17g")


def _arr(a):
    return " ".join(_num(x) for x in np.ravel(a))


def dumps(f):
    """Serialize a :class:`FittedCopula` to text."""
    bw = f.bandwidth
    lines = [
        MAGIC,
        f"format_version={FORMAT_VERSION}",
        f"method={f.method.value}",
        f"n={f.n}",
        f"renorm_iters={f.renorm_iters}",
        f"loglik={_num(f.loglik)}",
        f"edf={_num(f.edf)}",
        f"tll_failures={f.tll_failures}",
        f"bw.mult={_num(bw.mult)}",
        f"bw.scalar_b={'' if bw.scalar_b is None else _num(bw.scalar_b)}",
        f"bw.matrix_B={'' if bw.matrix_B is None else _arr(bw.matrix_B)}",
        f"bw.nn_alpha={'' if bw.nn_alpha is None else _num(bw.nn_alpha)}",
        f"bw.shape={'' if bw.shape is None else _arr(bw.shape)}",
        f"knots={_arr(f.knots.knots)}",
        f"values={_arr(f.field.values)}",
    ]
    return "\n".join(lines) + "\n"


def _parse_records(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ModelFormatError("not a kercop model file (missing magic line)")
    rec = {}
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ModelFormatError(f"line {no}: expected key=value")
        rec[key.strip()] = value.strip()
    return rec


def _floats(text, key):
    try:
        return np.array([float(t) for t in text.split()], dtype=float)
    except ValueError:
        raise ModelFormatError(f"field {key!r} holds a non-numeric entry") from None


def loads(text):
    """Inverse of :func:`dumps`.

    Raises
    ------
    ModelFormatError
        On a missing magic line, an unsupported format version or any
        missing or malformed record.
    """
    rec = _parse_records(text)
    try:
        version = int(rec["format_version"])
    except (KeyError, ValueError):
        raise ModelFormatError("missing or malformed format_version") from None
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format_version {version} (this build reads {FORMAT_VERSION})"
        )
    try:
        method = est.Method.parse(rec["method"])

        def opt_scalar(key):
            return float(rec[key]) if rec[key] else None

        def opt_matrix(key):
            return _floats(rec[key], key).reshape(2, 2) if rec[key] else None

        bw = est.BandwidthSpec(
            scalar_b=opt_scalar("bw.scalar_b"),
            matrix_B=opt_matrix("bw.matrix_B"),
            nn_alpha=opt_scalar("bw.nn_alpha"),
            shape=opt_matrix("bw.shape"),
            mult=float(rec["bw.mult"]),
        ).check_for(method)
        knots = sg.KnotVector(_floats(rec["knots"], "knots"))
        values = _floats(rec["values"], "values")
        if values.size != knots.m**2:
            raise ModelFormatError(f"values holds {values.size} entries, expected {knots.m ** 2}")
        field = sg.SplineField(knots, values.reshape(knots.m, knots.m))
        return FittedCopula(
            method=method,
            bandwidth=bw,
            field=field,
            n=int(rec["n"]),
            loglik=float(rec["loglik"]),
            edf=float(rec["edf"]),
            renorm_iters=int(rec["renorm_iters"]),
            tll_failures=int(rec.get("tll_failures", "0")),
        )
    except KeyError as exc:
        raise ModelFormatError(f"missing field {exc.args[0]!r}") from None
    except ModelFormatError:
        raise
    except (KercopError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from None


def save(f, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(f))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
