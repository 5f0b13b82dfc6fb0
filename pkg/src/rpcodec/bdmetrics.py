"""Bjontegaard-delta rate and quality over arbitrary metrics.

Curves are fitted with PCHIP by default (a cubic polynomial is available for
cross-checks) and averaged with composite Simpson quadrature.  Curves whose
quality does not improve monotonically with rate are cut down to their
longest strictly monotone run before any BD number is computed, and the
result carries warnings naming the excluded points.

Sign conventions: a negative BD-rate means the test system needs less rate
for the same quality.  BD-quality is ``test - anchor``; for lower-is-better
metrics negative is an improvement, for higher-is-better positive is.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import PchipInterpolator

from .errors import (
    ConfigurationError,
    MonotonicityError,
    NoOverlapError,
    NumericalFailureError,
    SchemaError,
    ValidationError,
)

ORIENTATIONS = ("higher_better", "lower_better")
AXES = ("quality_of_lograte", "lograte_of_quality")
METHODS = ("pchip", "cubic_poly")
CSV_COLUMNS = ("codec_id", "task_id", "metric", "orientation", "bpp", "quality")

MIN_PANELS = 10_000
MAX_PANELS = 2**22
QUAD_RTOL = 1e-9
LOW_OVERLAP_FRACTION = 0.10


@dataclass(frozen=True)
class RPCurve:
    """Rate-perception points for one codec, task and metric, sorted by bpp."""

    bpp: tuple
    quality: tuple
    metric_name: str = "quality"
    orientation: str = "higher_better"
    codec_id: str = ""
    task_id: str = ""

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ValidationError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        bpp = np.asarray(self.bpp, dtype=np.float64).ravel()
        q = np.asarray(self.quality, dtype=np.float64).ravel()
        if bpp.size != q.size:
            raise ValidationError("bpp and quality must have the same number of points")
        if bpp.size < 2:
            raise ValidationError(f"curve {self.label} needs at least 2 points, got {bpp.size}")
        if not np.all(np.isfinite(bpp)) or np.any(bpp <= 0):
            raise ValidationError(f"curve {self.label}: bpp values must be finite and > 0")
        if not np.all(np.isfinite(q)):
            raise ValidationError(f"curve {self.label}: quality values must be finite")
        order = np.argsort(bpp, kind="stable")
        bpp, q = bpp[order], q[order]
        dup = np.nonzero(np.diff(bpp) == 0)[0]
        if dup.size:
            raise ValidationError(f"curve {self.label}: duplicate bpp value {bpp[dup[0]]!r}")
        object.__setattr__(self, "bpp", tuple(bpp.tolist()))
        object.__setattr__(self, "quality", tuple(q.tolist()))

    @classmethod
    def from_points(cls, points, **kw):
        points = list(points)
        return cls(tuple(p[0] for p in points), tuple(p[1] for p in points), **kw)

    @property
    def label(self):
        return f"{self.codec_id or '?'}/{self.task_id or '?'}/{self.metric_name}"

    @property
    def points(self):
        return list(zip(self.bpp, self.quality))

    def __len__(self):
        return len(self.bpp)

    def oriented(self):
        """Quality with the sign flipped for lower-is-better metrics."""
        q = np.asarray(self.quality)
        return q if self.orientation == "higher_better" else -q

    def subset(self, start, stop):
        return RPCurve(
            self.bpp[start:stop], self.quality[start:stop], self.metric_name,
            self.orientation, self.codec_id, self.task_id,
        )

    def scaled(self, rate_factor):
        return RPCurve(
            tuple(b * rate_factor for b in self.bpp), self.quality, self.metric_name,
            self.orientation, self.codec_id, self.task_id,
        )

    def to_dict(self):
        return {
            "codec_id": self.codec_id,
            "task_id": self.task_id,
            "metric": self.metric_name,
            "orientation": self.orientation,
            "points": [{"bpp": b, "quality": q} for b, q in self.points],
        }

    @classmethod
    def from_dict(cls, d):
        pts = d["points"]
        return cls(
            tuple(p["bpp"] for p in pts), tuple(p["quality"] for p in pts),
            d.get("metric", "quality"), d.get("orientation", "higher_better"),
            d.get("codec_id", ""), d.get("task_id", ""),
        )


@dataclass(frozen=True)
class TurningPoint:
    index: int
    direction: str  # movement of the raw quality value: "down" or "up"


@dataclass
class MonotonicityReport:
    turning_points: list = field(default_factory=list)
    zero_slope: list = field(default_factory=list)

    @property
    def monotone(self):
        return not self.turning_points and not self.zero_slope

    def to_dict(self):
        return {
            "turning_points": [{"index": t.index, "direction": t.direction} for t in self.turning_points],
            "zero_slope": list(self.zero_slope),
        }


def monotonicity_report(curve):
    """Points where oriented quality gets strictly worse as bpp grows.

    Index ``i`` is reported when point ``i`` is worse than point ``i - 1``.
    Equal consecutive qualities are listed under ``zero_slope`` instead.
    """
    q = curve.oriented()
    d = np.diff(q)
    raw = "down" if curve.orientation == "higher_better" else "up"
    tps = [TurningPoint(int(i + 1), raw) for i in np.nonzero(d < 0)[0]]
    flat = [int(i + 1) for i in np.nonzero(d == 0)[0]]
    return MonotonicityReport(tps, flat)


def longest_monotone_run(curve):
    """``(start, stop)`` of the longest strictly monotone run of oriented quality.

    Ties prefer an improving run, then the earliest.  Raises
    :class:`MonotonicityError` if no two consecutive points differ.
    """
    s = np.sign(np.diff(curve.oriented()))
    best = None
    i = 0
    while i < s.size:
        if s[i] == 0:
            i += 1
            continue
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        key = (j - i + 1, 1 if s[i] > 0 else 0, -i)
        if best is None or key > best[0]:
            best = (key, i, j + 2)
        i = j + 1
    if best is None:
        raise MonotonicityError(f"curve {curve.label} has no monotone segment", monotonicity_report(curve))
    return best[1], best[2]


class Interpolant:
    """Callable fit over ``[lo, hi]`` of the curve's own abscissa."""

    def __init__(self, fn, lo, hi, axis, method, knots=()):
        self._fn = fn
        self.lo, self.hi = float(lo), float(hi)
        self.axis, self.method = axis, method
        self.knots = tuple(float(k) for k in knots)

    def __call__(self, x):
        return self._fn(np.asarray(x, dtype=np.float64))


def _axis_data(curve, axis):
    logr = np.log10(np.asarray(curve.bpp))
    q = np.asarray(curve.quality)
    if axis == "quality_of_lograte":
        return logr, q
    if axis == "lograte_of_quality":
        return q, logr
    raise ValidationError(f"axis must be one of {AXES}, got {axis!r}")


def fit_curve(curve, axis="lograte_of_quality", method="pchip"):
    if method not in METHODS:
        raise ValidationError(f"method must be one of {METHODS}, got {method!r}")
    x, y = _axis_data(curve, axis)
    if axis == "lograte_of_quality":
        d = np.diff(x)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise MonotonicityError(
                f"curve {curve.label}: quality is not strictly monotone in rate; "
                "split it into a monotone segment first",
                monotonicity_report(curve),
            )
        if d[0] < 0:
            x, y = x[::-1], y[::-1]
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        try:
            if method == "pchip":
                fn = PchipInterpolator(x, y, extrapolate=False)
                knots = x
            else:
                fn = Polynomial.fit(x, y, deg=min(3, x.size - 1))
                knots = ()
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise NumericalFailureError(f"curve {curve.label}: {method} fit failed ({exc})") from None
    return Interpolant(fn, x.min(), x.max(), axis, method, knots)


def _simpson(fn, lo, hi, n):
    x = np.linspace(lo, hi, n + 1)
    y = fn(x)
    h = (hi - lo) / n
    return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())


def integrate(fn, lo, hi, min_panels=MIN_PANELS, rtol=QUAD_RTOL):
    """Composite Simpson on ``[lo, hi]``, doubling panels until converged.

    The range is split at the interpolant's knots (if it has any), so a
    piecewise cubic is integrated exactly per piece.  Panels are shared out
    in proportion to piece length.  Convergence is judged against the
    integral of ``|fn|``, which keeps near-zero integrals from doubling
    forever.
    """
    if hi <= lo:
        return 0.0
    inner = sorted(k for k in getattr(fn, "knots", ()) if lo < k < hi)
    edges = [lo, *inner, hi]
    base = int(min_panels)

    def total(scale):
        val = mag = 0.0
        for a, b in zip(edges, edges[1:]):
            n = max(2, int(math.ceil(base * scale * (b - a) / (hi - lo))))
            n += n % 2
            val += _simpson(fn, a, b, n)
            mag += _simpson(lambda z: np.abs(fn(z)), a, b, n)
        return val, mag

    scale = 1
    prev, _ = total(scale)
    while base * scale < MAX_PANELS:
        scale *= 2
        cur, mag = total(scale)
        if abs(cur - prev) <= rtol * max(mag, 1e-300):
            return float(cur)
        prev = cur
    return float(prev)


@dataclass
class BDResult:
    bd_rate_percent: float | None = None
    bd_quality_delta: float | None = None
    overlap: tuple | None = None
    overlap_axis: str = ""
    orientation: str = "higher_better"
    metric_name: str = ""
    method: str = "pchip"
    anchor_id: str = ""
    test_id: str = ""
    warnings: list = field(default_factory=list)

    @property
    def improved(self):
        """Whether the test system beats the anchor by this result's sign rule."""
        if self.bd_rate_percent is not None:
            return self.bd_rate_percent < 0
        if self.bd_quality_delta is None:
            return None
        if self.orientation == "lower_better":
            return self.bd_quality_delta < 0
        return self.bd_quality_delta > 0

    def to_dict(self):
        d = dict(self.__dict__)
        d["overlap"] = list(self.overlap) if self.overlap is not None else None
        d["warnings"] = list(self.warnings)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("overlap") is not None:
            d["overlap"] = tuple(d["overlap"])
        return cls(**d)


def _check_pair(anchor, test):
    if anchor.metric_name != test.metric_name:
        raise ConfigurationError(f"metric mismatch: {anchor.metric_name!r} vs {test.metric_name!r}")
    if anchor.orientation != test.orientation:
        raise ConfigurationError(f"orientation mismatch for metric {anchor.metric_name!r}")


def _prepare(curve, role, warnings):
    """Return the curve (or its longest monotone run) and append warnings."""
    report = monotonicity_report(curve)
    if report.monotone:
        return curve
    start, stop = longest_monotone_run(curve)
    excluded = [i for i in range(len(curve)) if not start <= i < stop]
    tp = ", ".join(f"{t.index}({t.direction})" for t in report.turning_points) or "none"
    msg = (
        f"{role} curve {curve.label} is non-monotone: turning points [{tp}], "
        f"zero-slope points {report.zero_slope}; using points {start}..{stop - 1}"
    )
    if excluded:
        msg += f", excluded points {excluded} (bpp {[curve.bpp[i] for i in excluded]})"
    warnings.append(msg)
    return curve.subset(start, stop)


def _overlap(a_lo, a_hi, t_lo, t_hi, what, anchor, test, warnings):
    lo, hi = max(a_lo, t_lo), min(a_hi, t_hi)
    if not hi > lo:
        raise NoOverlapError(
            f"no {what} overlap between anchor {anchor.label} [{a_lo:.6g}, {a_hi:.6g}] "
            f"and test {test.label} [{t_lo:.6g}, {t_hi:.6g}]"
        )
    span = a_hi - a_lo
    if span > 0 and (hi - lo) < LOW_OVERLAP_FRACTION * span:
        warnings.append(
            f"low {what} overlap: [{lo:.6g}, {hi:.6g}] covers {100 * (hi - lo) / span:.1f}% of the anchor range"
        )
    return lo, hi


def _finite(value, what, anchor, test):
    # Near-coincident knots can overflow the interpolant slopes.
    if not np.isfinite(value):
        raise NumericalFailureError(f"{what} of {test.label} against {anchor.label} is not finite")
    return value


def bd_rate(anchor, test, method="pchip"):
    """Average log10-rate difference at equal quality, as a percentage."""
    _check_pair(anchor, test)
    warnings = []
    a = _prepare(anchor, "anchor", warnings)
    t = _prepare(test, "test", warnings)
    fa = fit_curve(a, "lograte_of_quality", method)
    ft = fit_curve(t, "lograte_of_quality", method)
    lo, hi = _overlap(fa.lo, fa.hi, ft.lo, ft.hi, "quality", a, t, warnings)
    avg = _finite((integrate(ft, lo, hi) - integrate(fa, lo, hi)) / (hi - lo), "BD-rate", a, t)
    return BDResult(
        bd_rate_percent=float((10.0**avg - 1.0) * 100.0),
        overlap=(lo, hi), overlap_axis="quality", orientation=anchor.orientation,
        metric_name=anchor.metric_name, method=method,
        anchor_id=anchor.codec_id, test_id=test.codec_id, warnings=warnings,
    )


def bd_quality(anchor, test, method="pchip"):
    """Average quality difference (test - anchor) at equal log-rate."""
    _check_pair(anchor, test)
    warnings = []
    a = _prepare(anchor, "anchor", warnings)
    t = _prepare(test, "test", warnings)
    fa = fit_curve(a, "quality_of_lograte", method)
    ft = fit_curve(t, "quality_of_lograte", method)
    lo, hi = _overlap(fa.lo, fa.hi, ft.lo, ft.hi, "log-rate", a, t, warnings)
    avg = _finite((integrate(ft, lo, hi) - integrate(fa, lo, hi)) / (hi - lo), "BD-quality", a, t)
    return BDResult(
        bd_quality_delta=float(avg),
        overlap=(lo, hi), overlap_axis="log10_bpp", orientation=anchor.orientation,
        metric_name=anchor.metric_name, method=method,
        anchor_id=anchor.codec_id, test_id=test.codec_id, warnings=warnings,
    )


def bd_both(anchor, test, method="pchip"):
    """BD-rate and BD-quality merged into one result (warnings deduplicated)."""
    r = bd_rate(anchor, test, method)
    q = bd_quality(anchor, test, method)
    merged = list(dict.fromkeys(r.warnings + q.warnings))
    return BDResult(
        bd_rate_percent=r.bd_rate_percent, bd_quality_delta=q.bd_quality_delta,
        overlap=r.overlap, overlap_axis="quality", orientation=r.orientation,
        metric_name=r.metric_name, method=method, anchor_id=r.anchor_id, test_id=r.test_id,
        warnings=merged + [f"log-rate overlap used for BD-quality: [{q.overlap[0]:.6g}, {q.overlap[1]:.6g}]"],
    )


# --- curve persistence -------------------------------------------------------


def write_curves_csv(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for c in curves:
            for b, q in c.points:
                w.writerow([c.codec_id, c.task_id, c.metric_name, c.orientation, repr(b), repr(q)])


def read_curves_csv(path):
    """Parse curve rows grouped by (codec_id, task_id, metric), in file order."""
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty CSV file", line=1) from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"missing columns {missing}", line=1)
        col = {c: header.index(c) for c in CSV_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) < len(header):
                raise SchemaError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            key = (row[col["codec_id"]].strip(), row[col["task_id"]].strip(), row[col["metric"]].strip())
            orient = row[col["orientation"]].strip()
            if orient not in ORIENTATIONS:
                raise SchemaError(f"orientation {orient!r} not in {ORIENTATIONS}", line=lineno)
            try:
                bpp = float(row[col["bpp"]])
                q = float(row[col["quality"]])
            except ValueError as exc:
                raise SchemaError(f"non-numeric bpp/quality ({exc})", line=lineno) from None
            if not (math.isfinite(bpp) and bpp > 0):
                raise SchemaError(f"bpp must be finite and > 0, got {bpp!r}", line=lineno)
            if not math.isfinite(q):
                raise SchemaError(f"quality must be finite, got {q!r}", line=lineno)
            g = groups.setdefault(key, {"orientation": orient, "rows": [], "lines": []})
            if g["orientation"] != orient:
                raise SchemaError(f"orientation changes within curve {'/'.join(key)}", line=lineno)
            for prev_b, prev_line in zip((r[0] for r in g["rows"]), g["lines"]):
                if prev_b == bpp:
                    raise SchemaError(
                        f"duplicate bpp {bpp!r} in curve {'/'.join(key)} (first seen on line {prev_line})",
                        line=lineno,
                    )
            g["rows"].append((bpp, q))
            g["lines"].append(lineno)
    curves = []
    for (codec, task, metric), g in groups.items():
        try:
            curves.append(RPCurve.from_points(g["rows"], metric_name=metric, orientation=g["orientation"],
                                              codec_id=codec, task_id=task))
        except ValidationError as exc:
            raise SchemaError(str(exc), line=g["lines"][0]) from None
    return curves


def curves_to_json(curves):
    return json.dumps([c.to_dict() for c in curves], indent=2, sort_keys=True)


def curves_from_json(text):
    return [RPCurve.from_dict(d) for d in json.loads(text)]
