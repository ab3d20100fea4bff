"""Posterior summary tables and method-to-method comparison."""

import csv
import io
import math
from dataclasses import asdict, dataclass

SUMMARY_COLUMNS = ("parameter", "true", "mean", "sd", "lower", "upper")
COMPARISON_COLUMNS = ("parameter", "mean_a", "mean_b", "abs_diff", "sd_ratio", "tolerance", "pass")
MIN_TOLERANCE = 0.05
SD_FRACTION = 0.5


class ReportError(ValueError):
    pass


@dataclass
class ParameterSummary:
    """One row of a posterior summary table (``true`` is ``None`` for real data)."""

    parameter: str
    mean: float
    sd: float
    lower: float
    upper: float
    true: float | None = None

    def covers_truth(self):
        return self.true is not None and self.lower <= self.true <= self.upper


@dataclass
class ComparisonRow:
    parameter: str
    mean_a: float
    mean_b: float
    abs_diff: float
    sd_ratio: float
    tolerance: float
    passed: bool


def _fmt(v, width=12):
    if v is None:
        return "-".rjust(width)
    if isinstance(v, bool):
        return ("PASS" if v else "FAIL").rjust(width)
    if isinstance(v, str):
        return v.rjust(width)
    a = abs(v)
    if a != 0 and (a >= 1e5 or a < 1e-3):
        return f"{v:.4e}".rjust(width)
    return f"{v:.4f}".rjust(width)


def _text(header, rows):
    first = max([len(header[0])] + [len(str(r[0])) for r in rows]) + 2
    lines = [header[0].ljust(first) + "".join(h.rjust(12) for h in header[1:])]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(str(r[0]).ljust(first) + "".join(_fmt(v) for v in r[1:]))
    return "\n".join(lines) + "\n"


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (int(v) if isinstance(v, bool) else v) for v in r])
    return buf.getvalue()


def _summary_rows(summaries):
    return [(s.parameter, s.true, s.mean, s.sd, s.lower, s.upper) for s in summaries]


def summary_text(summaries, title=None):
    """Aligned table: parameter, true value, mean, sd and interval bounds."""
    body = _text(SUMMARY_COLUMNS, _summary_rows(summaries))
    return (title + "\n" + body) if title else body


def summary_csv(summaries):
    return _csv(SUMMARY_COLUMNS, _summary_rows(summaries))


def read_summary_csv(path_or_text):
    """Parse a summary CSV written by :func:`summary_csv`."""
    text = str(path_or_text)
    if "\n" not in text:
        with open(text, newline="") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != SUMMARY_COLUMNS:
        raise ReportError(f"summary header must be {','.join(SUMMARY_COLUMNS)}")
    out = []
    for row in reader:
        true = row["true"]
        out.append(ParameterSummary(row["parameter"], float(row["mean"]), float(row["sd"]),
                                    float(row["lower"]), float(row["upper"]),
                                    None if true == "" else float(true)))
    return out


def summaries_from_dict(stats, truth=None):
    """Build summaries from ``{name: {"mean", "sd", "lower", "upper"}}``."""
    truth = truth or {}
    return [ParameterSummary(k, v["mean"], v["sd"], v["lower"], v["upper"], truth.get(k))
            for k, v in stats.items()]


def default_tolerance(sd_a, sd_b):
    """``max(0.05, 0.5 * pooled sd)`` with ``pooled sd = sqrt((sd_a^2 + sd_b^2) / 2)``."""
    return max(MIN_TOLERANCE, SD_FRACTION * math.sqrt(0.5 * (sd_a ** 2 + sd_b ** 2)))


def compare(a, b, tolerances=None):
    """Row-by-row comparison of two summaries over the same parameters.

    ``tolerances`` is ``None`` (pooled-sd rule), a number applied to every
    row, or a mapping from parameter name to tolerance.
    """
    da = {s.parameter: s for s in a}
    db = {s.parameter: s for s in b}
    if set(da) != set(db):
        only_a = sorted(set(da) - set(db))
        only_b = sorted(set(db) - set(da))
        raise ReportError(f"parameter sets differ: only in first {only_a}, only in second {only_b}")
    rows = []
    for s in a:
        sa, sb = s, db[s.parameter]
        if tolerances is None:
            tol = default_tolerance(sa.sd, sb.sd)
        elif isinstance(tolerances, dict):
            tol = float(tolerances.get(s.parameter, default_tolerance(sa.sd, sb.sd)))
        else:
            tol = float(tolerances)
        diff = abs(sa.mean - sb.mean)
        ratio = sa.sd / sb.sd if sb.sd > 0 else (1.0 if sa.sd == 0 else math.inf)
        rows.append(ComparisonRow(s.parameter, sa.mean, sb.mean, diff, ratio, tol, bool(diff <= tol)))
    return rows


def _comparison_rows(rows):
    return [(r.parameter, r.mean_a, r.mean_b, r.abs_diff, r.sd_ratio, r.tolerance, r.passed) for r in rows]


def comparison_text(rows, labels=("a", "b")):
    header = ("parameter", f"mean_{labels[0]}", f"mean_{labels[1]}", "abs_diff", "sd_ratio", "tolerance", "pass")
    return _text(header, _comparison_rows(rows))


def comparison_csv(rows):
    return _csv(COMPARISON_COLUMNS, _comparison_rows(rows))


def all_passed(rows):
    return all(r.passed for r in rows)


def as_dicts(items):
    return [asdict(x) for x in items]


__all__ = ["COMPARISON_COLUMNS", "ComparisonRow", "ParameterSummary", "ReportError", "SUMMARY_COLUMNS",
           "all_passed", "as_dicts", "compare", "comparison_csv", "comparison_text", "default_tolerance",
           "read_summary_csv", "summaries_from_dict", "summary_csv", "summary_text"]
