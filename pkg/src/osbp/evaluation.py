"""Open-set metrics, unknown-probability histograms, sweeps and report files.

Metric conventions:

* per-class accuracy is correct / count for each true class in ``0..K``;
  classes with no samples are left out of every average;
* ``OS`` is the mean per-class accuracy over all present classes, known and
  unknown; ``OS_star`` the mean over present known classes only;
* ``UNK`` is the accuracy on class ``K``; ``ALL`` the plain fraction of
  correct predictions.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, write_csv_features
from .errors import UsageError, ValidationError

REPORT_SCHEMA = "osbp-report"
SWEEP_SCHEMA = "osbp-sweep"
REPORT_VERSION = 1
DEFAULT_BINS = 20


@dataclass
class EvalReport:
    K: int
    n: int
    per_class_acc: list
    OS: float
    OS_star: float | None
    ALL: float
    UNK: float | None
    confusion: list
    histogram: dict | None = None

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "K": self.K,
            "n": self.n,
            "per_class_acc": list(self.per_class_acc),
            "OS": self.OS,
            "OS_star": self.OS_star,
            "ALL": self.ALL,
            "UNK": self.UNK,
            "confusion": [list(map(int, row)) for row in self.confusion],
            "histogram": self.histogram,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA or d.get("version") != REPORT_VERSION:
            raise ValidationError("not a version-1 report document")
        return cls(d["K"], d["n"], d["per_class_acc"], d["OS"], d["OS_star"], d["ALL"],
                   d["UNK"], d["confusion"], d.get("histogram"))

    def summary(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"
        return f"OS={fmt(self.OS)} OS*={fmt(self.OS_star)} ALL={fmt(self.ALL)} UNK={fmt(self.UNK)}"


def histogram_counts(p, bins: int = DEFAULT_BINS) -> list[int]:
    """Equal-width bins over [0, 1]; a value of exactly 1.0 lands in the last bin."""
    if bins < 2:
        raise ValidationError(f"need at least 2 bins, got {bins}")
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    idx = np.minimum((p * bins).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins).tolist()


def report_from_predictions(pred, truth, K: int, p_unknown=None,
                            bins: int = DEFAULT_BINS) -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if truth.size == 0:
        raise ValidationError("cannot evaluate on an empty target set")
    if pred.shape != truth.shape:
        raise ValidationError(f"{pred.size} predictions for {truth.size} labels")
    if truth.min() < 0 or truth.max() > K or pred.min() < 0 or pred.max() > K:
        raise ValidationError(f"labels and predictions must lie in 0..{K}")
    confusion = np.zeros((K + 1, K + 1), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    counts = confusion.sum(axis=1)
    per_class = [float(confusion[k, k] / counts[k]) if counts[k] else None for k in range(K + 1)]
    present = [a for a in per_class if a is not None]
    known = [a for a in per_class[:K] if a is not None]
    histogram = None
    if p_unknown is not None:
        p_unknown = np.asarray(p_unknown, dtype=np.float64)
        histogram = {
            "bins": bins,
            "known": histogram_counts(p_unknown[truth != K], bins),
            "unknown": histogram_counts(p_unknown[truth == K], bins),
        }
    return EvalReport(
        K=K,
        n=int(truth.size),
        per_class_acc=per_class,
        OS=float(np.mean(present)),
        OS_star=float(np.mean(known)) if known else None,
        ALL=float(np.trace(confusion) / truth.size),
        UNK=per_class[K],
        confusion=confusion.tolist(),
        histogram=histogram,
    )


def evaluate(predict_fn: Callable, target: Dataset, K: int,
             unknown_prob_fn: Callable | None = None, bins: int = DEFAULT_BINS) -> EvalReport:
    """Score ``predict_fn`` (features -> labels in ``0..K``) on a labeled target set.

    If ``unknown_prob_fn`` is given, the report carries the p(unknown)
    histogram split by ground truth.
    """
    if len(target) == 0:
        raise ValidationError("cannot evaluate on an empty target set")
    pred = predict_fn(target.features)
    p_unknown = unknown_prob_fn(target.features) if unknown_prob_fn is not None else None
    return report_from_predictions(pred, target.labels, K, p_unknown, bins)


def p_unknown_histogram(model, target: Dataset, bins: int = DEFAULT_BINS) -> dict:
    """Histogram of p(unknown) for ground-truth known and unknown target samples."""
    from .model import classify

    p = classify(model, target.features)[:, model.K]
    unknown = target.labels == model.K
    return {
        "bins": bins,
        "known": histogram_counts(p[~unknown], bins),
        "unknown": histogram_counts(p[unknown], bins),
    }


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    value: object
    seed: int
    report: EvalReport | None = None
    error: str | None = None


def sweep(name: str, values: Sequence, runner: Callable, base_seed: int = 0,
          workers: int = 1) -> list[SweepRow]:
    """Run ``runner(value, seed)`` for each grid value with seed ``base_seed + index``.

    Failures are recorded on their row and do not stop the sweep. Rows come
    back in grid order whatever the number of workers.
    """
    values = list(values)
    if not values:
        raise ValidationError(f"empty grid for {name!r}")

    def one(i):
        seed = base_seed + i
        try:
            return SweepRow(values[i], seed, runner(values[i], seed))
        except Exception as exc:  # recorded per row by design
            return SweepRow(values[i], seed, error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, range(len(values))))
    return [one(i) for i in range(len(values))]


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("param", "value", "seed", "OS", "OS_star", "ALL", "UNK", "error")


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def _parse_num(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def _report_rows(r: EvalReport):
    yield ("K", "", _num(r.K))
    yield ("n", "", _num(r.n))
    for key in ("OS", "OS_star", "ALL", "UNK"):
        yield (key, "", _num(getattr(r, key)))
    for i, a in enumerate(r.per_class_acc):
        yield ("per_class_acc", str(i), _num(a))
    for i, row in enumerate(r.confusion):
        for j, c in enumerate(row):
            yield ("confusion", f"{i}:{j}", _num(c))
    if r.histogram is not None:
        yield ("histogram_bins", "", _num(r.histogram["bins"]))
        for group in ("known", "unknown"):
            for i, c in enumerate(r.histogram[group]):
                yield (f"histogram_{group}", str(i), _num(c))


def _report_from_rows(rows) -> EvalReport:
    scalars, per_class, conf, hist = {}, {}, {}, {"known": {}, "unknown": {}}
    for field_, index, value in rows:
        v = _parse_num(value)
        if field_ == "per_class_acc":
            per_class[int(index)] = None if v is None else float(v)
        elif field_ == "confusion":
            i, j = map(int, index.split(":"))
            conf[i, j] = v
        elif field_.startswith("histogram_") and field_ != "histogram_bins":
            hist[field_[len("histogram_"):]][int(index)] = v
        else:
            scalars[field_] = v
    K, n = scalars["K"], scalars["n"]
    flt = lambda v: None if v is None else float(v)
    histogram = None
    if "histogram_bins" in scalars:
        b = scalars["histogram_bins"]
        histogram = {"bins": b, "known": [hist["known"][i] for i in range(b)],
                     "unknown": [hist["unknown"][i] for i in range(b)]}
    return EvalReport(
        K, n, [per_class[i] for i in range(K + 1)],
        flt(scalars["OS"]), flt(scalars["OS_star"]), flt(scalars["ALL"]), flt(scalars["UNK"]),
        [[conf[i, j] for j in range(K + 1)] for i in range(K + 1)], histogram,
    )


def write_report(obj, path, fmt: str = "json", param: str = "param"):
    """Write an :class:`EvalReport` or a list of :class:`SweepRow` as JSON or CSV.

    Layouts (version 1):

    * report JSON: the :meth:`EvalReport.to_dict` document;
    * report CSV: long format ``field,index,value`` (confusion index ``i:j``);
    * sweep JSON: ``{"schema", "version", "param", "rows": [...]}``;
    * sweep CSV: one row per grid point, columns ``SWEEP_COLUMNS``.

    Floats are written with 17 significant digits and parse back exactly.
    """
    if fmt not in ("json", "csv"):
        raise UsageError(f"unknown report format {fmt!r}; use 'json' or 'csv'")
    is_sweep = isinstance(obj, (list, tuple))
    try:
        with open(path, "w", newline="") as f:
            if fmt == "json":
                if is_sweep:
                    doc = {
                        "schema": SWEEP_SCHEMA,
                        "version": REPORT_VERSION,
                        "param": param,
                        "rows": [{"value": r.value, "seed": r.seed, "error": r.error,
                                  "report": r.report.to_dict() if r.report else None}
                                 for r in obj],
                    }
                else:
                    doc = obj.to_dict()
                json.dump(doc, f, indent=2, sort_keys=True)
                f.write("\n")
            else:
                writer = csv.writer(f, lineterminator="\n")
                if is_sweep:
                    writer.writerow(SWEEP_COLUMNS)
                    for r in obj:
                        rep = r.report
                        metrics = [_num(getattr(rep, k)) if rep else "" for k in ("OS", "OS_star", "ALL", "UNK")]
                        writer.writerow([param, _num(r.value), r.seed, *metrics, r.error or ""])
                else:
                    writer.writerow(("field", "index", "value"))
                    writer.writerows(_report_rows(obj))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror}") from exc


def read_report(path):
    """Parse a file written by :func:`write_report` (format chosen by extension/content)."""
    with open(path, newline="") as f:
        text = f.read()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        if doc.get("schema") == SWEEP_SCHEMA:
            return [SweepRow(r["value"], r["seed"],
                             EvalReport.from_dict(r["report"]) if r["report"] else None,
                             r["error"]) for r in doc["rows"]]
        return EvalReport.from_dict(doc)
    rows = list(csv.reader(text.splitlines()))
    header, body = rows[0], rows[1:]
    if tuple(header) == SWEEP_COLUMNS:
        # the CSV layout only carries the headline metrics, so rows come back as dicts
        out = []
        for row in body:
            d = dict(zip(header, row))
            out.append({k: (v if k in ("param", "error") else _parse_num(v)) for k, v in d.items()})
        return out
    return _report_from_rows(body)


def dump_features(model, dataset: Dataset, path):
    """Write ``label, G(x)...`` per example, no header; loadable by ``load_csv_features``."""
    from .model import features

    feats = features(model, dataset.features)
    write_csv_features(path, Dataset(feats, dataset.labels, dataset.name), header=False)
