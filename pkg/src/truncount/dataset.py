"""Study-level count datasets.

A dataset is an ordered, immutable collection of :class:`StudyRecord` values
(one per study: event count, person-years of exposure, proportion of women
and a binary origin flag). This module handles CSV input/output, zero
truncation, frequency tables, regression imputation of a missing proportion
and the empirical outlier-rate bounds.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CSV_COLUMNS = ("id", "count", "exposure", "prop_women", "origin_flag")

# Exceeding 1.2x the lower bound defines the outlier rate interval.
OUTLIER_UPPER_FACTOR = 1.2
OUTLIER_IQR_MULTIPLIER = 3.0


class DataError(ValueError):
    """Invalid or insufficient input data."""


class ParseError(DataError):
    """A CSV cell could not be parsed."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class StudyRecord:
    """One study: completed events, person-years and covariates."""

    id: str
    count: int
    exposure: float
    prop_women: float | None = None
    origin_flag: int = 0

    def __post_init__(self):
        if isinstance(self.count, bool) or int(self.count) != self.count or self.count < 0:
            raise DataError(f"study {self.id!r}: count must be a nonnegative integer")
        if not (math.isfinite(self.exposure) and self.exposure > 0):
            raise DataError(f"study {self.id!r}: exposure must be positive, got {self.exposure}")
        if self.prop_women is not None and not (0.0 <= self.prop_women <= 1.0):
            raise DataError(f"study {self.id!r}: prop_women must lie in [0, 1]")
        if self.origin_flag not in (0, 1):
            raise DataError(f"study {self.id!r}: origin_flag must be 0 or 1")
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "exposure", float(self.exposure))
        object.__setattr__(self, "origin_flag", int(self.origin_flag))

    @property
    def rate(self) -> float:
        return self.count / self.exposure


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of studies.

    ``truncated`` marks data in which zero-count studies are structurally
    absent (they could never have been observed).
    """

    records: tuple[StudyRecord, ...] = ()
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate study ids: {dupes}")
        if self.truncated and any(r.count == 0 for r in self.records):
            raise DataError("a truncated dataset cannot contain zero counts")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def counts(self) -> np.ndarray:
        return np.array([r.count for r in self.records], dtype=np.int64)

    @property
    def exposures(self) -> np.ndarray:
        return np.array([r.exposure for r in self.records], dtype=float)

    @property
    def prop_women(self) -> np.ndarray:
        """Proportion of women, NaN where absent."""
        return np.array(
            [np.nan if r.prop_women is None else r.prop_women for r in self.records],
            dtype=float,
        )

    @property
    def origin_flags(self) -> np.ndarray:
        return np.array([r.origin_flag for r in self.records], dtype=float)

    @property
    def rates(self) -> np.ndarray:
        return self.counts / self.exposures

    @property
    def has_missing(self) -> bool:
        return any(r.prop_women is None for r in self.records)

    def subset(self, mask: Sequence[bool] | np.ndarray) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return replace(self, records=tuple(r for r, keep in zip(self.records, mask) if keep))

    def ones_and_twos(self) -> "Dataset":
        """Studies with exactly one or two events (the Chao/Zelterman subset)."""
        c = self.counts
        return self.subset((c == 1) | (c == 2))

    @classmethod
    def from_arrays(
        cls,
        counts,
        exposures,
        prop_women=None,
        origin_flags=None,
        ids=None,
        truncated: bool = False,
    ) -> "Dataset":
        counts = np.asarray(counts)
        exposures = np.asarray(exposures, dtype=float)
        n = len(counts)
        if prop_women is None:
            prop_women = [None] * n
        if origin_flags is None:
            origin_flags = [0] * n
        if ids is None:
            ids = [str(i + 1) for i in range(n)]
        records = []
        for i in range(n):
            x1 = prop_women[i]
            if x1 is not None and np.isnan(x1):
                x1 = None
            records.append(
                StudyRecord(
                    id=str(ids[i]),
                    count=int(counts[i]),
                    exposure=float(exposures[i]),
                    prop_women=None if x1 is None else float(x1),
                    origin_flag=int(origin_flags[i]),
                )
            )
        return cls(tuple(records), truncated=truncated)


@dataclass(frozen=True)
class FrequencyTable:
    """Frequencies ``f_y`` of studies with exactly ``y`` events."""

    counts: Mapping[int, int] = field(default_factory=dict)

    def __getitem__(self, y: int) -> int:
        return self.counts.get(y, 0)

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    @property
    def f1(self) -> int:
        return self[1]

    @property
    def f2(self) -> int:
        return self[2]

    @property
    def m(self) -> int:
        """Number of studies with one or two events."""
        return self.f1 + self.f2


@dataclass(frozen=True)
class OutlierBounds:
    lower: float
    upper: float


def _parse_row(row: dict, line: int) -> StudyRecord:
    sid = (row.get("id") or "").strip()
    if not sid:
        raise ParseError("empty id", line, "id")
    try:
        count = int(row["count"].strip())
    except (ValueError, AttributeError):
        raise ParseError(f"cannot parse {row.get('count')!r} as an integer", line, "count")
    if count < 0:
        raise ParseError("count must be nonnegative", line, "count")
    try:
        exposure = float(row["exposure"].strip())
    except (ValueError, AttributeError):
        raise ParseError(f"cannot parse {row.get('exposure')!r} as a number", line, "exposure")
    if not (math.isfinite(exposure) and exposure > 0):
        raise DataError(f"row {line}, column 'exposure': exposure must be positive, got {exposure}")
    cell = (row.get("prop_women") or "").strip()
    if cell == "":
        prop = None
    else:
        try:
            prop = float(cell)
        except ValueError:
            raise ParseError(f"cannot parse {cell!r} as a number", line, "prop_women")
        if not 0.0 <= prop <= 1.0:
            raise DataError(f"row {line}, column 'prop_women': {prop} outside [0, 1]")
    flag = (row.get("origin_flag") or "").strip()
    if flag not in ("0", "1"):
        raise ParseError(f"origin_flag must be 0 or 1, got {flag!r}", line, "origin_flag")
    return StudyRecord(sid, count, exposure, prop, int(flag))


def read_csv(text: str | io.TextIOBase, truncated: bool = True) -> Dataset:
    """Parse CSV text (or an open file). Lines starting with ``#`` are comments."""
    if isinstance(text, str):
        lines = text.splitlines()
    else:
        lines = text.read().splitlines()
    numbered = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip() and not ln.lstrip().startswith("#")]
    if not numbered:
        raise DataError("no records: missing header")
    header_line, header = numbered[0]
    columns = [c.strip() for c in next(csv.reader([header]))]
    if tuple(columns) != CSV_COLUMNS:
        raise ParseError(f"header must be {','.join(CSV_COLUMNS)}, got {','.join(columns)}", header_line)
    body = numbered[1:]
    if not body:
        raise DataError("no records")
    records = []
    for line_no, ln in body:
        cells = next(csv.reader([ln]))
        if len(cells) != len(CSV_COLUMNS):
            raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(cells)}", line_no)
        records.append(_parse_row(dict(zip(CSV_COLUMNS, cells)), line_no))
    has_zero = any(r.count == 0 for r in records)
    return Dataset(tuple(records), truncated=truncated and not has_zero)


def load_csv(path: str | Path, truncated: bool = True) -> Dataset:
    """Load a study CSV with header ``id,count,exposure,prop_women,origin_flag``.

    Empty ``prop_women`` cells become absent values. The dataset is marked
    truncated when ``truncated`` is set and no zero counts are present.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return read_csv(fh, truncated=truncated)


def _fmt(x: float) -> str:
    return repr(float(x))


def to_csv(d: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in d.records:
        w.writerow([
            r.id,
            r.count,
            _fmt(r.exposure),
            "" if r.prop_women is None else _fmt(r.prop_women),
            r.origin_flag,
        ])
    return buf.getvalue()


def write_csv(d: Dataset, path: str | Path) -> None:
    Path(path).write_text(to_csv(d), encoding="utf-8")


def _bundled(name: str) -> Dataset:
    text = resources.files("truncount").joinpath("data", name).read_text(encoding="utf-8")
    return read_csv(text)


def case_study() -> Dataset:
    """The 27 observed studies of completed suicide after bariatric surgery."""
    return _bundled("case_study.csv")


def case_study_outliers() -> Dataset:
    """Three simulated outlier studies for the case-study robustness check."""
    return _bundled("case_study_outliers.csv")


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("truncount").joinpath("data", name)))


def frequency_table(d: Dataset) -> FrequencyTable:
    return FrequencyTable(dict(sorted(Counter(r.count for r in d.records).items())))


def zero_truncate(d: Dataset) -> Dataset:
    """Drop zero-count studies, keeping the order of the survivors."""
    return Dataset(tuple(r for r in d.records if r.count > 0), truncated=True)


_IMPUTE_TERMS = ("exposure", "origin_flag", "exposure:origin_flag")


def _gaussian_bic(X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    n = len(y)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(np.sum((y - X @ coef) ** 2))
    sigma2 = max(rss / n, np.finfo(float).tiny)
    loglik = -0.5 * n * (math.log(2 * math.pi) + math.log(sigma2) + 1.0)
    rank = np.linalg.matrix_rank(X)
    return -2.0 * loglik + (rank + 1) * math.log(n), coef


def _impute_columns(exposure, flag, terms) -> np.ndarray:
    cols = [np.ones_like(exposure)]
    for t in terms:
        if t == "exposure":
            cols.append(exposure)
        elif t == "origin_flag":
            cols.append(flag)
        else:
            cols.append(exposure * flag)
    return np.column_stack(cols)


def select_imputation_terms(d: Dataset) -> tuple[tuple[str, ...], np.ndarray]:
    """Backward stepwise BIC over the OLS model for ``prop_women``.

    Starts from exposure, origin flag and their interaction. The interaction
    must go before either main effect may be dropped. Returns the chosen
    terms and their coefficients (intercept first).
    """
    complete = d.subset(~np.isnan(d.prop_women))
    if len(complete) < len(_IMPUTE_TERMS) + 2:
        raise DataError(
            f"imputation needs at least {len(_IMPUTE_TERMS) + 2} complete records, got {len(complete)}"
        )
    e, x2, x1 = complete.exposures, complete.origin_flags, complete.prop_women

    def score(terms):
        return _gaussian_bic(_impute_columns(e, x2, terms), x1)

    terms = list(_IMPUTE_TERMS)
    best_bic, best_coef = score(terms)
    while terms:
        if "exposure:origin_flag" in terms:
            candidates = ["exposure:origin_flag"]
        else:
            candidates = list(terms)
        trial = []
        for t in candidates:
            reduced = [u for u in terms if u != t]
            bic, coef = score(reduced)
            trial.append((bic, reduced, coef))
        bic, reduced, coef = min(trial, key=lambda z: z[0])
        if bic < best_bic:
            best_bic, terms, best_coef = bic, reduced, coef
        else:
            break
    return tuple(terms), best_coef


def impute_missing_proportion(d: Dataset) -> Dataset:
    """Fill absent ``prop_women`` values by stepwise-BIC linear regression.

    Predictions are clamped to [0, 1]. Records with a present proportion are
    returned unchanged.
    """
    if not d.has_missing:
        raise DataError("no missing prop_women values to impute")
    terms, coef = select_imputation_terms(d)
    records = []
    for r in d.records:
        if r.prop_women is None:
            row = _impute_columns(np.array([r.exposure]), np.array([float(r.origin_flag)]), terms)
            value = float(np.clip(row @ coef, 0.0, 1.0)[0])
            r = replace(r, prop_women=value)
        records.append(r)
    return replace(d, records=tuple(records))


def outlier_bounds(d: Dataset) -> OutlierBounds:
    """Rate interval above which a study counts as an outlier.

    The lower end is ``Q3 + 3 IQR`` of the observed rates (linear
    interpolation quantiles) and the upper end is 1.2 times that.
    """
    if len(d) < 4:
        raise DataError(f"outlier bounds need at least 4 studies, got {len(d)}")
    q1, q3 = np.quantile(d.rates, [0.25, 0.75])
    lower = float(q3 + OUTLIER_IQR_MULTIPLIER * (q3 - q1))
    return OutlierBounds(lower, OUTLIER_UPPER_FACTOR * lower)


def append_outlier_records(d: Dataset, outliers: Iterable[StudyRecord]) -> Dataset:
    """Append outlier studies after the existing ones."""
    extra = tuple(outliers)
    if not extra:
        return d
    truncated = d.truncated and all(r.count > 0 for r in extra)
    return Dataset(d.records + extra, truncated=truncated)
