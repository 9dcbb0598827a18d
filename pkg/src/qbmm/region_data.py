"""Regional count data: domain types, TSV ingestion and serialization.

A region holds, for each of N samples, the CpG positions covered in that
sample together with read depths and methylated-read counts, plus one row
of sample-level covariates. Layout is ragged: each sample keeps its own
position vector.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import EmptyRegionError, ParseError

REQUIRED_COLUMNS = ("Meth_Counts", "Total_Counts", "Position", "ID")
REGION_COLUMN = "Region"
_MISSING = {"", "na", "nan", "null", "none"}


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass
class LoadReport:
    """What ingestion kept and what it dropped (and why)."""

    path: str = ""
    rows_read: int = 0
    rows_kept: int = 0
    zero_depth_rows: list = field(default_factory=list)
    dropped_samples: dict = field(default_factory=dict)

    @property
    def rows_dropped(self):
        return self.rows_read - self.rows_kept

    def to_dict(self):
        return {
            "path": self.path,
            "rows_read": self.rows_read,
            "rows_kept": self.rows_kept,
            "rows_dropped": self.rows_dropped,
            "zero_depth_rows": list(self.zero_depth_rows),
            "dropped_samples": dict(self.dropped_samples),
        }

    def emit(self, stream=None, sidecar=None):
        """Write the report as JSON to ``stream`` (stderr by default) or a file."""
        text = json.dumps(self.to_dict(), indent=2)
        if sidecar is not None:
            Path(sidecar).write_text(text + "\n", encoding="utf-8")
        else:
            print(text, file=stream if stream is not None else sys.stderr)


@dataclass(frozen=True, eq=False)
class RegionData:
    """Counts, depths and positions of one genomic region.

    Attributes
    ----------
    sample_ids : tuple of str
        Sample identifiers, one per sample (N).
    positions, total_reads, meth_reads : tuple of numpy.ndarray
        Per-sample vectors of genomic coordinates, read depths X_ij and
        methylated counts Y_ij. Positions are strictly increasing within a
        sample; ``meth_reads`` may be non-integer when it holds expected
        counts.
    covariates : numpy.ndarray, shape (N, P)
        Sample-level covariates, used as given (no centering).
    covariate_names : tuple of str
    """

    sample_ids: tuple
    positions: tuple
    total_reads: tuple
    meth_reads: tuple
    covariates: np.ndarray
    covariate_names: tuple = ()
    name: str = "region"
    report: LoadReport | None = None

    def __post_init__(self):
        n = len(self.sample_ids)
        if not (len(self.positions) == len(self.total_reads) == len(self.meth_reads) == n):
            raise ValueError("per-sample vectors must have one entry per sample")
        pos = tuple(_frozen(p) for p in self.positions)
        xs = tuple(_frozen(x) for x in self.total_reads)
        ys = tuple(_frozen(y) for y in self.meth_reads)
        z = np.array(self.covariates, dtype=float).reshape(n, -1) if n else np.zeros((0, 0))
        z.setflags(write=False)
        for i, (p, x, y) in enumerate(zip(pos, xs, ys)):
            if not (p.shape == x.shape == y.shape):
                raise ValueError(f"sample {self.sample_ids[i]}: ragged vectors differ in length")
            if p.size > 1 and np.any(np.diff(p) <= 0):
                raise ValueError(f"sample {self.sample_ids[i]}: positions not strictly increasing")
            if np.any(x < 1):
                raise ValueError(f"sample {self.sample_ids[i]}: depth below 1")
            if np.any(y < 0) or np.any(y > x):
                raise ValueError(f"sample {self.sample_ids[i]}: counts violate 0 <= Y <= X")
        if not np.all(np.isfinite(z)):
            raise ValueError("covariates contain missing values")
        names = tuple(self.covariate_names) or tuple(f"Z{p + 1}" for p in range(z.shape[1]))
        if len(names) != z.shape[1]:
            raise ValueError("covariate_names does not match covariate columns")
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "total_reads", xs)
        object.__setattr__(self, "meth_reads", ys)
        object.__setattr__(self, "covariates", z)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_samples(self):
        return len(self.sample_ids)

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    @property
    def n_obs(self):
        """Total number of retained observations M."""
        return int(sum(p.size for p in self.positions))

    @property
    def sample_index(self):
        """Sample index of each observation in flattened (row) order."""
        return np.repeat(np.arange(self.n_samples), [p.size for p in self.positions])

    @property
    def flat_positions(self):
        return np.concatenate(self.positions) if self.n_samples else np.zeros(0)

    @property
    def flat_total(self):
        return np.concatenate(self.total_reads) if self.n_samples else np.zeros(0)

    @property
    def flat_meth(self):
        return np.concatenate(self.meth_reads) if self.n_samples else np.zeros(0)

    @property
    def distinct_positions(self):
        return np.unique(self.flat_positions)

    def with_meth(self, flat_counts):
        """Copy with methylated counts replaced by a flattened vector."""
        flat_counts = np.asarray(flat_counts, dtype=float)
        if flat_counts.shape != (self.n_obs,):
            raise ValueError("flat_counts must have one entry per observation")
        splits = np.cumsum([p.size for p in self.positions])[:-1]
        return replace(self, meth_reads=tuple(np.split(flat_counts, splits)), report=None)

    def drop_covariate(self, index):
        """Copy without covariate column ``index`` (0-based over Z_1..Z_P)."""
        keep = [k for k in range(self.n_covariates) if k != index]
        return replace(
            self,
            covariates=self.covariates[:, keep],
            covariate_names=tuple(self.covariate_names[k] for k in keep),
            report=None,
        )

    def same_as(self, other, atol=0.0):
        """Structural equality (used for round-trip checks)."""
        if self.sample_ids != other.sample_ids or self.covariate_names != other.covariate_names:
            return False
        if not np.allclose(self.covariates, other.covariates, atol=atol, rtol=0):
            return False
        for a, b in zip(
            self.positions + self.total_reads + self.meth_reads,
            other.positions + other.total_reads + other.meth_reads,
        ):
            if a.shape != b.shape or not np.allclose(a, b, atol=atol, rtol=0):
                return False
        return True


@dataclass(frozen=True)
class ModelSpec:
    """Model and fitting configuration.

    ``basis_ranks`` lists L_p for p = 0..P; ``None`` means pick them with
    :func:`default_basis_ranks` using ``rank_rule``. ``error_rates`` is
    (p0, p1): the false methylation call rate and the true-positive call
    rate.
    """

    basis_ranks: tuple | None = None
    rank_rule: str = "simulation"
    error_rates: tuple = (0.0, 1.0)
    tol: float = 1e-6
    max_inner_iter: int = 100
    max_outer_iter: int = 200
    max_es_iter: int = 300
    random_effect: bool = True
    natural: bool = True
    phi_floor: float = 0.05

    def __post_init__(self):
        if self.basis_ranks is not None:
            ranks = tuple(int(r) for r in self.basis_ranks)
            if any(r < 3 for r in ranks):
                raise ValueError("basis ranks must be >= 3 (cubic-spline minimum)")
            object.__setattr__(self, "basis_ranks", ranks)
        if self.rank_rule not in ("real_data", "simulation"):
            raise ValueError(f"unknown rank rule {self.rank_rule!r}")
        p0, p1 = (float(v) for v in self.error_rates)
        if not (0.0 <= p0 < p1 <= 1.0):
            raise ValueError("error rates must satisfy 0 <= p0 < p1 <= 1")
        object.__setattr__(self, "error_rates", (p0, p1))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if min(self.max_inner_iter, self.max_outer_iter, self.max_es_iter) < 1:
            raise ValueError("iteration caps must be >= 1")

    def ranks_for(self, region):
        if self.basis_ranks is not None:
            if len(self.basis_ranks) != region.n_covariates + 1:
                raise ValueError(
                    f"{len(self.basis_ranks)} basis ranks given for "
                    f"{region.n_covariates + 1} smooth terms"
                )
            return list(self.basis_ranks)
        return default_basis_ranks(region, self.rank_rule)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def default_basis_ranks(region, rule="simulation"):
    """Basis ranks L_0..L_P for a region.

    ``real_data``: about one basis function per 10 CpGs for the intercept
    curve and per 20 CpGs for covariate curves, floored at 3.
    ``simulation``: rank 5 for every term.
    """
    n_terms = region.n_covariates + 1
    if rule == "simulation":
        return [5] * n_terms
    if rule != "real_data":
        raise ValueError(f"unknown rank rule {rule!r}")
    n_cpg = region.distinct_positions.size
    first = max(3, _round_half_up(n_cpg / 10))
    rest = max(3, _round_half_up(n_cpg / 20))
    return [first] + [rest] * (n_terms - 1)


def _parse_count(text, column, line, path):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{column}={text!r} is not an integer", line, path) from None
    if not math.isfinite(value) or value != int(value):
        raise ParseError(f"{column}={text!r} is not an integer", line, path)
    if value < 0:
        raise ParseError(f"{column}={text!r} is negative", line, path)
    return int(value)


def _read_rows(path, covariate_names):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file, header required", 1, str(path)) from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"header lacks columns {missing}", 1, str(path))
        if covariate_names is None:
            covariate_names = [
                h for h in header if h not in REQUIRED_COLUMNS and h != REGION_COLUMN
            ]
        absent = [c for c in covariate_names if c not in header]
        if absent:
            raise ParseError(f"header lacks covariate columns {absent}", 1, str(path))
        col = {h: k for k, h in enumerate(header)}
        rows = []
        for line, fields in enumerate(reader, start=2):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(fields)}", line, str(path)
                )
            rows.append((line, fields))
    return header, col, list(covariate_names), rows


def _build_region(name, rows, col, covariate_names, path, report):
    per_sample = {}
    covs = {}
    order = []
    for line, fields in rows:
        report.rows_read += 1
        y = _parse_count(fields[col["Meth_Counts"]], "Meth_Counts", line, path)
        x = _parse_count(fields[col["Total_Counts"]], "Total_Counts", line, path)
        if y > x:
            raise ParseError(f"Meth_Counts={y} exceeds Total_Counts={x}", line, path)
        try:
            pos = float(fields[col["Position"]])
        except ValueError:
            raise ParseError(f"Position={fields[col['Position']]!r} is not numeric", line, path) from None
        if not math.isfinite(pos):
            raise ParseError("Position is not finite", line, path)
        sid = fields[col["ID"]].strip()
        if not sid:
            raise ParseError("empty sample ID", line, path)
        zvals = []
        for cname in covariate_names:
            text = fields[col[cname]].strip()
            if text.lower() in _MISSING:
                zvals.append(math.nan)
                continue
            try:
                zvals.append(float(text))
            except ValueError:
                raise ParseError(f"{cname}={text!r} is not numeric", line, path) from None
        if sid not in per_sample:
            per_sample[sid] = []
            covs[sid] = (zvals, line)
            order.append(sid)
        else:
            first, first_line = covs[sid]
            same = all(
                (math.isnan(a) and math.isnan(b)) or a == b for a, b in zip(first, zvals)
            )
            if not same:
                raise ParseError(
                    f"covariates of sample {sid} differ from line {first_line}", line, path
                )
        if x == 0:
            report.zero_depth_rows.append(line)
            continue
        per_sample[sid].append((pos, x, y, line))

    sample_ids, positions, depths, meth, zrows = [], [], [], [], []
    for sid in order:
        zvals = covs[sid][0]
        obs = per_sample[sid]
        if any(math.isnan(v) for v in zvals):
            report.dropped_samples[sid] = f"missing covariates ({len(obs)} rows)"
            continue
        if not obs:
            report.dropped_samples[sid] = "no rows with positive depth"
            continue
        obs.sort(key=lambda r: r[0])
        for a, b in zip(obs, obs[1:]):
            if a[0] == b[0]:
                raise ParseError(
                    f"duplicate position {b[0]:g} for sample {sid} (first at line {a[3]})",
                    b[3],
                    path,
                )
        sample_ids.append(sid)
        positions.append([r[0] for r in obs])
        depths.append([r[1] for r in obs])
        meth.append([r[2] for r in obs])
        zrows.append(zvals)
        report.rows_kept += len(obs)
    if not sample_ids:
        raise EmptyRegionError(f"{path}: no observations survive filtering in region {name!r}")
    return RegionData(
        sample_ids=tuple(sample_ids),
        positions=tuple(positions),
        total_reads=tuple(depths),
        meth_reads=tuple(meth),
        covariates=np.array(zrows, dtype=float).reshape(len(sample_ids), len(covariate_names)),
        covariate_names=tuple(covariate_names),
        name=name,
        report=report,
    )


def load_regions(path, covariate_names=None):
    """Load every region from a TSV file.

    Files with a ``Region`` column are split on it; otherwise the whole file
    is one region named after the file stem. Returns a dict name -> RegionData
    in order of first appearance.
    """
    path = str(path)
    header, col, covariate_names, rows = _read_rows(path, covariate_names)
    if REGION_COLUMN in col:
        groups = {}
        for line, fields in rows:
            groups.setdefault(fields[col[REGION_COLUMN]].strip(), []).append((line, fields))
    else:
        groups = {Path(path).stem: rows}
    if not groups:
        raise EmptyRegionError(f"{path}: no data rows")
    out = {}
    for name, grp in groups.items():
        report = LoadReport(path=path)
        out[name] = _build_region(name, grp, col, covariate_names, path, report)
    return out


def load_region(path, covariate_names=None):
    """Load a single-region TSV file.

    Rows with ``Total_Counts == 0`` and samples with missing covariates are
    dropped; the :class:`LoadReport` is attached as ``region.report``.

    Raises
    ------
    ParseError
        Non-integer or negative counts, ``Meth_Counts > Total_Counts``, or a
        bad header; the message names the line.
    EmptyRegionError
        Nothing survives filtering.
    """
    regions = load_regions(path, covariate_names)
    if len(regions) != 1:
        raise ParseError(f"expected one region, found {len(regions)}", None, str(path))
    return next(iter(regions.values()))


def _fmt_number(v):
    v = float(v)
    if v == int(v):
        return str(int(v))
    return repr(v)


def write_region(region, path, region_column=False):
    """Serialize to the TSV layout read by :func:`load_region`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        header = list(REQUIRED_COLUMNS) + list(region.covariate_names)
        if region_column:
            header = [REGION_COLUMN] + header
        writer.writerow(header)
        for i, sid in enumerate(region.sample_ids):
            z = [_fmt_number(v) for v in region.covariates[i]]
            for pos, x, y in zip(region.positions[i], region.total_reads[i], region.meth_reads[i]):
                row = [_fmt_number(y), _fmt_number(x), _fmt_number(pos), sid] + z
                if region_column:
                    row = [region.name] + row
                writer.writerow(row)


def region_from_arrays(
    sample_index: Sequence[int],
    positions,
    total,
    meth,
    covariates,
    covariate_names=None,
    sample_ids=None,
    name="region",
):
    """Build a RegionData from flattened observation arrays."""
    sample_index = np.asarray(sample_index, dtype=int)
    positions = np.asarray(positions, dtype=float)
    total = np.asarray(total, dtype=float)
    meth = np.asarray(meth, dtype=float)
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    n = covariates.shape[0]
    if sample_ids is None:
        sample_ids = [f"s{i + 1}" for i in range(n)]
    pos_l, x_l, y_l = [], [], []
    for i in range(n):
        sel = np.flatnonzero(sample_index == i)
        sel = sel[np.argsort(positions[sel], kind="stable")]
        pos_l.append(positions[sel])
        x_l.append(total[sel])
        y_l.append(meth[sel])
    return RegionData(
        sample_ids=tuple(sample_ids),
        positions=tuple(pos_l),
        total_reads=tuple(x_l),
        meth_reads=tuple(y_l),
        covariates=covariates,
        covariate_names=tuple(covariate_names or ()),
        name=name,
    )
