"""Coincidence analysis of signal/idler time-tag streams.

Time differences are always ``dt = t_idler - t_signal`` in ps.  Histogram
bins are half-open ``[lo, hi)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from sunspdc.errors import InsufficientDataError, InvalidArgumentError, ParseError, PreconditionViolation

PAPER_BIN_WIDTH_PS = 162.0
PAPER_WINDOW_PS = 1000.0
PAPER_EXCLUSION_PS = 5000.0
REFERENCE_POWER_NW = 100.0
DEFAULT_RANGE_PS = (-64 * 162.0, 64 * 162.0)

COUNT_TABLE_HEADER = ["setting_s", "setting_i", "raw", "accidental", "duration_s", "mean_power_nw", "normalized"]


def _as_times(stream) -> np.ndarray:
    """Accept a TimeTagStream (all its clicks) or a plain array of ps timestamps."""
    t = getattr(stream, "timestamps", stream)
    t = np.asarray(t, dtype=np.int64)
    if np.any(np.diff(t) < 0):
        raise PreconditionViolation("stream is not sorted")
    return t


@dataclass
class Histogram:
    bin_width: float
    range: tuple
    counts: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return self.range[0] + self.bin_width * np.arange(self.counts.size + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.range[0] + self.bin_width * (np.arange(self.counts.size) + 0.5)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def peak_center(self) -> float:
        """Center of the highest bin; ties go to the smaller dt."""
        return float(self.centers[int(np.argmax(self.counts))])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_center_ps,count\n")
        for c, n in zip(self.centers.tolist(), self.counts.tolist()):
            buf.write(f"{c!r},{n}\n")
        return buf.getvalue()


def _check_range(bin_width, rng):
    lo, hi = float(rng[0]), float(rng[1])
    if not (bin_width > 0 and math.isfinite(bin_width)):
        raise InvalidArgumentError("bin_width must be > 0")
    if not lo < hi:
        raise InvalidArgumentError("range must satisfy min < max")
    return lo, hi


def pair_differences(signal, idler, lo: float, hi: float) -> np.ndarray:
    """All dt = t_i - t_s with lo <= dt < hi, ordered by signal click then idler click."""
    ts, ti = _as_times(signal), _as_times(idler)
    if ts.size == 0 or ti.size == 0:
        return np.empty(0, dtype=np.int64)
    # for each signal click the matching idler slice; the sweep is monotone in both pointers
    start = np.searchsorted(ti, ts + lo, side="left")
    stop = np.searchsorted(ti, ts + hi, side="left")
    # ts + lo may be fractional; searchsorted on integers with float keys is exact for ps-scale values
    n = stop - start
    total = int(n.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    owner = np.repeat(np.arange(ts.size), n)
    offsets = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    return ti[start[owner] + offsets] - ts[owner]


def cross_correlate(signal, idler, bin_width: float = PAPER_BIN_WIDTH_PS, range: tuple = DEFAULT_RANGE_PS) -> Histogram:
    lo, hi = _check_range(bin_width, range)
    nbins = int(math.ceil((hi - lo) / bin_width))
    dt = pair_differences(signal, idler, lo, hi)
    idx = np.floor((dt - lo) / bin_width).astype(np.int64)
    counts = np.bincount(idx, minlength=nbins)[:nbins]
    return Histogram(float(bin_width), (lo, hi), counts.astype(np.int64))


def window_coincidences(signal, idler, center: float, width: float) -> int:
    """Pairs with |dt - center| <= width/2, each click used at most once (greedy earliest match)."""
    if not width > 0:
        raise InvalidArgumentError("window width must be > 0")
    ts, ti = _as_times(signal), _as_times(idler)
    if ts.size == 0 or ti.size == 0:
        return 0
    lo_t, hi_t = center - width / 2.0, center + width / 2.0
    start = np.searchsorted(ti, ts + lo_t, side="left")
    stop = np.searchsorted(ti, ts + hi_t, side="right")
    cand = np.flatnonzero(stop > start)
    # windows only move forward, so the earliest unused idler is a single pointer
    j = 0
    matched = 0
    for k in cand.tolist():
        j = max(j, int(start[k]))
        if j < stop[k]:
            matched += 1
            j += 1
    return matched


def accidental_rate(
    signal,
    idler,
    duration_s: float,
    exclusion: float = PAPER_EXCLUSION_PS,
    range: tuple = DEFAULT_RANGE_PS,
    center: float | None = None,
    window: float = PAPER_WINDOW_PS,
    bin_width: float = PAPER_BIN_WIDTH_PS,
) -> float:
    """Accidental coincidences per second inside one coincidence window.

    Estimated from the mean count of histogram bins lying entirely more than
    ``exclusion`` away from the correlation peak.
    """
    if not duration_s > 0:
        raise InvalidArgumentError("duration must be > 0")
    lo, hi = _check_range(bin_width, range)
    hist = cross_correlate(signal, idler, bin_width, (lo, hi))
    if center is None:
        if hist.total == 0:
            raise InsufficientDataError("empty histogram: no peak to exclude around")
        center = hist.peak_center()
    if not (lo < center - exclusion and center + exclusion < hi):
        raise InvalidArgumentError("histogram range must extend beyond the exclusion zone on both sides")
    edges = hist.edges
    full = edges[1:] <= hi
    far = (edges[1:] <= center - exclusion) | (edges[:-1] >= center + exclusion)
    sel = hist.counts[full & far]
    if sel.size == 0:
        raise InsufficientDataError("no histogram bins lie beyond the exclusion zone")
    if _as_times(signal).size == 0 or _as_times(idler).size == 0:
        raise InsufficientDataError("a stream is empty")
    per_bin = sel.mean()
    return float(per_bin * (window / bin_width) / duration_s)


@dataclass(frozen=True)
class CountRecord:
    setting_s: str
    setting_i: str
    raw_coincidences: int
    accidental_estimate: float
    duration_s: float
    mean_power_nw: float
    reference_power_nw: float = REFERENCE_POWER_NW
    subtract_accidentals: bool = False

    @property
    def setting(self) -> tuple:
        return (self.setting_s, self.setting_i)

    @property
    def normalized_count(self) -> float:
        n = float(self.raw_coincidences)
        if self.subtract_accidentals:
            n = max(0.0, n - self.accidental_estimate)
        return n * self.reference_power_nw / self.mean_power_nw


def normalize(
    setting_s: str,
    setting_i: str,
    raw: int,
    mean_power_nw: float,
    duration_s: float,
    accidental: float = 0.0,
    reference_power: float = REFERENCE_POWER_NW,
    subtract_accidentals: bool = False,
) -> CountRecord:
    """Power-normalized count record; ``accidental`` is counts per window over the acquisition."""
    if not (mean_power_nw > 0 and math.isfinite(mean_power_nw)):
        raise InvalidArgumentError("mean pump power must be > 0")
    if not reference_power > 0:
        raise InvalidArgumentError("reference power must be > 0")
    if raw < 0 or accidental < 0:
        raise InvalidArgumentError("counts must be >= 0")
    return CountRecord(str(setting_s), str(setting_i), int(raw), float(accidental), float(duration_s), float(mean_power_nw), float(reference_power), subtract_accidentals)


def renormalize(record: CountRecord, reference_power: float) -> CountRecord:
    return normalize(
        record.setting_s,
        record.setting_i,
        record.raw_coincidences,
        record.mean_power_nw,
        record.duration_s,
        record.accidental_estimate,
        reference_power,
        record.subtract_accidentals,
    )


def reduce_setting(
    signal,
    idler,
    setting: tuple,
    duration_s: float,
    mean_power_nw: float,
    bin_width: float = PAPER_BIN_WIDTH_PS,
    window: float = PAPER_WINDOW_PS,
    exclusion: float = PAPER_EXCLUSION_PS,
    range: tuple = DEFAULT_RANGE_PS,
    center: float | None = None,
    reference_power: float = REFERENCE_POWER_NW,
    subtract_accidentals: bool = False,
):
    """Histogram, window count and accidental estimate for one setting.

    Returns ``(histogram, record, center_used, accidental_note)``; the note is
    None unless the accidental estimate was unavailable.
    """
    hist = cross_correlate(signal, idler, bin_width, range)
    if center is None:
        center = hist.peak_center() if hist.total else 0.0
    raw = window_coincidences(signal, idler, center, window)
    note = None
    try:
        acc = accidental_rate(signal, idler, duration_s, exclusion, range, center, window, bin_width) * duration_s
    except InsufficientDataError as exc:
        acc, note = 0.0, f"insufficient data for accidental estimate: {exc}"
    record = normalize(setting[0], setting[1], raw, mean_power_nw, duration_s, acc, reference_power, subtract_accidentals)
    return hist, record, center, note


def count_table_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COUNT_TABLE_HEADER)
    for r in records:
        w.writerow([r.setting_s, r.setting_i, r.raw_coincidences, repr(r.accidental_estimate), repr(r.duration_s), repr(r.mean_power_nw), repr(r.normalized_count)])
    return buf.getvalue()


def parse_count_table(text: str, reference_power: float = REFERENCE_POWER_NW, path=None) -> list[CountRecord]:
    """Read a count table; the normalized column is recomputed and must agree."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [h.strip() for h in rows[0]] != COUNT_TABLE_HEADER:
        raise ParseError(f"line 1: expected header {','.join(COUNT_TABLE_HEADER)!r}", path=path)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(COUNT_TABLE_HEADER):
            raise ParseError(f"line {lineno}: expected {len(COUNT_TABLE_HEADER)} fields", path=path)
        try:
            raw = int(row[2])
            acc, dur, pw, norm = (float(x) for x in row[3:])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric field", path=path) from None
        try:
            rec = normalize(row[0], row[1], raw, pw, dur, acc, reference_power)
        except InvalidArgumentError as exc:
            raise ParseError(f"line {lineno}: {exc}", path=path) from None
        if not math.isclose(rec.normalized_count, norm, rel_tol=1e-9, abs_tol=1e-12):
            # a table normalized with accidental subtraction
            sub = normalize(row[0], row[1], raw, pw, dur, acc, reference_power, subtract_accidentals=True)
            if not math.isclose(sub.normalized_count, norm, rel_tol=1e-9, abs_tol=1e-12):
                raise ParseError(f"line {lineno}: normalized column disagrees with raw/power", path=path)
            rec = sub
        out.append(rec)
    return out
