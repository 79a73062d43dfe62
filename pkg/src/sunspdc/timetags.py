"""Event-level detector simulation and time-tag stream storage.

Each setting of an acquisition plan draws its randomness from a Philox
generator keyed by ``(rng_seed, setting_index, stage)``, so every setting
is reproducible on its own, whatever order or concurrency it runs with.

Binary stream layout (little-endian)::

    header  magic b"TTAG" | version u16 | tdc_resolution_ps u16 | record_count u64
    record  channel u8 | timestamp_ps u64
"""

from __future__ import annotations

import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sunspdc.errors import InvalidArgumentError, ParseError, PreconditionViolation
from sunspdc.polarization import DensityMatrix, setting_projector
from sunspdc.source import PumpProfile, SourceParams, mean_power, pair_rate_hz

SIGNAL = 0
IDLER = 1

MAGIC = b"TTAG"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype([("channel", "<u1"), ("timestamp", "<u8")])
assert HEADER.size == 16 and RECORD_DTYPE.itemsize == 9

PS_PER_S = 10**12
PAPER_TDC_RESOLUTION_PS = 81
PAPER_DURATION_S = 120.0
PAPER_DELAY_PS = 2250.0

# RNG stage keys
_STAGE_PAIRS, _STAGE_DARK_S, _STAGE_DARK_I = 0, 1, 2


@dataclass(frozen=True)
class DetectorParams:
    efficiency: float = 1.0
    dark_rate: float = 300.0
    jitter_sigma: float = 100.0
    channel_delay: float = 0.0
    tdc_resolution: int = PAPER_TDC_RESOLUTION_PS

    def __post_init__(self):
        for name in ("efficiency", "dark_rate", "jitter_sigma", "channel_delay"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise InvalidArgumentError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if not 0.0 < self.efficiency <= 1.0:
            raise InvalidArgumentError("efficiency must lie in (0, 1]")
        if self.dark_rate < 0:
            raise InvalidArgumentError("dark_rate must be >= 0")
        if self.jitter_sigma < 0:
            raise InvalidArgumentError("jitter_sigma must be >= 0")
        res = self.tdc_resolution
        if isinstance(res, bool) or int(res) != res or not 0 < int(res) < 2**16:
            raise InvalidArgumentError("tdc_resolution must be a positive integer number of ps below 65536")
        object.__setattr__(self, "tdc_resolution", int(res))


class TimeTagStream:
    """Time-ordered detector clicks: integer ps timestamps on the TDC grid."""

    def __init__(self, channels, timestamps, tdc_resolution: int = PAPER_TDC_RESOLUTION_PS, *, validate: bool = True):
        ch = np.asarray(channels, dtype=np.uint8).ravel()
        ts = np.asarray(timestamps, dtype=np.int64).ravel()
        if ch.size != ts.size:
            raise InvalidArgumentError("channels and timestamps differ in length")
        self.channels = ch
        self.timestamps = ts
        self.tdc_resolution = int(tdc_resolution)
        if validate:
            self.validate()
        ch.setflags(write=False)
        ts.setflags(write=False)

    @classmethod
    def single_channel(cls, channel: int, timestamps, tdc_resolution: int = PAPER_TDC_RESOLUTION_PS) -> "TimeTagStream":
        ts = np.asarray(timestamps, dtype=np.int64)
        return cls(np.full(ts.size, channel, dtype=np.uint8), ts, tdc_resolution)

    def validate(self):
        if not 0 < self.tdc_resolution < 2**16:
            raise PreconditionViolation("tdc_resolution out of range")
        if np.any(self.channels > IDLER):
            raise PreconditionViolation("channel must be 0 (signal) or 1 (idler)")
        if self.timestamps.size:
            if self.timestamps.min() < 0:
                raise PreconditionViolation("negative timestamp")
            if np.any(self.timestamps % self.tdc_resolution):
                raise PreconditionViolation("timestamp off the TDC grid")
        for c in (SIGNAL, IDLER):
            t = self.timestamps[self.channels == c]
            if np.any(np.diff(t) < 0):
                raise PreconditionViolation(f"channel {c} timestamps not sorted")

    def __len__(self):
        return int(self.timestamps.size)

    def times(self, channel: int | None = None) -> np.ndarray:
        if channel is None:
            return self.timestamps
        return self.timestamps[self.channels == channel]

    def __eq__(self, other):
        return (
            isinstance(other, TimeTagStream)
            and self.tdc_resolution == other.tdc_resolution
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    def to_bytes(self) -> bytes:
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        rec["channel"] = self.channels
        rec["timestamp"] = self.timestamps
        return HEADER.pack(MAGIC, FORMAT_VERSION, self.tdc_resolution, len(self)) + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, path=None) -> "TimeTagStream":
        if len(data) < HEADER.size:
            raise ParseError(f"truncated header ({len(data)} of {HEADER.size} bytes)", offset=len(data), path=path)
        magic, version, res, count = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise ParseError(f"bad magic {magic!r}", offset=0, path=path)
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported version {version}", offset=4, path=path)
        if res == 0:
            raise ParseError("zero tdc resolution", offset=6, path=path)
        expected = HEADER.size + count * RECORD_DTYPE.itemsize
        if len(data) != expected:
            where = min(len(data), expected)
            if len(data) > expected:
                raise ParseError(f"{len(data) - expected} trailing bytes after {count} records", offset=where, path=path)
            # offset of the first incomplete record
            full = (len(data) - HEADER.size) // RECORD_DTYPE.itemsize
            raise ParseError(
                f"truncated: header declares {count} records, file holds {full}",
                offset=HEADER.size + full * RECORD_DTYPE.itemsize,
                path=path,
            )
        rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER.size)
        ch = rec["channel"].copy()
        ts_u = rec["timestamp"]
        bad = np.flatnonzero(ch > IDLER)
        if bad.size:
            raise ParseError(f"invalid channel {ch[bad[0]]}", offset=HEADER.size + int(bad[0]) * 9, path=path)
        bad = np.flatnonzero(ts_u >= 2**63)
        if bad.size:
            raise ParseError("timestamp overflows int64", offset=HEADER.size + int(bad[0]) * 9 + 1, path=path)
        ts = ts_u.astype(np.int64)
        bad = np.flatnonzero(ts % res)
        if bad.size:
            raise ParseError(f"timestamp {ts[bad[0]]} off the {res} ps grid", offset=HEADER.size + int(bad[0]) * 9 + 1, path=path)
        for c in (SIGNAL, IDLER):
            idx = np.flatnonzero(ch == c)
            back = np.flatnonzero(np.diff(ts[idx]) < 0)
            if back.size:
                i = int(idx[back[0] + 1])
                raise ParseError(f"channel {c} timestamps decrease", offset=HEADER.size + i * 9, path=path)
        return cls(ch, ts, res, validate=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("channel,timestamp_ps\n")
        for c, t in zip(self.channels.tolist(), self.timestamps.tolist()):
            buf.write(f"{c},{t}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, tdc_resolution: int = PAPER_TDC_RESOLUTION_PS, path=None) -> "TimeTagStream":
        lines = text.splitlines()
        if not lines or lines[0].strip() != "channel,timestamp_ps":
            raise ParseError("expected header 'channel,timestamp_ps'", offset=0, path=path)
        ch, ts = [], []
        offset = len(lines[0]) + 1
        for line in lines[1:]:
            if line.strip():
                try:
                    c, t = line.split(",")
                    ch.append(int(c))
                    ts.append(int(t))
                except ValueError:
                    raise ParseError(f"malformed row {line!r}", offset=offset, path=path) from None
            offset += len(line) + 1
        try:
            return cls(ch, ts, tdc_resolution)
        except PreconditionViolation as exc:
            raise ParseError(str(exc), path=path) from None


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_stream(stream: TimeTagStream, path):
    path = Path(path)
    if path.suffix == ".csv":
        atomic_write_bytes(path, stream.to_csv().encode())
    else:
        atomic_write_bytes(path, stream.to_bytes())


def read_stream(path, tdc_resolution: int = PAPER_TDC_RESOLUTION_PS) -> TimeTagStream:
    path = Path(path)
    if path.suffix == ".csv":
        return TimeTagStream.from_csv(path.read_text(), tdc_resolution, path=path)
    return TimeTagStream.from_bytes(path.read_bytes(), path=path)


@dataclass
class AcquisitionPlan:
    """Analyzer settings measured one after another.

    ``start_times`` defaults to back-to-back acquisitions beginning at
    ``start_time``.
    """

    settings: list
    duration_s: float = PAPER_DURATION_S
    rng_seed: int = 0
    start_time: float = 0.0
    start_times: list | None = None

    def __post_init__(self):
        self.settings = [(str(s), str(i)) for s, i in self.settings]
        if not self.settings:
            raise InvalidArgumentError("acquisition plan has no settings")
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise InvalidArgumentError("duration_s must be > 0")
        if int(self.rng_seed) != self.rng_seed or self.rng_seed < 0:
            raise InvalidArgumentError("rng_seed must be a non-negative integer")
        self.rng_seed = int(self.rng_seed)
        if self.start_times is None:
            self.start_times = [self.start_time + k * self.duration_s for k in range(len(self.settings))]
        if len(self.start_times) != len(self.settings):
            raise InvalidArgumentError("start_times must match settings")
        for s, i in self.settings:
            setting_projector(s)
            setting_projector(i)


@dataclass
class SettingAcquisition:
    index: int
    setting: tuple
    signal: TimeTagStream
    idler: TimeTagStream
    start_time: float
    duration_s: float
    mean_power_nw: float
    emitted_pairs: int = 0
    info: dict = field(default_factory=dict)


def setting_rng(seed: int, setting_index: int, stage: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(setting_index), int(stage)))
    return np.random.Generator(np.random.Philox(ss))


def _emission_times(rng, source, profile, t0, duration):
    """Inhomogeneous Poisson pair emission by thinning; seconds from t0."""
    if profile.is_constant:
        rate = pair_rate_hz(source, profile.powers[0])
        n = rng.poisson(rate * duration)
        return np.sort(rng.uniform(0.0, duration, n))
    rmax = pair_rate_hz(source, profile.max_power(t0, t0 + duration))
    n = rng.poisson(rmax * duration)
    t = np.sort(rng.uniform(0.0, duration, n))
    if rmax == 0:
        return t
    keep = rng.uniform(0.0, rmax, n) < pair_rate_hz(source, profile.power_at(t0 + t))
    return t[keep]


def _snap(x_ps, res):
    return np.rint(np.asarray(x_ps) / res).astype(np.int64) * res


def simulate_setting(
    rho: DensityMatrix,
    source: SourceParams,
    profile: PumpProfile,
    det_s: DetectorParams,
    det_i: DetectorParams,
    setting: tuple,
    start_time: float,
    duration_s: float,
    rng_seed: int,
    index: int,
) -> SettingAcquisition:
    if det_s.tdc_resolution != det_i.tdc_resolution:
        raise InvalidArgumentError("both channels must share one TDC resolution")
    res = det_s.tdc_resolution
    ps, pi = setting_projector(setting[0]), setting_projector(setting[1])
    pairs_rng = setting_rng(rng_seed, index, _STAGE_PAIRS)

    t_emit = _emission_times(pairs_rng, source, profile, start_time, duration_s)
    n = t_emit.size
    # joint outcome probabilities over {pass, block}^2
    r = rho.entries
    ops = [
        np.kron(a, b)
        for a in (ps.matrix, np.eye(2) - ps.matrix)
        for b in (pi.matrix, np.eye(2) - pi.matrix)
    ]
    probs = np.clip([np.einsum("ij,ji->", r, op).real for op in ops], 0.0, None)
    probs = probs / probs.sum()
    outcome = pairs_rng.choice(4, size=n, p=probs)
    pass_s = (outcome == 0) | (outcome == 1)
    pass_i = (outcome == 0) | (outcome == 2)
    pass_s &= pairs_rng.random(n) < det_s.efficiency
    pass_i &= pairs_rng.random(n) < det_i.efficiency
    jit_s = pairs_rng.normal(0.0, 1.0, n) * det_s.jitter_sigma
    jit_i = pairs_rng.normal(0.0, 1.0, n) * det_i.jitter_sigma

    end_ps = int(round(duration_s * PS_PER_S))
    # emission instant on the TDC clock grid, detector delay + jitter quantized on top
    grid = np.floor(t_emit * PS_PER_S / res).astype(np.int64) * res
    sig = grid[pass_s] + _snap(det_s.channel_delay + jit_s[pass_s], res)
    idl = grid[pass_i] + _snap(det_i.channel_delay + jit_i[pass_i], res)

    def darks(det, stage):
        rng = setting_rng(rng_seed, index, stage)
        k = rng.poisson(det.dark_rate * duration_s)
        return _snap(rng.uniform(0.0, end_ps, k), res)

    def finish(clicks, dark, channel):
        t = np.concatenate([clicks, dark])
        t = t[(t >= 0) & (t < end_ps)]
        t.sort(kind="stable")
        return TimeTagStream.single_channel(channel, t, res)

    signal = finish(sig, darks(det_s, _STAGE_DARK_S), SIGNAL)
    idler = finish(idl, darks(det_i, _STAGE_DARK_I), IDLER)
    return SettingAcquisition(
        index=index,
        setting=tuple(setting),
        signal=signal,
        idler=idler,
        start_time=start_time,
        duration_s=duration_s,
        mean_power_nw=mean_power(profile, start_time, start_time + duration_s),
        emitted_pairs=int(n),
        info={"pass_probability": float(probs[0])},
    )


def simulate_acquisition(
    rho: DensityMatrix,
    source: SourceParams,
    profile: PumpProfile,
    det_s: DetectorParams,
    det_i: DetectorParams,
    plan: AcquisitionPlan,
) -> list[SettingAcquisition]:
    """Simulate every setting of ``plan``; returns one signal/idler stream pair per setting."""
    return [
        simulate_setting(rho, source, profile, det_s, det_i, setting, plan.start_times[k], plan.duration_s, plan.rng_seed, k)
        for k, setting in enumerate(plan.settings)
    ]
