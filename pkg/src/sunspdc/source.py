"""Source imperfection model, pump-power profiles and expected count rates.

Power is carried in nW everywhere; the only unit conversion lives in
:func:`expected_coincidences` / :func:`pair_rate_hz` where the per-mW pair
rate is applied.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sunspdc.errors import InvalidArgumentError, OutOfDomainError, ParseError
from sunspdc.polarization import (
    DensityMatrix,
    Projector,
    concurrence,
    fidelity_to_pure,
    joint_probability,
    purity,
    singlet,
)

NW_PER_MW = 1e6

# detected coincidence rate per mW of pump (detection efficiencies folded in)
PAPER_PAIR_RATE_PER_MW = 1600.0
PAPER_CONCURRENCE = 0.905
PAPER_PURITY = 0.919
PAPER_FIDELITY = 0.939


def _finite(name, value):
    value = float(value)
    if not math.isfinite(value):
        raise InvalidArgumentError(f"{name} must be finite")
    return value


@dataclass(frozen=True)
class SourceParams:
    pair_rate_per_mw: float = PAPER_PAIR_RATE_PER_MW
    phase_error: float = 0.0
    dephasing: float = 0.0
    white_noise: float = 0.0
    amplitude_imbalance: float = 0.0

    def __post_init__(self):
        for name in ("pair_rate_per_mw", "phase_error", "dephasing", "white_noise", "amplitude_imbalance"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        if self.pair_rate_per_mw < 0:
            raise InvalidArgumentError("pair_rate_per_mw must be >= 0")
        if not 0.0 <= self.dephasing <= 1.0:
            raise InvalidArgumentError("dephasing must lie in [0, 1]")
        if not 0.0 <= self.white_noise <= 1.0:
            raise InvalidArgumentError("white_noise must lie in [0, 1]")
        if abs(self.amplitude_imbalance) > 1.0:
            raise InvalidArgumentError("amplitude_imbalance must lie in [-1, 1]")

    def replace(self, **changes) -> "SourceParams":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return SourceParams(**d)


def build_state(params: SourceParams) -> DensityMatrix:
    """Emitted two-photon state for the given imperfections.

    The coherent part is sqrt((1+e)/2)|HV> + e^{i(pi+phase_error)} sqrt((1-e)/2)|VH>,
    its HV/VH coherence is scaled by (1 - dephasing) and the result is mixed
    with white noise.
    """
    if not isinstance(params, SourceParams):
        raise InvalidArgumentError("expected SourceParams")
    eps = params.amplitude_imbalance
    a_hv = math.sqrt((1.0 + eps) / 2.0)
    a_vh = math.sqrt((1.0 - eps) / 2.0) * np.exp(1j * (math.pi + params.phase_error))
    coh = np.zeros((4, 4), dtype=complex)
    coh[1, 1] = a_hv * a_hv
    coh[2, 2] = abs(a_vh) ** 2
    coh[1, 2] = (1.0 - params.dephasing) * a_hv * np.conj(a_vh)
    coh[2, 1] = np.conj(coh[1, 2])
    w = params.white_noise
    return DensityMatrix.from_psd((1.0 - w) * coh + w * np.eye(4) / 4)


@dataclass
class Calibration:
    params: SourceParams
    concurrence: float
    purity: float
    fidelity: float
    residuals: dict = field(default_factory=dict)


def _bisect(fn, lo, hi, tol=1e-13, max_iter=200):
    flo = fn(lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def calibrate_source(
    target_concurrence: float = PAPER_CONCURRENCE,
    target_fidelity: float | None = None,
    target_purity: float | None = None,
    pair_rate_per_mw: float = PAPER_PAIR_RATE_PER_MW,
) -> Calibration:
    """Fit white noise to a concurrence target, then phase error to a fidelity target.

    Phase error is a local unitary, so it leaves concurrence and purity
    untouched; it can only lower the fidelity.  Whatever cannot be matched
    is reported in ``residuals`` (achieved minus target).
    """
    if not 0.0 <= target_concurrence <= 1.0:
        raise InvalidArgumentError("target concurrence must lie in [0, 1]")
    base = SourceParams(pair_rate_per_mw=pair_rate_per_mw)
    if target_concurrence == 0.0:
        w = 1.0
    else:
        # white noise w gives Werner v = 1 - w, C = (3v - 1)/2; solved numerically
        w = _bisect(lambda x: concurrence(build_state(base.replace(white_noise=x))) - target_concurrence, 0.0, 2.0 / 3.0)
    params = base.replace(white_noise=w)
    f0 = fidelity_to_pure(build_state(params), singlet())
    if target_fidelity is not None and target_fidelity < f0:
        d = _bisect(
            lambda x: fidelity_to_pure(build_state(params.replace(phase_error=x)), singlet()) - target_fidelity,
            0.0,
            math.pi,
        )
        params = params.replace(phase_error=d)
    rho = build_state(params)
    c, p, f = concurrence(rho), purity(rho), fidelity_to_pure(rho, singlet())
    residuals = {"concurrence": c - target_concurrence}
    if target_fidelity is not None:
        residuals["fidelity"] = f - target_fidelity
    if target_purity is not None:
        residuals["purity"] = p - target_purity
    return Calibration(params, c, p, f, residuals)


def paper_source_params(pair_rate_per_mw: float = PAPER_PAIR_RATE_PER_MW) -> SourceParams:
    """Source matching the measured concurrence (white noise) and fidelity (phase error)."""
    return calibrate_source(
        PAPER_CONCURRENCE, target_fidelity=PAPER_FIDELITY, pair_rate_per_mw=pair_rate_per_mw
    ).params


class PumpProfile:
    """Pump power samples (epoch seconds, nW) with piecewise-linear interpolation.

    A single-sample profile is constant for all times.
    """

    def __init__(self, times, powers):
        t = np.asarray(times, dtype=float).ravel()
        p = np.asarray(powers, dtype=float).ravel()
        if t.size == 0 or t.size != p.size:
            raise InvalidArgumentError("profile needs equally many (>= 1) times and powers")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise InvalidArgumentError("profile samples must be finite")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgumentError("profile times must be strictly increasing")
        if np.any(p < 0):
            raise InvalidArgumentError("profile powers must be >= 0")
        t.setflags(write=False)
        p.setflags(write=False)
        self.times = t
        self.powers = p

    @classmethod
    def constant(cls, power_nw: float) -> "PumpProfile":
        return cls([0.0], [power_nw])

    @property
    def is_constant(self) -> bool:
        return self.times.size == 1

    @property
    def domain(self) -> tuple[float, float]:
        if self.is_constant:
            return (-math.inf, math.inf)
        return (float(self.times[0]), float(self.times[-1]))

    def power_at(self, t):
        if self.is_constant:
            return np.full(np.shape(t), self.powers[0]) if np.ndim(t) else float(self.powers[0])
        return np.interp(t, self.times, self.powers)

    def max_power(self, t0: float, t1: float) -> float:
        if self.is_constant:
            return float(self.powers[0])
        inside = self.powers[(self.times > t0) & (self.times < t1)]
        ends = self.power_at(np.array([t0, t1]))
        return float(max(ends.max(), inside.max() if inside.size else 0.0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("time_s,power_nw\n")
        for t, p in zip(self.times.tolist(), self.powers.tolist()):
            buf.write(f"{t!r},{p!r}\n")
        return buf.getvalue()

    def __eq__(self, other):
        return (
            isinstance(other, PumpProfile)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.powers, other.powers)
        )


def parse_profile_csv(text: str, path=None) -> PumpProfile:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty profile file", path=path) from None
    if [h.strip() for h in header] != ["time_s", "power_nw"]:
        raise ParseError(f"line 1: expected header 'time_s,power_nw', got {','.join(header)!r}", path=path)
    times, powers = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ParseError(f"line {lineno}: expected 2 fields, got {len(row)}", path=path)
        try:
            t, p = float(row[0]), float(row[1])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric field", path=path) from None
        if not math.isfinite(t) or math.isnan(p) or math.isinf(p):
            raise ParseError(f"line {lineno}: non-finite value", path=path)
        if p < 0:
            raise ParseError(f"line {lineno}: negative power {p!r}", path=path)
        if times and t <= times[-1]:
            raise ParseError(f"line {lineno}: time {t!r} not increasing", path=path)
        times.append(t)
        powers.append(p)
    if not times:
        raise ParseError("profile has no samples", path=path)
    return PumpProfile(times, powers)


def load_profile(path) -> PumpProfile:
    path = Path(path)
    return parse_profile_csv(path.read_text(), path=path)


def mean_power(profile: PumpProfile, t0: float, t1: float) -> float:
    """Time-weighted mean power (nW) over the part of [t0, t1] covered by the profile."""
    t0, t1 = float(t0), float(t1)
    if not t0 < t1:
        raise InvalidArgumentError("need t0 < t1")
    if profile.is_constant:
        return float(profile.powers[0])
    lo, hi = max(t0, profile.times[0]), min(t1, profile.times[-1])
    if not lo < hi:
        raise OutOfDomainError(f"[{t0}, {t1}] does not overlap the profile domain {profile.domain}")
    inner = profile.times[(profile.times > lo) & (profile.times < hi)]
    knots = np.concatenate(([lo], inner, [hi]))
    vals = profile.power_at(knots)
    # trapezoid rule is exact on a piecewise-linear interpolant
    area = float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(knots)))
    return area / (hi - lo)


def diurnal_profile(noon_epoch_s: float, peak_nw: float = 195.0, daylight_h: float = 12.0, step_s: float = 60.0) -> PumpProfile:
    """Clear-sky day shaped like a sine arch peaking at solar noon."""
    half = daylight_h * 3600.0 / 2.0
    t = np.arange(-half, half + step_s / 2, step_s)
    p = peak_nw * np.clip(np.cos(np.pi * t / (2 * half)), 0.0, None) ** 1.5
    return PumpProfile(noon_epoch_s + t, p)


def pair_rate_hz(params: SourceParams, power_nw: float) -> float:
    return params.pair_rate_per_mw * power_nw / NW_PER_MW


def expected_coincidences(
    rho: DensityMatrix,
    ps: Projector,
    pi: Projector,
    params: SourceParams,
    power: float,
    duration: float,
    eta_s: float = 1.0,
    eta_i: float = 1.0,
) -> float:
    if power < 0:
        raise InvalidArgumentError("power must be >= 0")
    if duration <= 0:
        raise InvalidArgumentError("duration must be > 0")
    if not (0.0 < eta_s <= 1.0 and 0.0 < eta_i <= 1.0):
        raise InvalidArgumentError("efficiencies must lie in (0, 1]")
    return pair_rate_hz(params, power) * duration * eta_s * eta_i * joint_probability(rho, ps, pi)
