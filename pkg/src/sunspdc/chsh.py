"""CHSH Bell test from linear-polarization coincidence counts."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from sunspdc.errors import InsufficientDataError, InvalidArgumentError
from sunspdc.polarization import DensityMatrix, format_angle, joint_probability, linear_projector, setting_angle

log = logging.getLogger(__name__)

ANGLE_TOL_DEG = 1e-6
TSIRELSON = 2.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class ChshSettings:
    theta_s: float = 0.0
    theta_s_prime: float = 45.0
    theta_i: float = 22.5
    theta_i_prime: float = 67.5

    def __post_init__(self):
        for name in ("theta_s", "theta_s_prime", "theta_i", "theta_i_prime"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise InvalidArgumentError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    def pairs(self) -> list[tuple[float, float]]:
        """The four (signal, idler) angle pairs, in the order the S formula uses them."""
        return [
            (self.theta_s, self.theta_i),
            (self.theta_s, self.theta_i_prime),
            (self.theta_s_prime, self.theta_i),
            (self.theta_s_prime, self.theta_i_prime),
        ]

    def required_settings(self) -> list[tuple[float, float]]:
        """All 16 angle pairs: each E needs (a, b), (a+90, b+90), (a, b+90), (a+90, b)."""
        out = []
        for a, b in self.pairs():
            out.extend(_quad(a, b))
        return out

    def labels(self) -> list[tuple[str, str]]:
        return [(format_angle(a), format_angle(b)) for a, b in self.required_settings()]


def _quad(a, b):
    return [(a, b), (a + 90.0, b + 90.0), (a, b + 90.0), (a + 90.0, b)]


@dataclass
class Value:
    value: float
    std: float

    def to_dict(self):
        return {"value": self.value, "std": self.std}


def correlation_E(n1: float, n2: float, n3: float, n4: float) -> Value:
    """E = (N1 + N2 - N3 - N4)/(N1 + N2 + N3 + N4) for counts at
    (a, b), (a_perp, b_perp), (a, b_perp), (a_perp, b).

    Poisson variance N_k per count (1 for zero counts), first-order propagation.
    """
    n = np.array([n1, n2, n3, n4], dtype=float)
    if np.any(n < 0) or not np.all(np.isfinite(n)):
        raise InvalidArgumentError("counts must be finite and non-negative")
    tot = n.sum()
    if tot <= 0:
        raise InsufficientDataError("no coincidences in this setting block")
    plus, minus = n[0] + n[1], n[2] + n[3]
    e = (plus - minus) / tot
    d_plus, d_minus = 2.0 * minus / tot**2, -2.0 * plus / tot**2
    var = np.maximum(n, 1.0)
    std = math.sqrt(d_plus**2 * (var[0] + var[1]) + d_minus**2 * (var[2] + var[3]))
    return Value(float(e), std)


@dataclass
class ChshResult:
    E: list
    S: Value
    violation_sigmas: float
    signed_S: float
    settings: ChshSettings = field(default_factory=ChshSettings)
    std_method: str = "first-order Poisson propagation"
    day_to_day: Value | None = None

    def to_dict(self) -> dict:
        names = ["E(s,i)", "E(s,i')", "E(s',i)", "E(s',i')"]
        d = {
            "settings": {
                "theta_s": self.settings.theta_s,
                "theta_s_prime": self.settings.theta_s_prime,
                "theta_i": self.settings.theta_i,
                "theta_i_prime": self.settings.theta_i_prime,
            },
            "E": [{"name": nm, "angles": list(ab), **e.to_dict()} for nm, ab, e in zip(names, self.settings.pairs(), self.E)],
            "S": self.S.value,
            "S_std": self.S.std,
            "S_std_method": self.std_method,
            "signed_S": self.signed_S,
            "violation_sigmas": self.violation_sigmas,
        }
        if self.day_to_day is not None:
            d["S_day_to_day"] = self.day_to_day.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def chsh_S(E, settings: ChshSettings | None = None) -> ChshResult:
    """S = |E(s,i) - E(s,i') + E(s',i) + E(s',i')|; std is the root-sum-square of the E stds."""
    if len(E) != 4:
        raise InvalidArgumentError("need exactly four correlation values")
    E = [e if isinstance(e, Value) else Value(float(e), 0.0) for e in E]
    signed = E[0].value - E[1].value + E[2].value + E[3].value
    s = abs(signed)
    std = math.sqrt(sum(e.std**2 for e in E))
    log.debug("signed CHSH combination %.6f", signed)
    sig = (s - 2.0) / std if std > 0 else (math.inf if s > 2.0 else (-math.inf if s < 2.0 else 0.0))
    return ChshResult(E=E, S=Value(s, std), violation_sigmas=sig, signed_S=signed, settings=settings or ChshSettings())


def _match(records, a, b):
    for r in records:
        ra, rb = setting_angle(r.setting_s), setting_angle(r.setting_i)
        if ra is None or rb is None:
            continue
        if _angle_close(ra, a) and _angle_close(rb, b):
            return r
    return None


def _angle_close(x, y):
    d = (x - y) % 180.0
    return min(d, 180.0 - d) <= ANGLE_TOL_DEG


def chsh_counts(records, settings: ChshSettings | None = None) -> np.ndarray:
    """Normalized counts for the 16 CHSH settings, shape (4 E-blocks, 4)."""
    settings = settings or ChshSettings()
    req = settings.required_settings()
    found, missing = [], []
    for a, b in req:
        r = _match(records, a, b)
        if r is None:
            missing.append((a, b))
        else:
            found.append(r.normalized_count)
    if missing:
        listed = ", ".join(f"({a % 180:g}, {b % 180:g})" for a, b in dict.fromkeys(missing))
        raise InsufficientDataError(f"missing CHSH settings (signal, idler deg): {listed}")
    return np.array(found, dtype=float).reshape(4, 4)


def chsh_from_counts(counts, settings: ChshSettings | None = None) -> ChshResult:
    counts = np.asarray(counts, dtype=float).reshape(4, 4)
    return chsh_S([correlation_E(*row) for row in counts], settings)


def chsh_from_records(records, settings: ChshSettings | None = None) -> ChshResult:
    return chsh_from_counts(chsh_counts(records, settings), settings)


def exact_probabilities(rho: DensityMatrix, settings: ChshSettings | None = None) -> np.ndarray:
    settings = settings or ChshSettings()
    p = [joint_probability(rho, linear_projector(a), linear_projector(b)) for a, b in settings.required_settings()]
    return np.array(p).reshape(4, 4)


def exact_chsh(rho: DensityMatrix, settings: ChshSettings | None = None) -> ChshResult:
    """Infinite-statistics limit: E from exact probabilities, zero uncertainty."""
    settings = settings or ChshSettings()
    p = exact_probabilities(rho, settings)
    E = [Value(float((q[0] + q[1] - q[2] - q[3]) / q.sum()), 0.0) for q in p]
    return chsh_S(E, settings)


def monte_carlo_std(counts, n: int = 500, seed: int = 0, settings: ChshSettings | None = None) -> float:
    """Std of S over Poisson resamplings of the 16 counts."""
    counts = np.asarray(counts, dtype=float).reshape(4, 4)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    draws = rng.poisson(counts, size=(n, 4, 4)).astype(float)
    tot = draws.sum(axis=2)
    ok = np.all(tot > 0, axis=1)
    draws, tot = draws[ok], tot[ok]
    E = (draws[:, :, 0] + draws[:, :, 1] - draws[:, :, 2] - draws[:, :, 3]) / tot
    S = np.abs(E[:, 0] - E[:, 1] + E[:, 2] + E[:, 3])
    return float(S.std(ddof=1))


def day_to_day_spread(results) -> Value:
    """Mean and sample std of S over independent runs."""
    s = np.array([r.S.value for r in results])
    if s.size < 2:
        raise InsufficientDataError("need at least two runs for a spread")
    return Value(float(s.mean()), float(s.std(ddof=1)))


def predict_correlation_curve(rho: DensityMatrix, theta_s: float, theta_i_sweep) -> np.ndarray:
    ps = linear_projector(theta_s)
    return np.array([joint_probability(rho, ps, linear_projector(t)) for t in theta_i_sweep])


def fringe_visibility(rho: DensityMatrix, theta_s: float, n: int = 721) -> float:
    p = predict_correlation_curve(rho, theta_s, np.linspace(0.0, 180.0, n))
    hi, lo = p.max(), p.min()
    return float((hi - lo) / (hi + lo)) if hi + lo > 0 else 0.0


def curve_csv(rho: DensityMatrix, records, settings: ChshSettings | None = None, sweep=None) -> str:
    """Plot data: one block per signal angle, predictions paired with measured counts.

    Measured columns are filled on rows whose idler angle was measured.
    """
    settings = settings or ChshSettings()
    sweep = np.arange(0.0, 180.0 + 1e-9, 2.5) if sweep is None else np.asarray(sweep, dtype=float)
    signal_angles = sorted({a % 180.0 for a, _ in settings.required_settings()})
    buf = io.StringIO()
    buf.write("theta_s_deg,theta_i_deg,p_pred,count_norm,count_std\n")
    for a in signal_angles:
        measured = {}
        for r in records:
            ra, rb = setting_angle(r.setting_s), setting_angle(r.setting_i)
            if ra is not None and rb is not None and _angle_close(ra, a):
                scale = r.reference_power_nw / r.mean_power_nw
                measured[rb] = (r.normalized_count, math.sqrt(max(r.raw_coincidences, 1)) * scale)
        grid = sorted(set(sweep.tolist()) | set(measured))
        pred = predict_correlation_curve(rho, a, grid)
        for t, p in zip(grid, pred.tolist()):
            hit = next((v for k, v in measured.items() if _angle_close(k, t)), None)
            cn, cs = (repr(float(hit[0])), repr(float(hit[1]))) if hit else ("", "")
            buf.write(f"{float(a)!r},{float(t)!r},{p!r},{cn},{cs}\n")
    return buf.getvalue()
