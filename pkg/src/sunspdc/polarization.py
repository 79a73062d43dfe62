"""Two-qubit polarization states, analyzers and entanglement measures.

Basis ordering is fixed everywhere (including serialization) as
``(HH, HV, VH, VV)`` with the signal photon as the first tensor factor.

Circular polarizations follow ``R = (H - iV)/sqrt(2)`` and
``L = (H + iV)/sqrt(2)``.  Any fixed convention gives the same
concurrence, purity, fidelity and CHSH values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from sunspdc.errors import InvalidArgumentError, PreconditionViolation

BASIS_LABELS = ("HH", "HV", "VH", "VV")

NORM_TOL = 1e-12
HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-10
IDEMPOTENT_TOL = 1e-12

_SQ2 = 1.0 / math.sqrt(2.0)
_SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]])
_YY = np.kron(_SIGMA_Y, _SIGMA_Y)
# eigenvalues below this are round-off from rank-deficient states
_EIG_FLOOR = 1e-14


def _frozen(a, dtype=complex):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PureState:
    amplitudes: np.ndarray

    def __post_init__(self):
        amp = _frozen(self.amplitudes)
        if amp.shape != (4,):
            raise InvalidArgumentError(f"expected 4 amplitudes, got shape {amp.shape}")
        if not np.all(np.isfinite(amp)):
            raise InvalidArgumentError("amplitudes must be finite")
        norm = float(np.vdot(amp, amp).real)
        if abs(norm - 1.0) > NORM_TOL:
            raise InvalidArgumentError(f"state not normalized (|psi|^2 = {norm!r})")
        object.__setattr__(self, "amplitudes", amp)

    @classmethod
    def from_unnormalized(cls, amplitudes) -> "PureState":
        amp = np.asarray(amplitudes, dtype=complex)
        norm = np.linalg.norm(amp)
        if norm == 0 or not np.isfinite(norm):
            raise InvalidArgumentError("cannot normalize a zero or non-finite vector")
        return cls(amp / norm)

    def overlap(self, other: "PureState") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def equals_up_to_phase(self, other: "PureState", tol: float = 1e-12) -> bool:
        return abs(abs(self.overlap(other)) - 1.0) <= tol


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Validated 4x4 density matrix.

    Matrices that miss positivity by less than ``PSD_TOL`` are kept as-is;
    anything worse is rejected.
    """

    entries: np.ndarray

    def __post_init__(self):
        m = _frozen(self.entries)
        if m.shape != (4, 4):
            raise PreconditionViolation(f"expected a 4x4 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise PreconditionViolation("matrix has non-finite entries")
        herm_err = np.max(np.abs(m - m.conj().T))
        if herm_err > HERMITIAN_TOL:
            raise PreconditionViolation(f"matrix not Hermitian (max deviation {herm_err:.3g})")
        tr = np.trace(m).real
        if abs(tr - 1.0) > TRACE_TOL:
            raise PreconditionViolation(f"trace is {tr!r}, expected 1")
        lo = np.linalg.eigvalsh(0.5 * (m + m.conj().T))[0]
        if lo < -PSD_TOL:
            raise PreconditionViolation(f"matrix not positive semidefinite (min eigenvalue {lo:.3g})")
        object.__setattr__(self, "entries", m)

    @classmethod
    def from_psd(cls, matrix) -> "DensityMatrix":
        """Hermitize and trace-normalize a matrix that is PSD by construction."""
        m = np.asarray(matrix, dtype=complex)
        m = 0.5 * (m + m.conj().T)
        return cls(m / np.trace(m).real)

    @classmethod
    def maximally_mixed(cls) -> "DensityMatrix":
        return cls(np.eye(4) / 4)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    def to_dict(self) -> dict:
        return {
            "basis": list(BASIS_LABELS),
            "re": self.entries.real.tolist(),
            "im": self.entries.imag.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DensityMatrix":
        try:
            re = np.asarray(d["re"], dtype=float)
            im = np.asarray(d["im"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"bad density-matrix object: {exc}") from None
        if "basis" in d and list(d["basis"]) != list(BASIS_LABELS):
            raise InvalidArgumentError(f"unsupported basis ordering {d['basis']!r}")
        return cls(re + 1j * im)

    def to_json(self) -> str:
        # repr-based float formatting makes the round trip bit-exact
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DensityMatrix":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Projector:
    """Rank-1 single-photon polarization analyzer outcome."""

    label: str
    matrix: np.ndarray

    def __post_init__(self):
        m = _frozen(self.matrix)
        if m.shape != (2, 2):
            raise InvalidArgumentError("projector must be 2x2")
        if np.max(np.abs(m @ m - m)) > IDEMPOTENT_TOL or abs(np.trace(m) - 1) > IDEMPOTENT_TOL:
            raise InvalidArgumentError(f"{self.label!r} is not a rank-1 projector")
        object.__setattr__(self, "matrix", m)

    def complement(self) -> "Projector":
        return Projector(f"~{self.label}", np.eye(2) - self.matrix)


def _ket_projector(label, ket):
    ket = np.asarray(ket, dtype=complex)
    return Projector(label, np.outer(ket, ket.conj()))


NAMED_KETS = {
    "H": np.array([1.0, 0.0]),
    "V": np.array([0.0, 1.0]),
    "D": np.array([_SQ2, _SQ2]),
    "A": np.array([_SQ2, -_SQ2]),
    "R": np.array([_SQ2, -1j * _SQ2]),
    "L": np.array([_SQ2, 1j * _SQ2]),
}

# linear-polarizer angles equivalent to the named linear states
NAMED_ANGLES = {"H": 0.0, "V": 90.0, "D": 45.0, "A": 135.0}


def named_projector(label: str) -> Projector:
    try:
        ket = NAMED_KETS[label]
    except KeyError:
        raise InvalidArgumentError(f"unknown polarization label {label!r}") from None
    return _ket_projector(label, ket)


def linear_projector(theta_deg: float) -> Projector:
    """Projector onto cos(theta)|H> + sin(theta)|V>, theta in degrees from horizontal."""
    theta = float(theta_deg)
    if not math.isfinite(theta):
        raise InvalidArgumentError("analyzer angle must be finite")
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    # built entrywise so that e.g. 45 deg gives exactly 0.5 everywhere up to rounding
    return Projector(format_angle(theta), np.array([[c * c, c * s], [c * s, s * s]]))


def format_angle(theta_deg: float) -> str:
    return repr(float(theta_deg))


def setting_projector(label) -> Projector:
    """Resolve a setting label: a named basis element or a numeric angle in degrees."""
    if isinstance(label, (int, float)) and not isinstance(label, bool):
        return linear_projector(label)
    text = str(label).strip()
    if text in NAMED_KETS:
        return named_projector(text)
    try:
        theta = float(text)
    except ValueError:
        raise InvalidArgumentError(f"invalid analyzer setting {label!r}") from None
    return linear_projector(theta)


def setting_angle(label) -> float | None:
    """Linear-polarizer angle of a setting in [0, 180), or None for circular ones."""
    text = str(label).strip()
    if text in NAMED_ANGLES:
        return NAMED_ANGLES[text]
    if text in ("R", "L"):
        return None
    try:
        theta = float(text)
    except ValueError:
        raise InvalidArgumentError(f"invalid analyzer setting {label!r}") from None
    if not math.isfinite(theta):
        raise InvalidArgumentError(f"invalid analyzer setting {label!r}")
    return theta % 180.0


def bell_phi(phi: float) -> PureState:
    """(|HV> + e^{i phi}|VH>)/sqrt(2); phi = pi is the singlet."""
    phi = float(phi)
    if not math.isfinite(phi):
        raise InvalidArgumentError("phi must be finite")
    return PureState(np.array([0.0, _SQ2, np.exp(1j * phi) * _SQ2, 0.0]))


def singlet() -> PureState:
    return PureState(np.array([0.0, _SQ2, -_SQ2, 0.0]))


def densify(psi: PureState) -> DensityMatrix:
    a = psi.amplitudes
    return DensityMatrix(np.outer(a, a.conj()))


def werner(v: float) -> DensityMatrix:
    """v * singlet + (1 - v) * I/4."""
    return DensityMatrix(v * densify(singlet()).entries + (1.0 - v) * np.eye(4) / 4)


def _check_rho(rho) -> DensityMatrix:
    if not isinstance(rho, DensityMatrix):
        raise PreconditionViolation(f"expected a DensityMatrix, got {type(rho).__name__}")
    return rho


def joint_operator(ps: Projector, pi: Projector) -> np.ndarray:
    return np.kron(ps.matrix, pi.matrix)


def joint_probability(rho: DensityMatrix, ps: Projector, pi: Projector) -> float:
    rho = _check_rho(rho)
    p = float(np.einsum("ij,ji->", rho.entries, joint_operator(ps, pi)).real)
    return min(1.0, max(0.0, p))


def concurrence(rho: DensityMatrix) -> float:
    r = _check_rho(rho).entries
    # lambda_i are the singular values of sqrt(rho) (Y x Y) sqrt(rho)*, which avoids
    # square roots of round-off-sized eigenvalues of rho * rho_tilde
    w, v = np.linalg.eigh(r)
    w = np.where(w > _EIG_FLOOR, w, 0.0)
    root = (v * np.sqrt(w)) @ v.conj().T
    lam = np.linalg.svd(root @ _YY @ root.conj(), compute_uv=False)
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def purity(rho: DensityMatrix) -> float:
    r = _check_rho(rho).entries
    return float(np.einsum("ij,ji->", r, r).real)


def fidelity_to_pure(rho: DensityMatrix, target: PureState) -> float:
    r = _check_rho(rho).entries
    a = target.amplitudes
    return float(np.vdot(a, r @ a).real)


def trace_distance(a: DensityMatrix, b: DensityMatrix) -> float:
    d = a.entries - b.entries
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(d))))


def apply_local_unitaries(rho: DensityMatrix, u, v) -> DensityMatrix:
    w = np.kron(np.asarray(u, dtype=complex), np.asarray(v, dtype=complex))
    return DensityMatrix.from_psd(w @ rho.entries @ w.conj().T)
