"""Two-photon polarization state tomography.

Sixteen product projectors {H, V, D, R} x {H, V, D, R} feed a linear
inversion, which seeds a maximum-likelihood fit.  The fit parametrizes
``rho = T^dag T / Tr(T^dag T)`` with ``T`` lower triangular (real diagonal,
16 real parameters), so every iterate is a valid density matrix.

The scale of the Poisson means is profiled out analytically
(``s = sum(n) / sum(p)``), which leaves the scale-free objective

    L(T) = sum_k n_k ln p_k - N ln sum_k p_k,   p_k = Tr(T^dag T Pi_k)

up to a constant.  Reported log-likelihoods add that constant back, giving
the full Poisson ``sum_k [n_k ln mu_k - mu_k]`` at the fitted scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from sunspdc.errors import DegenerateBasisError, InsufficientDataError, InvalidArgumentError
from sunspdc.polarization import (
    DensityMatrix,
    PureState,
    concurrence,
    fidelity_to_pure,
    joint_operator,
    purity,
    setting_projector,
    singlet,
)

BASIS_ID = "HVDR x HVDR"
BASIS_LABELS = ("H", "V", "D", "R")

# 16 real parameters: 4 real diagonal entries then (re, im) of the 6 strictly-lower entries
_DIAG = np.arange(4)
_LOW_R, _LOW_C = np.tril_indices(4, k=-1)


def basis_set_16() -> list[tuple[str, str]]:
    return [(s, i) for s in BASIS_LABELS for i in BASIS_LABELS]


def joint_projectors(settings=None) -> np.ndarray:
    """Stack of 4x4 joint projectors, shape (n, 4, 4)."""
    settings = basis_set_16() if settings is None else settings
    return np.array([joint_operator(setting_projector(s), setting_projector(i)) for s, i in settings])


def gram_matrix(ops: np.ndarray) -> np.ndarray:
    return np.einsum("aij,bji->ab", ops, ops).real


# Hermitian operator basis: sigma_a (x) sigma_b with sigma_0 = I
_PAULI = np.array([[[1, 0], [0, 1]], [[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex)
_PAULI2 = np.array([np.kron(a, b) for a in _PAULI for b in _PAULI])


def linear_inversion(counts, total_scale: float = 1.0, ops: np.ndarray | None = None) -> np.ndarray:
    """Hermitian M with Tr(M Pi_k) = n_k / total_scale, then trace-normalized.

    The result is not necessarily positive semidefinite.
    """
    ops = joint_projectors() if ops is None else ops
    y = np.asarray(counts, dtype=float) / float(total_scale)
    if y.shape != (ops.shape[0],):
        raise InvalidArgumentError(f"expected {ops.shape[0]} counts, got shape {y.shape}")
    g = gram_matrix(ops)
    if np.linalg.matrix_rank(g) < 16:
        raise DegenerateBasisError("projector set is not informationally complete")
    # Tr(M Pi_k) with M = sum_j x_j sigma_j / 4
    a = np.einsum("kij,lji->kl", ops, _PAULI2).real / 4
    x = np.linalg.solve(a, y) if a.shape[0] == 16 else np.linalg.lstsq(a, y, rcond=None)[0]
    m = np.einsum("j,jab->ab", x, _PAULI2) / 4
    m = 0.5 * (m + m.conj().T)
    tr = np.trace(m).real
    if tr == 0:
        raise InsufficientDataError("linear inversion produced a traceless matrix")
    return m / tr


def clip_to_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    w = np.clip(w, 0.0, None)
    if w.sum() == 0:
        return np.eye(4) / 4
    w = w / w.sum()
    return (v * w) @ v.conj().T


def t_from_params(t: np.ndarray) -> np.ndarray:
    T = np.zeros((4, 4), dtype=complex)
    T[_DIAG, _DIAG] = t[:4]
    T[_LOW_R, _LOW_C] = t[4:10] + 1j * t[10:16]
    return T


def params_from_rho(rho: np.ndarray, mix: float = 1e-3) -> np.ndarray:
    """Parameters of a lower-triangular T with T^dag T proportional to rho.

    ``rho`` is mixed with a little white noise first, because a parameter
    row of T that starts at exactly zero never leaves it.
    """
    r = (1.0 - mix) * np.asarray(rho, dtype=complex) + mix * np.eye(4) / 4
    r = 0.5 * (r + r.conj().T)
    j = np.eye(4)[::-1]
    low = np.linalg.cholesky(j @ r @ j)
    T = (j @ low @ j).conj().T
    d = T[_DIAG, _DIAG].real
    lo = T[_LOW_R, _LOW_C]
    return np.concatenate([d, lo.real, lo.imag])


class _Objective:
    def __init__(self, counts, ops):
        self.n = np.asarray(counts, dtype=float)
        self.N = float(self.n.sum())
        self.ops = ops
        # p = P @ vec(A) with P[k] = vec(Pi_k^T)
        self.P = np.ascontiguousarray(ops.transpose(0, 2, 1).reshape(len(ops), 16))
        self.M = ops.sum(axis=0)
        self.mask = self.n > 0
        nz = self.n[self.mask]
        self.const = float(np.sum(nz * np.log(nz)) - self.N) if self.N > 0 else 0.0

    def probs(self, A):
        return (self.P @ A.ravel()).real

    def value(self, t):
        T = t_from_params(t)
        p = self.probs(T.conj().T @ T)
        pn = p[self.mask]
        if np.any(pn <= 0):
            return -np.inf
        return float(self.n[self.mask] @ np.log(pn) - self.N * math.log(p.sum()))

    def value_grad(self, t):
        T = t_from_params(t)
        A = T.conj().T @ T
        p = self.probs(A)
        pn = p[self.mask]
        if np.any(pn <= 0):
            return -np.inf, None
        sp = p.sum()
        val = float(self.n[self.mask] @ np.log(pn) - self.N * math.log(sp))
        w = np.zeros_like(p)
        w[self.mask] = self.n[self.mask] / pn
        R = np.einsum("k,kij->ij", w, self.ops) - (self.N / sp) * self.M
        G = R @ T.conj().T
        Gt = G.T
        grad = np.concatenate([2 * Gt[_DIAG, _DIAG].real, 2 * Gt[_LOW_R, _LOW_C].real, -2 * Gt[_LOW_R, _LOW_C].imag])
        return val, grad

    def full_loglik(self, scaled_value):
        """Poisson log-likelihood sum[n ln mu - mu] (without ln n!) at the fitted scale."""
        if self.N == 0:
            return 0.0
        return scaled_value + self.const


def log_likelihood(counts, rho: np.ndarray, ops: np.ndarray | None = None) -> float:
    """Poisson log-likelihood of ``rho`` with the count scale fitted in closed form."""
    ops = joint_projectors() if ops is None else ops
    obj = _Objective(counts, ops)
    t = params_from_rho(rho, mix=0.0) if np.linalg.eigvalsh(rho)[0] > 0 else None
    if t is None:
        p = obj.probs(np.asarray(rho))
        pn = p[obj.mask]
        v = float(obj.n[obj.mask] @ np.log(pn) - obj.N * math.log(p.sum()))
    else:
        v = obj.value(t)
    return obj.full_loglik(v)


@dataclass
class MleFit:
    rho: DensityMatrix
    log_likelihood: float
    converged: bool
    iterations: int
    trace: list = field(default_factory=list, repr=False)


def mle_reconstruct(
    counts,
    init: np.ndarray | None = None,
    ops: np.ndarray | None = None,
    tol: float = 1e-9,
    max_iter: int = 10_000,
    record_trace: bool = False,
) -> MleFit:
    """Maximum-likelihood density matrix from non-negative counts.

    Quasi-Newton (BFGS) ascent with Armijo backtracking; every accepted step
    increases the likelihood.  Stops when an iteration gains less than
    ``tol`` or after ``max_iter`` iterations (then ``converged`` is False).
    """
    ops = joint_projectors() if ops is None else ops
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (ops.shape[0],):
        raise InvalidArgumentError(f"expected {ops.shape[0]} counts")
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise InvalidArgumentError("counts must be finite and non-negative")
    if counts.sum() <= 0:
        raise InsufficientDataError("all counts are zero")
    obj = _Objective(counts, ops)
    if init is None:
        init = clip_to_psd(linear_inversion(counts, ops=ops))
    else:
        init = clip_to_psd(np.asarray(init, dtype=complex))
    t = params_from_rho(init)
    t /= np.linalg.norm(t)
    f, g = obj.value_grad(t)
    if not np.isfinite(f):
        # a zero-probability projector carries counts: restart from white noise
        t = params_from_rho(np.eye(4) / 4, mix=0.0)
        t /= np.linalg.norm(t)
        f, g = obj.value_grad(t)
    H = np.eye(16)
    trace = [f] if record_trace else []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = H @ g
        slope = float(g @ d)
        if slope <= 0:
            H = np.eye(16)
            d = g.copy()
            slope = float(g @ g)
        if slope == 0.0:
            converged = True
            break
        step = 1.0
        while True:
            t_new = t + step * d
            f_new, g_new = obj.value_grad(t_new)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-20:
                f_new = None
                break
        if f_new is None:
            # no ascent possible along the quasi-Newton or gradient direction
            if not np.array_equal(H, np.eye(16)):
                H = np.eye(16)
                continue
            converged = True
            break
        assert f_new >= f, "log-likelihood decreased"
        gain = f_new - f
        s = t_new - t
        y = g - g_new  # ascent: curvature of -L
        t, f, g = t_new, f_new, g_new
        if record_trace:
            trace.append(f)
        sy = float(s @ y)
        if sy > 1e-12 * float(s @ s):
            rho_k = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho_k * rho_k) * np.outer(s, s) - rho_k * (np.outer(Hy, s) + np.outer(s, Hy))
        nrm = np.linalg.norm(t)
        if not 0.1 < nrm < 10.0:
            # objective is scale-free; keep T well conditioned
            t /= nrm
            g *= nrm
            H = np.eye(16)
        if gain < tol:
            converged = True
            break
    T = t_from_params(t)
    rho = DensityMatrix.from_psd(T.conj().T @ T)
    return MleFit(rho, obj.full_loglik(f), converged, it, trace)


@dataclass
class Metric:
    value: float
    std: float

    def to_dict(self):
        return {"value": self.value, "std": self.std}


@dataclass
class TomographyResult:
    rho: DensityMatrix
    concurrence: Metric
    purity: Metric
    fidelity: Metric
    n_bootstrap: int
    log_likelihood: float
    converged: bool
    iterations: int = 0
    basis_set: str = BASIS_ID
    settings: list = field(default_factory=basis_set_16)
    target: str = "singlet (|HV> - |VH>)/sqrt(2)"

    def to_dict(self) -> dict:
        return {
            "density_matrix": self.rho.to_dict(),
            "concurrence": self.concurrence.to_dict(),
            "purity": self.purity.to_dict(),
            "fidelity": self.fidelity.to_dict(),
            "n_bootstrap": self.n_bootstrap,
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
            "basis_set": self.basis_set,
            "settings": [list(s) for s in self.settings],
            "fidelity_target": self.target,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TomographyResult":
        return cls(
            rho=DensityMatrix.from_dict(d["density_matrix"]),
            concurrence=Metric(**d["concurrence"]),
            purity=Metric(**d["purity"]),
            fidelity=Metric(**d["fidelity"]),
            n_bootstrap=d["n_bootstrap"],
            log_likelihood=d["log_likelihood"],
            converged=d["converged"],
            iterations=d.get("iterations", 0),
            basis_set=d.get("basis_set", BASIS_ID),
            settings=[tuple(s) for s in d.get("settings", basis_set_16())],
        )


def state_metrics(rho: DensityMatrix, target: PureState | None = None) -> tuple[float, float, float]:
    target = singlet() if target is None else target
    return concurrence(rho), purity(rho), fidelity_to_pure(rho, target)


def bootstrap_uncertainty(counts, n: int = 200, seed: int = 0, ops=None, target: PureState | None = None, init=None):
    """Parametric Poisson bootstrap: std devs of (C, P, F) over ``n`` refits.

    Each replica redraws every count from Poisson(observed count).
    """
    if n < 2:
        raise InvalidArgumentError("need at least 2 bootstrap replicas")
    ops = joint_projectors() if ops is None else ops
    counts = np.asarray(counts, dtype=float)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    samples = np.empty((n, 3))
    for r in range(n):
        resampled = rng.poisson(counts)
        if resampled.sum() == 0:
            samples[r] = np.nan
            continue
        fit = mle_reconstruct(resampled, init=init, ops=ops)
        samples[r] = state_metrics(fit.rho, target)
    samples = samples[np.all(np.isfinite(samples), axis=1)]
    if samples.shape[0] < 2:
        raise InsufficientDataError("fewer than 2 usable bootstrap replicas")
    std = samples.std(axis=0, ddof=1)
    return float(std[0]), float(std[1]), float(std[2])


def counts_from_records(records, settings=None) -> np.ndarray:
    """Order power-normalized counts by the basis set; missing settings are listed in the error."""
    settings = basis_set_16() if settings is None else settings
    table = {}
    for r in records:
        table.setdefault((str(r.setting_s), str(r.setting_i)), r.normalized_count)
    missing = [s for s in settings if tuple(s) not in table]
    if missing:
        raise InsufficientDataError("missing tomography settings: " + ", ".join(f"{s}{i}" for s, i in missing))
    counts = np.array([table[tuple(s)] for s in settings], dtype=float)
    if np.any(counts < 0):
        raise InvalidArgumentError("normalized counts must be >= 0")
    return counts


def reconstruct(counts, n_bootstrap: int = 200, seed: int = 0, target: PureState | None = None) -> TomographyResult:
    """Full tomography pipeline: linear inversion, MLE, metrics and bootstrap errors."""
    ops = joint_projectors()
    counts = np.asarray(counts, dtype=float)
    fit = mle_reconstruct(counts, ops=ops)
    c, p, f = state_metrics(fit.rho, target)
    if n_bootstrap >= 2:
        sc, sp, sf = bootstrap_uncertainty(counts, n_bootstrap, seed, ops, target, init=fit.rho.entries)
    else:
        sc = sp = sf = 0.0
    return TomographyResult(
        rho=fit.rho,
        concurrence=Metric(c, sc),
        purity=Metric(p, sp),
        fidelity=Metric(f, sf),
        n_bootstrap=n_bootstrap if n_bootstrap >= 2 else 0,
        log_likelihood=fit.log_likelihood,
        converged=fit.converged,
        iterations=fit.iterations,
    )


@dataclass
class RunAggregate:
    rho: DensityMatrix
    concurrence: Metric
    purity: Metric
    fidelity: Metric
    n_runs: int
    metrics_of_mean: tuple

    def to_dict(self):
        return {
            "density_matrix": self.rho.to_dict(),
            "concurrence": self.concurrence.to_dict(),
            "purity": self.purity.to_dict(),
            "fidelity": self.fidelity.to_dict(),
            "n_runs": self.n_runs,
            "metrics_of_mean_matrix": dict(zip(("concurrence", "purity", "fidelity"), self.metrics_of_mean)),
        }


def aggregate_runs(results, target: PureState | None = None) -> RunAggregate:
    """Average density matrices of independent runs; std devs are the run-to-run spread."""
    results = list(results)
    if not results:
        raise InsufficientDataError("no runs to aggregate")
    rhos = [r.rho if isinstance(r, TomographyResult) else r for r in results]
    mean = DensityMatrix.from_psd(np.mean([r.entries for r in rhos], axis=0))
    per = np.array([state_metrics(r, target) for r in rhos])
    ddof = 1 if len(rhos) > 1 else 0
    mu, sd = per.mean(axis=0), per.std(axis=0, ddof=ddof)
    return RunAggregate(
        rho=mean,
        concurrence=Metric(float(mu[0]), float(sd[0])),
        purity=Metric(float(mu[1]), float(sd[1])),
        fidelity=Metric(float(mu[2]), float(sd[2])),
        n_runs=len(rhos),
        metrics_of_mean=state_metrics(mean, target),
    )
