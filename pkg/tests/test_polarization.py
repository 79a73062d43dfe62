import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sunspdc.errors import InvalidArgumentError, PreconditionViolation
from sunspdc.polarization import (
    DensityMatrix,
    PureState,
    apply_local_unitaries,
    bell_phi,
    concurrence,
    densify,
    fidelity_to_pure,
    joint_probability,
    linear_projector,
    named_projector,
    purity,
    setting_projector,
    singlet,
    werner,
)

S2 = 1 / math.sqrt(2)


def random_unitary(rng, n=2):
    z = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_rho(rng, rank=4):
    g = rng.normal(size=(4, rank)) + 1j * rng.normal(size=(4, rank))
    m = g @ g.conj().T
    return DensityMatrix.from_psd(m)


def brute_joint_probability(rho, ket_s, ket_i):
    # sum over basis indices of <a b| rho |c d> conj(psi_ab) psi_cd, no kron
    psi = np.array([ket_s[a] * ket_i[b] for a in range(2) for b in range(2)])
    return sum(np.conj(psi[x]) * rho[x, y] * psi[y] for x in range(4) for y in range(4)).real


def brute_concurrence(r):
    # Wootters via eigenvalues of the non-Hermitian product, computed with an explicit spin-flip
    flip = np.zeros((4, 4))
    for x, y, s in [(0, 3, -1), (1, 2, 1), (2, 1, 1), (3, 0, -1)]:
        flip[x, y] = s
    rt = flip @ r.conj() @ flip
    ev = np.sort(np.linalg.eigvals(r @ rt).real)[::-1]
    lam = np.sqrt(np.clip(ev, 0, None))
    return max(0.0, lam[0] - lam[1] - lam[2] - lam[3])


class TestBellPhi:
    def test_singlet(self):
        np.testing.assert_allclose(bell_phi(math.pi).amplitudes, [0, S2, -S2, 0], atol=1e-15)
        assert bell_phi(math.pi).equals_up_to_phase(singlet())

    def test_triplet(self):
        np.testing.assert_allclose(bell_phi(0).amplitudes, [0, S2, S2, 0])

    def test_quarter(self):
        np.testing.assert_allclose(bell_phi(math.pi / 2).amplitudes, [0, S2, 1j * S2, 0], atol=1e-15)

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_non_finite(self, bad):
        with pytest.raises(InvalidArgumentError):
            bell_phi(bad)

    def test_global_phase_equality(self):
        a = singlet()
        b = PureState(np.exp(0.7j) * a.amplitudes)
        assert a.equals_up_to_phase(b)
        assert not a.equals_up_to_phase(bell_phi(0))


class TestDensify:
    def test_singlet(self):
        r = densify(singlet()).entries
        expected = np.zeros((4, 4))
        expected[1, 1] = expected[2, 2] = 0.5
        expected[1, 2] = expected[2, 1] = -0.5
        np.testing.assert_allclose(r, expected, atol=1e-15)

    def test_hh(self):
        r = densify(PureState([1, 0, 0, 0])).entries
        assert r[0, 0] == 1 and np.count_nonzero(r) == 1

    def test_quarter_phase_off_diagonal(self):
        r = densify(bell_phi(math.pi / 2)).entries
        assert r[1, 2] == pytest.approx(-0.5j, abs=1e-15)

    def test_purity_one(self):
        assert purity(densify(bell_phi(1.3))) == pytest.approx(1.0, abs=1e-12)


class TestProjectors:
    def test_zero(self):
        np.testing.assert_allclose(linear_projector(0).matrix, [[1, 0], [0, 0]], atol=1e-15)

    def test_45(self):
        np.testing.assert_allclose(linear_projector(45).matrix, np.full((2, 2), 0.5), atol=1e-15)

    def test_90(self):
        np.testing.assert_allclose(linear_projector(90).matrix, [[0, 0], [0, 1]], atol=1e-15)

    @pytest.mark.parametrize("label", ["H", "V", "D", "A", "R", "L"])
    def test_named_idempotent(self, label):
        m = named_projector(label).matrix
        assert np.max(np.abs(m @ m - m)) < 1e-12
        assert np.trace(m).real == pytest.approx(1.0)

    def test_circular_convention(self):
        # R = (H - iV)/sqrt2
        np.testing.assert_allclose(named_projector("R").matrix, [[0.5, 0.5j], [-0.5j, 0.5]], atol=1e-15)

    def test_setting_labels(self):
        np.testing.assert_allclose(setting_projector("22.5").matrix, linear_projector(22.5).matrix)
        np.testing.assert_allclose(setting_projector("D").matrix, linear_projector(45).matrix, atol=1e-15)
        with pytest.raises(InvalidArgumentError):
            setting_projector("Q")

    def test_non_finite_angle(self):
        with pytest.raises(InvalidArgumentError):
            linear_projector(math.nan)


class TestDensityMatrixValidation:
    def test_rejects_non_hermitian(self):
        m = np.eye(4) / 4 + 0j
        m[0, 1] = 0.1
        with pytest.raises(PreconditionViolation):
            DensityMatrix(m)

    def test_rejects_bad_trace(self):
        with pytest.raises(PreconditionViolation):
            DensityMatrix(np.eye(4) / 3)

    def test_rejects_negative(self):
        with pytest.raises(PreconditionViolation):
            DensityMatrix(np.diag([0.6, 0.5, -0.1, 0.0]))

    def test_tolerates_tiny_negative(self):
        d = DensityMatrix(np.diag([0.5 + 5e-11, 0.5, -5e-11, 0.0]))
        assert d.eigenvalues()[0] < 0

    def test_joint_probability_needs_rho(self):
        with pytest.raises(PreconditionViolation):
            joint_probability(np.eye(4) / 4, named_projector("H"), named_projector("V"))
        with pytest.raises(PreconditionViolation):
            concurrence(np.eye(4) / 4)


class TestJointProbability:
    def test_singlet_hv(self):
        assert joint_probability(densify(singlet()), named_projector("H"), named_projector("V")) == pytest.approx(0.5)

    def test_singlet_hh(self):
        assert joint_probability(densify(singlet()), named_projector("H"), named_projector("H")) == pytest.approx(0.0, abs=1e-15)

    def test_singlet_22_5(self):
        rho = densify(singlet())
        t = math.radians(22.5)
        brute = brute_joint_probability(rho.entries, [1, 0], [math.cos(t), math.sin(t)])
        law = 0.5 * math.sin(-t) ** 2
        assert brute == pytest.approx(law, abs=1e-15)
        assert brute == pytest.approx(0.07322330470336313, abs=1e-12)
        assert joint_probability(rho, linear_projector(0), linear_projector(22.5)) == pytest.approx(brute, abs=1e-14)

    def test_completeness(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            rho = random_rho(rng)
            a, b = rng.uniform(0, 180, 2)
            pa, pb = linear_projector(a), linear_projector(b)
            tot = sum(joint_probability(rho, x, y) for x in (pa, pa.complement()) for y in (pb, pb.complement()))
            assert abs(tot - 1) < 1e-10


class TestMeasures:
    def test_singlet(self):
        r = densify(singlet())
        assert concurrence(r) == pytest.approx(1.0, abs=1e-12)
        assert purity(r) == pytest.approx(1.0)
        assert fidelity_to_pure(r, singlet()) == pytest.approx(1.0)

    def test_maximally_mixed(self):
        r = DensityMatrix.maximally_mixed()
        assert concurrence(r) == 0.0
        assert purity(r) == pytest.approx(0.25)
        assert fidelity_to_pure(r, singlet()) == pytest.approx(0.25)

    def test_werner_08(self):
        r = werner(0.8)
        assert concurrence(r) == pytest.approx(0.7, abs=1e-10)
        assert brute_concurrence(r.entries) == pytest.approx(0.7, abs=1e-10)
        assert purity(r) == pytest.approx(0.73, abs=1e-12)
        assert fidelity_to_pure(r, singlet()) == pytest.approx(0.85, abs=1e-12)

    @pytest.mark.parametrize("v", np.linspace(0, 1, 21))
    def test_werner_family(self, v):
        r = werner(v)
        assert abs(concurrence(r) - max(0.0, (3 * v - 1) / 2)) < 1e-10
        assert abs(purity(r) - (1 + 3 * v * v) / 4) < 1e-10
        assert abs(fidelity_to_pure(r, singlet()) - (1 + 3 * v) / 4) < 1e-10

    @pytest.mark.parametrize("phi", np.linspace(-math.pi, math.pi, 9))
    def test_bell_family_maximal(self, phi):
        assert concurrence(densify(bell_phi(phi))) == pytest.approx(1.0, abs=1e-7)

    def test_product_state_zero(self):
        r = densify(PureState.from_unnormalized(np.kron([1, 2], [3, 1j])))
        assert concurrence(r) == pytest.approx(0.0, abs=1e-7)

    def test_bounds_random(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            r = random_rho(rng, rank=int(rng.integers(1, 5)))
            c, p, f = concurrence(r), purity(r), fidelity_to_pure(r, singlet())
            assert -1e-12 <= c <= 1 + 1e-9
            assert 0.25 - 1e-12 <= p <= 1 + 1e-12
            assert -1e-12 <= f <= 1 + 1e-12
            if np.linalg.eigvalsh(r.entries)[0] > 1e-6:
                # the eigenvalue route loses ~sqrt(eps) accuracy on rank-deficient states
                assert c == pytest.approx(brute_concurrence(r.entries), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_concurrence_local_unitary_invariance(seed):
    rng = np.random.default_rng(seed)
    r = random_rho(rng, rank=int(rng.integers(1, 5)))
    r2 = apply_local_unitaries(r, random_unitary(rng), random_unitary(rng))
    assert abs(concurrence(r2) - concurrence(r)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_json_round_trip_bit_exact(seed):
    r = random_rho(np.random.default_rng(seed))
    back = DensityMatrix.from_json(r.to_json())
    assert np.array_equal(back.entries, r.entries)


def test_json_layout():
    d = densify(singlet()).to_dict()
    assert set(d) >= {"re", "im"}
    assert np.asarray(d["re"]).shape == (4, 4) and np.asarray(d["im"]).shape == (4, 4)
