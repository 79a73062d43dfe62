"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest

from sunspdc import correlator as corr
from sunspdc import pipeline
from sunspdc.chsh import ChshSettings, chsh_from_records, exact_chsh, exact_probabilities, fringe_visibility
from sunspdc.config import build_config
from sunspdc.polarization import DensityMatrix, concurrence, densify, fidelity_to_pure, purity, singlet, werner
from sunspdc.source import build_state, paper_source_params
from sunspdc.timetags import TimeTagStream, simulate_acquisition
from sunspdc.tomography import _Objective, counts_from_records, joint_projectors, params_from_rho, reconstruct

TSIRELSON = 2 * math.sqrt(2)
PAPER_C = 0.905


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")

    return emit


def reduce_all(acqs, config):
    """Count records for simulated settings, sharing one pooled window center."""
    center = pipeline.pooled_center([(a.signal, a.idler) for a in acqs], config)
    return [
        pipeline.histogram_pair(a.signal, a.idler, a.setting, a.duration_s, a.mean_power_nw, config, center)[1]
        for a in acqs
    ]


def simulate(config):
    return simulate_acquisition(build_state(config.source), config.source, config.profile, config.det_s, config.det_i, config.plan)


def tomography_probability_sum(rho):
    ops = joint_projectors()
    return float(np.einsum("ij,kji->k", rho.entries, ops).real.sum())


def paper_scenario_rate():
    """Pairs per mW per s giving a mean of 20 tomography counts per setting in 120 s at 100 nW."""
    rho = build_state(paper_source_params())
    pairs_per_setting = 20.0 * 16 / tomography_probability_sum(rho)
    return pairs_per_setting / (100e-6 * 120.0)


def test_criterion_1_ideal_closed_loop(tmp_path, report):
    rate = 1e4 / (100e-6 * 120.0)
    cfg = build_config(
        {"source": {"pair_rate_per_mw": rate, "white_noise": 0.0, "phase_error": 0.0, "dephasing": 0.0, "amplitude_imbalance": 0.0}}
    )
    t0 = time.perf_counter()
    pipeline.cmd_pipeline(cfg, tmp_path / "run", reproducible=True)
    elapsed = time.perf_counter() - t0
    tomo = json.loads((tmp_path / "run" / "tomography.json").read_text())
    chsh = json.loads((tmp_path / "run" / "chsh.json").read_text())
    c, p, f = (tomo[k]["value"] for k in ("concurrence", "purity", "fidelity"))
    s = chsh["S"]
    ok = min(c, p, f) >= 0.99 and abs(s - 2.8284) <= 0.02 and elapsed < 60
    report(1, ok, f"C={c:.4f} P={p:.4f} F={f:.4f} S={s:.4f} runtime={elapsed:.1f}s")
    assert ok


def test_criterion_2_paper_closed_loop(report):
    rate = paper_scenario_rate()
    cfg = build_config({"source": {"pair_rate_per_mw": rate}, "acquisition": {"plan": "tomography"}})
    assert concurrence(build_state(cfg.source)) == pytest.approx(PAPER_C, abs=1e-9)
    t0 = time.perf_counter()
    cs, stds, mean_counts = [], [], []
    for seed in range(100):
        c = build_config({"source": {"pair_rate_per_mw": rate}, "acquisition": {"plan": "tomography"}}, seed=seed)
        counts = counts_from_records(reduce_all(simulate(c), c))
        mean_counts.append(counts.mean())
        res = reconstruct(counts, n_bootstrap=200, seed=seed)
        cs.append(res.concurrence.value)
        stds.append(res.concurrence.std)
    elapsed = time.perf_counter() - t0
    mean_c, mean_std = float(np.mean(cs)), float(np.mean(stds))
    in_band = float(np.mean([(0.02 <= s <= 0.10) for s in stds]))
    ok = abs(mean_c - PAPER_C) <= 0.03 and 0.02 <= mean_std <= 0.10 and in_band >= 0.9 and elapsed < 600
    report(
        2,
        ok,
        f"mean C={mean_c:.4f} over 100 seeds, mean bootstrap std={mean_std:.4f} "
        f"({in_band:.0%} of seeds in [0.02, 0.10]), mean counts/setting={np.mean(mean_counts):.1f}, runtime={elapsed:.0f}s",
    )
    assert ok


def test_criterion_3_rate(report):
    counts = []
    acqs_all = []
    for seed in range(100):
        # pairs split evenly between HV and VH: the ideal singlet, default detectors
        source = {"pair_rate_per_mw": 1600.0, "white_noise": 0.0, "phase_error": 0.0}
        cfg = build_config({"source": source, "acquisition": {"settings": [["V", "H"]]}}, seed=seed)
        acqs_all.append((cfg, simulate(cfg)[0]))
    cfg0 = acqs_all[0][0]
    center = pipeline.pooled_center([(a.signal, a.idler) for _, a in acqs_all], cfg0)
    for cfg, a in acqs_all:
        counts.append(corr.window_coincidences(a.signal, a.idler, center, cfg.correlator["window_ps"]))
    counts = np.array(counts, dtype=float)
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    ok = abs(counts.mean() - 10.0) <= 3 * se
    report(3, ok, f"VH mean={counts.mean():.2f} SE={se:.2f} |mean-10|/SE={abs(counts.mean() - 10) / se:.2f} var/mean={counts.var(ddof=1) / counts.mean():.2f}")
    assert ok


def test_criterion_4_histogram_geometry(report):
    cfg = build_config()
    acqs = simulate(cfg)
    pooled = pipeline.pooled_center([(a.signal, a.idler) for a in acqs], cfg)
    vh = next(a for a in acqs if a.setting == ("V", "H"))
    vh_peak = corr.cross_correlate(vh.signal, vh.idler).peak_center()
    recs = reduce_all(acqs, cfg)
    worst_acc = max(r.accidental_estimate for r in recs)
    ok = abs(pooled - 2250) <= 162 and abs(vh_peak - 2250) <= 162 and worst_acc < 0.5
    report(4, ok, f"pooled peak={pooled:.0f} ps, VH peak={vh_peak:.0f} ps, max accidental per window={worst_acc:.4f}")
    assert ok


def test_criterion_5_chsh(report):
    rate = paper_scenario_rate()
    rho = build_state(paper_source_params())
    target = 2 * math.sqrt(2) * fringe_visibility(rho, 45.0)
    s_vals, s_std, viol = [], [], []
    for seed in range(100):
        cfg = build_config({"source": {"pair_rate_per_mw": rate}, "acquisition": {"plan": "chsh"}}, seed=seed)
        res = chsh_from_records(reduce_all(simulate(cfg), cfg), cfg.chsh)
        s_vals.append(res.S.value)
        s_std.append(res.S.std)
        viol.append(res.violation_sigmas > 0)
    mean_s, mean_std, frac = float(np.mean(s_vals)), float(np.mean(s_std)), float(np.mean(viol))
    ok = abs(mean_s - target) <= 0.1 and 0.1 <= mean_std <= 0.35 and frac >= 0.95
    report(5, ok, f"mean S={mean_s:.4f} vs 2*sqrt2*V={target:.4f}, mean propagated std={mean_std:.4f}, violation in {frac:.0%} of seeds")
    assert ok


def _brute_hist(ts, ti, bw, lo, hi):
    out = [0] * int(math.ceil((hi - lo) / bw))
    for a in ts:
        for b in ti:
            if lo <= b - a < hi:
                out[int((b - a - lo) // bw)] += 1
    return out


def test_criterion_6_property_suites(tmp_path, report):
    rng = np.random.default_rng(6)
    results = {}

    worst = 0.0
    for v in np.linspace(0, 1, 101):
        r = werner(v)
        worst = max(
            worst,
            abs(concurrence(r) - max(0.0, (3 * v - 1) / 2)),
            abs(purity(r) - (1 + 3 * v * v) / 4),
            abs(fidelity_to_pure(r, singlet()) - (1 + 3 * v) / 4),
        )
    results["werner"] = worst <= 1e-10

    s_max = 0.0
    for _ in range(1000):
        g = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        rho = DensityMatrix.from_psd(g @ g.conj().T)
        s_max = max(s_max, exact_chsh(rho, ChshSettings(*rng.uniform(0, 180, 4))).S.value)
    results["tsirelson"] = s_max <= TSIRELSON + 1e-9

    sing = densify(singlet())
    e_err = 0.0
    for a, b in rng.uniform(-180, 180, (500, 2)):
        q = exact_probabilities(sing, ChshSettings(a, a, b, b))[0]
        e_err = max(e_err, abs((q[0] + q[1] - q[2] - q[3]) / q.sum() + math.cos(2 * math.radians(a - b))))
    results["singlet_E"] = e_err <= 1e-10

    g_ok = True
    for _ in range(10):
        obj = _Objective(rng.poisson(rng.uniform(1, 50, 16)).astype(float), joint_projectors())
        g = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        t = params_from_rho(DensityMatrix.from_psd(g @ g.conj().T).entries)
        _, grad = obj.value_grad(t)
        fd = np.array([(obj.value(t + 1e-6 * e) - obj.value(t - 1e-6 * e)) / 2e-6 for e in np.eye(16)])
        g_ok &= bool(np.linalg.norm(grad - fd) <= 1e-5 * np.linalg.norm(fd))
    results["gradient"] = g_ok

    c_ok = True
    for _ in range(5):
        ts = np.sort(rng.integers(0, 3_000_000, 500))
        ti = np.sort(np.concatenate([ts[:300] + 2250, rng.integers(0, 3_000_000, 200)]))
        c_ok &= corr.cross_correlate(ts, ti).counts.tolist() == _brute_hist(ts.tolist(), ti.tolist(), 162.0, *corr.DEFAULT_RANGE_PS)
    results["correlator"] = c_ok

    ch = rng.integers(0, 2, 5000)
    ts = np.sort(rng.integers(0, 10**12, 5000)) // 81 * 81
    stream = TimeTagStream(ch, np.where(ch == 0, ts, ts))
    blob = stream.to_bytes()
    results["format"] = TimeTagStream.from_bytes(blob) == stream and TimeTagStream.from_bytes(blob).to_bytes() == blob

    cfg = build_config({"tomography": {"bootstrap": 5}, "acquisition": {"duration_s": 30}})
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        pipeline.cmd_pipeline(cfg, tmp_path / name / "run", reproducible=True)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    results["determinism"] = files_a == files_b and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a
    )

    ok = all(results.values())
    report(6, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in results.items()))
    assert ok
