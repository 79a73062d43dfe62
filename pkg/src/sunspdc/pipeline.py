"""File-based pipeline stages: simulate, histogram, tomo, chsh, report.

Each stage reads the previous stage's files, so running ``pipeline`` and
running the stages one by one produce identical artifacts.  Every file is
written atomically.

Run directory layout::

    config.json  manifest.json  streams/*.ttag
    histograms/*.csv  histogram_summary.json  counts.csv
    tomography.json  density_matrix.csv
    chsh.json  chsh_curve.csv
    report.json  report.md
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np

from sunspdc import chsh as chsh_mod
from sunspdc import correlator as corr
from sunspdc import tomography as tomo
from sunspdc.config import ExperimentConfig
from sunspdc.errors import InsufficientDataError, ParseError
from sunspdc.polarization import DensityMatrix, singlet
from sunspdc.source import build_state
from sunspdc.timetags import atomic_write_bytes, read_stream, simulate_setting, write_stream

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
COUNTS = "counts.csv"
TOMO_JSON = "tomography.json"
CHSH_JSON = "chsh.json"


def write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def write_json(path, obj):
    write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _stem(k, setting):
    return f"{k:02d}_{setting[0]}_{setting[1]}"


def cmd_simulate(config: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    (out / "streams").mkdir(parents=True, exist_ok=True)
    rho = build_state(config.source)
    plan = config.plan
    entries = []
    for k, setting in enumerate(plan.settings):
        acq = simulate_setting(
            rho, config.source, config.profile, config.det_s, config.det_i,
            setting, plan.start_times[k], plan.duration_s, plan.rng_seed, k,
        )
        stem = _stem(k, setting)
        files = {}
        for role, stream in (("signal", acq.signal), ("idler", acq.idler)):
            rel = f"streams/{stem}_{role}.ttag"
            write_stream(stream, out / rel)
            files[role] = {"path": rel, "records": len(stream), "sha256": _sha256(out / rel)}
        entries.append({
            "index": k,
            "setting": list(setting),
            "start_time": acq.start_time,
            "duration_s": acq.duration_s,
            "mean_power_nw": acq.mean_power_nw,
            "emitted_pairs": acq.emitted_pairs,
            "rng_key": [plan.rng_seed, k],
            "files": files,
        })
    manifest = {
        "seed": config.seed,
        "rng": "Philox keyed by (seed, setting index, stage)",
        "tdc_resolution_ps": config.det_s.tdc_resolution,
        "source_state": build_state(config.source).to_dict(),
        "settings": entries,
    }
    write_text(out / "config.json", config.to_json() + "\n")
    write_json(out / MANIFEST, manifest)
    return manifest


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", offset=exc.pos, path=path) from None


def _correlator_kwargs(config: ExperimentConfig) -> dict:
    c = config.correlator
    return {
        "bin_width": c["bin_width_ps"],
        "window": c["window_ps"],
        "exclusion": c["exclusion_ps"],
        "range": tuple(c["range_ps"]),
        "center": c["center_ps"],
        "reference_power": c["reference_power_nw"],
        "subtract_accidentals": c["subtract_accidentals"],
    }


def histogram_pair(signal, idler, setting, duration_s, mean_power_nw, config: ExperimentConfig, center=None):
    kw = _correlator_kwargs(config)
    if kw["center"] is None:
        kw["center"] = center
    return corr.reduce_setting(signal, idler, setting, duration_s, mean_power_nw, **kw)


def pooled_center(pairs, config: ExperimentConfig):
    """Peak of the histogram summed over all settings, or None if it is empty.

    The channel delay is common to every setting, so one center serves them
    all; a per-setting peak search would lock onto stray accidentals in
    settings that carry almost no true pairs.
    """
    c = config.correlator
    total = None
    for sig, idl in pairs:
        h = corr.cross_correlate(sig, idl, c["bin_width_ps"], tuple(c["range_ps"]))
        total = h if total is None else corr.Histogram(h.bin_width, h.range, total.counts + h.counts)
    if total is None or total.total == 0:
        return None
    return total.peak_center()


def cmd_histogram(config: ExperimentConfig, run_dir, out_dir=None) -> list[dict]:
    """Reduce every stream pair listed in the run manifest; writes histograms and the count table."""
    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run
    (out / "histograms").mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(run)
    streams = [
        (read_stream(run / e["files"]["signal"]["path"]), read_stream(run / e["files"]["idler"]["path"]))
        for e in manifest["settings"]
    ]
    configured = config.correlator["center_ps"]
    center = configured if configured is not None else pooled_center(streams, config)
    records, summary = [], []
    for e, (sig, idl) in zip(manifest["settings"], streams):
        setting = tuple(e["setting"])
        hist, rec, used, note = histogram_pair(sig, idl, setting, e["duration_s"], e["mean_power_nw"], config, center)
        write_text(out / "histograms" / f"{_stem(e['index'], setting)}.csv", hist.to_csv())
        records.append(rec)
        row = {
            "setting": list(setting),
            "window_center_ps": used,
            "peak_bin_center_ps": hist.peak_center() if hist.total else None,
            "raw": rec.raw_coincidences,
            "accidental_per_window": rec.accidental_estimate,
            "normalized": rec.normalized_count,
            "mean_power_nw": rec.mean_power_nw,
            "note": note,
        }
        summary.append(row)
        log.info(
            "%s,%s: window=%d accidental=%.4g normalized=%.4g",
            setting[0], setting[1], rec.raw_coincidences, rec.accidental_estimate, rec.normalized_count,
        )
    write_text(out / COUNTS, corr.count_table_csv(records))
    center_source = "configured" if configured is not None else "pooled histogram peak"
    write_json(out / "histogram_summary.json", {"window_center_ps": center, "window_center_source": center_source, "settings": summary})
    return summary


def read_count_table(path, config: ExperimentConfig | None = None) -> list:
    path = Path(path)
    ref = config.correlator["reference_power_nw"] if config else corr.REFERENCE_POWER_NW
    return corr.parse_count_table(path.read_text(), reference_power=ref, path=path)


def _tomo_seed(config):
    return int(np.random.SeedSequence(config.seed, spawn_key=(1,)).generate_state(1)[0])


def density_matrix_csv(rho: DensityMatrix) -> str:
    labels = ("HH", "HV", "VH", "VV")
    lines = ["row,col,re,im"]
    for a in range(4):
        for b in range(4):
            z = rho.entries[a, b]
            lines.append(f"{labels[a]},{labels[b]},{float(z.real)!r},{float(z.imag)!r}")
    return "\n".join(lines) + "\n"


def cmd_tomo(config: ExperimentConfig, count_table, out_dir) -> tomo.TomographyResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_count_table(count_table, config)
    counts = tomo.counts_from_records(records)
    result = tomo.reconstruct(counts, n_bootstrap=config.bootstrap, seed=_tomo_seed(config))
    d = result.to_dict()
    d["uncertainty_method"] = "parametric Poisson bootstrap" if result.n_bootstrap else "none"
    d["counts"] = counts.tolist()
    write_json(out / TOMO_JSON, d)
    write_text(out / "density_matrix.csv", density_matrix_csv(result.rho))
    return result


def cmd_chsh(config: ExperimentConfig, count_table, out_dir, rho_path=None) -> chsh_mod.ChshResult:
    """CHSH from the count table; the curve CSV uses a provided or reconstructed state."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = config.chsh
    if config.chsh_mode == "exact":
        rho = build_state(config.source)
        result = chsh_mod.exact_chsh(rho, settings)
        records = []
        result.std_method = "exact probabilities (infinite statistics)"
    else:
        records = read_count_table(count_table, config)
        counts = chsh_mod.chsh_counts(records, settings)
        result = chsh_mod.chsh_from_counts(counts, settings)
        rho = None
        if rho_path is not None:
            rho = tomo.TomographyResult.from_dict(json.loads(Path(rho_path).read_text())).rho
        else:
            try:
                rho = tomo.mle_reconstruct(tomo.counts_from_records(records)).rho
            except InsufficientDataError:
                log.warning("no tomography settings in the table; curve predictions use the configured source state")
                rho = build_state(config.source)
    d = result.to_dict()
    if config.chsh_mode == "counts":
        d["S_monte_carlo_std"] = chsh_mod.monte_carlo_std(counts, n=500, seed=_tomo_seed(config), settings=settings)
    write_json(out / CHSH_JSON, d)
    write_text(out / "chsh_curve.csv", chsh_mod.curve_csv(rho, records, settings))
    return result


def _load_optional(path):
    path = Path(path)
    if not path.is_file():
        return None
    return json.loads(path.read_text())


def _run_summary(run: Path) -> dict:
    sections = {}
    cfg = _load_optional(run / "config.json")
    sections["config"] = cfg if cfg is not None else "absent"
    summ = _load_optional(run / "histogram_summary.json")
    if summ is None:
        sections["rates"] = "absent"
    else:
        rows = {tuple(r["setting"]): r for r in summ["settings"]}
        acc = [r["accidental_per_window"] for r in summ["settings"]]
        rates = {"max_accidental_per_window": max(acc) if acc else None}
        if ("H", "V") in rows and ("V", "H") in rows and cfg is not None:
            duration = cfg["acquisition"]["duration_s"]
            ref = cfg["correlator"]["reference_power_nw"]
            hv, vh = rows[("H", "V")]["normalized"], rows[("V", "H")]["normalized"]
            rates["VH_counts_per_acquisition_at_reference"] = vh
            rates["HV_counts_per_acquisition_at_reference"] = hv
            rates["pair_rate_per_mw_estimate"] = (hv + vh) / duration / (ref / 1e6)
        sections["rates"] = rates
    t = _load_optional(run / TOMO_JSON)
    sections["tomography"] = "absent" if t is None else {
        k: t[k] for k in ("concurrence", "purity", "fidelity", "n_bootstrap", "converged", "log_likelihood")
    }
    c = _load_optional(run / CHSH_JSON)
    sections["chsh"] = "absent" if c is None else {
        "S": {"value": c["S"], "std": c["S_std"]},
        "violation_sigmas": c["violation_sigmas"],
        "S_std_method": c["S_std_method"],
        "S_monte_carlo_std": c.get("S_monte_carlo_std"),
    }
    missing = [k for k, v in sections.items() if v == "absent"]
    sections["missing_stages"] = missing
    return sections


def _headline(summary):
    h = {}
    t, c, r = summary["tomography"], summary["chsh"], summary["rates"]
    for k in ("concurrence", "purity", "fidelity"):
        h[k] = t[k] if isinstance(t, dict) else None
    h["S"] = c["S"] if isinstance(c, dict) else None
    h["pair_rate_per_mw"] = r.get("pair_rate_per_mw_estimate") if isinstance(r, dict) else None
    return h


def cmd_report(run_dirs, out_dir=None, reproducible: bool = False) -> dict:
    runs = [Path(r) for r in (run_dirs if isinstance(run_dirs, (list, tuple)) else [run_dirs])]
    out = Path(out_dir) if out_dir is not None else runs[0]
    out.mkdir(parents=True, exist_ok=True)
    per_run = []
    for run in runs:
        s = _run_summary(run)
        per_run.append({"run_dir": run.name, "headline": _headline(s), **s})
    report = {"runs": per_run}
    if len(per_run) == 1:
        report["headline"] = per_run[0]["headline"]
    else:
        report["aggregate"] = _aggregate(runs, per_run)
        report["headline"] = report["aggregate"]["headline"]
    if not reproducible:
        report["generated_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    write_json(out / "report.json", report)
    write_text(out / "report.md", report_markdown(report))
    return report


def _aggregate(runs, per_run) -> dict:
    """Mean and run-to-run spread, mirroring measurements on separate days."""
    agg = {"n_runs": len(runs), "headline": {}}
    for key in ("concurrence", "purity", "fidelity", "S"):
        vals = [r["headline"][key]["value"] for r in per_run if r["headline"][key] is not None]
        agg["headline"][key] = _mean_spread(vals)
    rates = [r["headline"]["pair_rate_per_mw"] for r in per_run if r["headline"]["pair_rate_per_mw"] is not None]
    agg["headline"]["pair_rate_per_mw"] = _mean_spread(rates)
    results = []
    for run in runs:
        t = _load_optional(run / TOMO_JSON)
        if t is not None:
            results.append(DensityMatrix.from_dict(t["density_matrix"]))
    if results:
        a = tomo.aggregate_runs(results, singlet())
        agg["averaged_density_matrix"] = a.to_dict()
    return agg


def _mean_spread(vals):
    if not vals:
        return None
    v = np.asarray(vals, dtype=float)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"value": float(v.mean()), "std": std, "n": int(v.size)}


def _fmt(m):
    if m is None:
        return "absent"
    if isinstance(m, dict):
        return f"{m['value']:.4f} ± {m['std']:.4f}"
    return f"{m:.4f}"


def report_markdown(report: dict) -> str:
    h = report["headline"]
    lines = ["# Sunlight-pumped SPDC run report", ""]
    lines += ["| metric | value |", "|---|---|"]
    names = {"concurrence": "Concurrence C", "purity": "Purity P", "fidelity": "Fidelity F", "S": "CHSH S", "pair_rate_per_mw": "Pair rate (s⁻¹ mW⁻¹)"}
    for k, label in names.items():
        lines.append(f"| {label} | {_fmt(h.get(k))} |")
    lines.append("")
    for r in report["runs"]:
        lines.append(f"## {r['run_dir']}")
        if r["missing_stages"]:
            lines.append(f"Missing stages: {', '.join(r['missing_stages'])}")
        c = r["chsh"]
        if isinstance(c, dict):
            sig = c["violation_sigmas"]
            lines.append(f"- CHSH violation: {sig:.2f} standard deviations" if math.isfinite(sig) else "- CHSH: exact mode")
        lines.append("")
    if "aggregate" in report:
        lines.append(f"Aggregate over {report['aggregate']['n_runs']} runs (mean ± run-to-run std).")
    if "generated_at" in report:
        lines.append(f"Generated {report['generated_at']}")
    return "\n".join(lines).rstrip() + "\n"


def cmd_pipeline(config: ExperimentConfig, out_dir, reproducible: bool = False) -> dict:
    out = Path(out_dir)
    cmd_simulate(config, out)
    cmd_histogram(config, out)
    has_tomo = True
    try:
        cmd_tomo(config, out / COUNTS, out)
    except InsufficientDataError as exc:
        log.warning("tomography skipped: %s", exc)
        has_tomo = False
    cmd_chsh(config, out / COUNTS, out, rho_path=(out / TOMO_JSON) if has_tomo else None)
    return cmd_report([out], out, reproducible=reproducible)
