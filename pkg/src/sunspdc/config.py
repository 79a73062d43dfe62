"""Experiment configuration: one JSON document, defaults reproduce the published setup.

Every section is optional; unknown keys are rejected and validation errors
carry the dotted path of the offending field.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

from sunspdc import correlator as corr
from sunspdc.chsh import ChshSettings
from sunspdc.errors import ConfigError, InvalidArgumentError, ParseError
from sunspdc.polarization import format_angle, setting_projector
from sunspdc.source import PumpProfile, SourceParams, load_profile, paper_source_params
from sunspdc.timetags import PAPER_DELAY_PS, PAPER_DURATION_S, PAPER_TDC_RESOLUTION_PS, AcquisitionPlan, DetectorParams
from sunspdc.tomography import basis_set_16

DEFAULT_SEED = 20250918
PLANS = ("tomography", "chsh", "tomography+chsh")


def _paper_source_dict():
    p = paper_source_params()
    return {k: getattr(p, k) for k in SourceParams.__dataclass_fields__}


def default_config() -> dict:
    return {
        "seed": DEFAULT_SEED,
        "source": _paper_source_dict(),
        "detectors": {
            "signal": {"efficiency": 1.0, "dark_rate": 300.0, "jitter_sigma": 100.0, "channel_delay": 0.0},
            "idler": {"efficiency": 1.0, "dark_rate": 300.0, "jitter_sigma": 100.0, "channel_delay": PAPER_DELAY_PS},
            "tdc_resolution": PAPER_TDC_RESOLUTION_PS,
        },
        "pump": {"constant_nw": corr.REFERENCE_POWER_NW, "profile_csv": None},
        "acquisition": {"plan": "tomography+chsh", "settings": None, "duration_s": PAPER_DURATION_S, "start_time": 0.0},
        "correlator": {
            "bin_width_ps": corr.PAPER_BIN_WIDTH_PS,
            "window_ps": corr.PAPER_WINDOW_PS,
            "exclusion_ps": corr.PAPER_EXCLUSION_PS,
            "range_ps": list(corr.DEFAULT_RANGE_PS),
            "center_ps": None,
            "reference_power_nw": corr.REFERENCE_POWER_NW,
            "subtract_accidentals": False,
        },
        "tomography": {"bootstrap": 200},
        "chsh": {"theta_s": 0.0, "theta_s_prime": 45.0, "theta_i": 22.5, "theta_i_prime": 67.5, "mode": "counts"},
    }


def _merge(base: dict, override: dict, path: str):
    if not isinstance(override, dict):
        raise ConfigError(path or "<root>", "expected a JSON object")
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[key], dict):
            _merge(base[key], value, where)
        else:
            base[key] = value


def _num(cfg, path, *, minimum=None, exclusive=False, maximum=None, allow_none=False):
    keys = path.split(".")
    v = cfg
    for k in keys:
        v = v[k]
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(path, f"expected a finite number, got {v!r}")
    if minimum is not None and (v <= minimum if exclusive else v < minimum):
        raise ConfigError(path, f"must be {'>' if exclusive else '>='} {minimum}")
    if maximum is not None and v > maximum:
        raise ConfigError(path, f"must be <= {maximum}")
    return float(v)


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int
    source: SourceParams
    det_s: DetectorParams
    det_i: DetectorParams
    profile: PumpProfile
    plan: AcquisitionPlan
    chsh: ChshSettings
    base_dir: Path

    @property
    def correlator(self) -> dict:
        return self.raw["correlator"]

    @property
    def bootstrap(self) -> int:
        return self.raw["tomography"]["bootstrap"]

    @property
    def chsh_mode(self) -> str:
        return self.raw["chsh"]["mode"]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def plan_settings(name: str, chsh: ChshSettings) -> list[tuple[str, str]]:
    tomo = basis_set_16()
    angles = [(format_angle(a % 180.0), format_angle(b % 180.0)) for a, b in chsh.required_settings()]
    if name == "tomography":
        return tomo
    if name == "chsh":
        return list(dict.fromkeys(angles))
    return tomo + [s for s in dict.fromkeys(angles) if s not in tomo]


def build_config(overrides: dict | None = None, base_dir=".", seed: int | None = None) -> ExperimentConfig:
    cfg = default_config()
    if overrides:
        _merge(cfg, copy.deepcopy(overrides), "")
    if seed is not None:
        cfg["seed"] = seed
    base_dir = Path(base_dir)

    s = cfg["seed"]
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")

    src = cfg["source"]
    for k in src:
        _num(cfg, f"source.{k}")
    try:
        source = SourceParams(**src)
    except InvalidArgumentError as exc:
        raise ConfigError("source", str(exc)) from None

    det = cfg["detectors"]
    res = det["tdc_resolution"]
    if isinstance(res, bool) or not isinstance(res, int) or not 0 < res < 2**16:
        raise ConfigError("detectors.tdc_resolution", "must be a positive integer (ps) below 65536")
    dets = []
    for ch in ("signal", "idler"):
        for k in det[ch]:
            if k not in ("efficiency", "dark_rate", "jitter_sigma", "channel_delay"):
                raise ConfigError(f"detectors.{ch}.{k}", "unknown key")
        _num(cfg, f"detectors.{ch}.efficiency", minimum=0.0, exclusive=True, maximum=1.0)
        _num(cfg, f"detectors.{ch}.dark_rate", minimum=0.0)
        _num(cfg, f"detectors.{ch}.jitter_sigma", minimum=0.0)
        _num(cfg, f"detectors.{ch}.channel_delay")
        dets.append(DetectorParams(tdc_resolution=res, **det[ch]))

    pump = cfg["pump"]
    if pump["profile_csv"] is not None:
        path = Path(pump["profile_csv"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.is_file():
            raise ConfigError("pump.profile_csv", f"file not found: {path}")
        try:
            profile = load_profile(path)
        except ParseError as exc:
            raise ConfigError("pump.profile_csv", str(exc)) from None
    else:
        p = _num(cfg, "pump.constant_nw", minimum=0.0, exclusive=True)
        profile = PumpProfile.constant(p)

    for k in ("theta_s", "theta_s_prime", "theta_i", "theta_i_prime"):
        _num(cfg, f"chsh.{k}")
    if cfg["chsh"]["mode"] not in ("counts", "exact"):
        raise ConfigError("chsh.mode", "must be 'counts' or 'exact'")
    chsh = ChshSettings(**{k: v for k, v in cfg["chsh"].items() if k != "mode"})

    acq = cfg["acquisition"]
    duration = _num(cfg, "acquisition.duration_s", minimum=0.0, exclusive=True)
    start = _num(cfg, "acquisition.start_time")
    if acq["settings"] is not None:
        settings = acq["settings"]
        if not isinstance(settings, list) or not settings:
            raise ConfigError("acquisition.settings", "must be a non-empty list of [signal, idler] pairs")
        for k, pair in enumerate(settings):
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ConfigError(f"acquisition.settings[{k}]", "expected a [signal, idler] pair")
            for side, lab in zip(("signal", "idler"), pair):
                try:
                    setting_projector(lab)
                except InvalidArgumentError as exc:
                    raise ConfigError(f"acquisition.settings[{k}].{side}", str(exc)) from None
        settings = [(str(a), str(b)) for a, b in settings]
    else:
        if acq["plan"] not in PLANS:
            raise ConfigError("acquisition.plan", f"must be one of {', '.join(PLANS)}")
        settings = plan_settings(acq["plan"], chsh)
    plan = AcquisitionPlan(settings, duration_s=duration, rng_seed=s, start_time=start)
    if not profile.is_constant:
        lo, hi = profile.domain
        if plan.start_times[0] < lo or plan.start_times[-1] + duration > hi:
            raise ConfigError("acquisition.start_time", f"acquisitions fall outside the pump profile domain [{lo}, {hi}]")

    c = cfg["correlator"]
    _num(cfg, "correlator.bin_width_ps", minimum=0.0, exclusive=True)
    _num(cfg, "correlator.window_ps", minimum=0.0, exclusive=True)
    _num(cfg, "correlator.exclusion_ps", minimum=0.0)
    _num(cfg, "correlator.reference_power_nw", minimum=0.0, exclusive=True)
    _num(cfg, "correlator.center_ps", allow_none=True)
    rng = c["range_ps"]
    if not (isinstance(rng, list) and len(rng) == 2 and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in rng) and rng[0] < rng[1]):
        raise ConfigError("correlator.range_ps", "expected [min, max] with min < max")
    if not isinstance(c["subtract_accidentals"], bool):
        raise ConfigError("correlator.subtract_accidentals", "expected true or false")

    n = cfg["tomography"]["bootstrap"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 0 or n == 1:
        raise ConfigError("tomography.bootstrap", "must be 0 (off) or an integer >= 2")

    return ExperimentConfig(cfg, s, source, dets[0], dets[1], profile, plan, chsh, base_dir)


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        return build_config(seed=seed)
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON at line {exc.lineno} col {exc.colno}") from None
    return build_config(data, base_dir=path.parent, seed=seed)
