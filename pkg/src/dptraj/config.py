"""Run configuration: flat ``key = value`` text with ``#`` comments.

Unknown keys are rejected. Every key has a default, so an empty file (or no
file at all) yields the standard San Francisco setup.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .dpsgd import DpSgdConfig
from .errors import ConfigError
from .grid import GridSpec, NeighborhoodSpec
from .preprocess import DEFAULT_TZ, PreprocessSettings, default_holidays, load_holidays

SF_BBOX = (37.6017, 37.8112, -122.5158, -122.3527)

TI_DEFAULTS = DpSgdConfig(clip_norm=1.0, noise_multiplier=1.3, batch_size=200, learning_rate=0.2, epochs=15, seed=0)
TPG_DEFAULTS = DpSgdConfig(clip_norm=3.0, noise_multiplier=1.3, batch_size=200, learning_rate=0.1, epochs=15, seed=1)

DPSGD_KEYS = ("clip_norm", "noise_multiplier", "batch_size", "learning_rate", "epochs", "seed")


@dataclass
class RunConfig:
    bbox: tuple = SF_BBOX  # lat_min, lat_max, lon_min, lon_max
    cell_size: float = 500.0
    s: int = 5
    v_max: float = 150.0
    window: int = 60
    gap: int = 300
    holidays: str = ""  # empty: bundled US federal holidays
    timezone: str = DEFAULT_TZ
    workers: int = 1
    index: str = "occupied"  # or "full"
    ti: DpSgdConfig = TI_DEFAULTS
    tpg: DpSgdConfig = TPG_DEFAULTS
    ti_hidden: int = 100
    ti_latent: int = 50
    tpg_embed: int = 50
    tpg_hidden: int = 200
    delta: float | None = None  # None: 1/|D|
    seed: int = 0
    n: int | None = None  # None: |D| recorded with the TI model
    retries: int = 20
    emd_sample_cap: int = 2000
    tpr_k: tuple = (10, 20, 50, 100)
    raw: str = "raw"
    dataset: str = "dataset.ptraj"
    ti_model: str = "ti.mdl"
    tpg_model: str = "tpg.mdl"
    synthetic: str = "synthetic.ptraj"
    report: str = "metrics.txt"
    ledger: str = "ledger.json"
    sources: dict = field(default_factory=dict, repr=False)

    def grid(self) -> GridSpec:
        try:
            return GridSpec(*self.bbox, self.cell_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def neighborhood(self) -> NeighborhoodSpec:
        return NeighborhoodSpec(self.s)

    def preprocess_settings(self) -> PreprocessSettings:
        hol = load_holidays(self.holidays) if self.holidays else default_holidays()
        return PreprocessSettings(self.v_max, self.window, self.gap, self.timezone, hol)

    def delta_for(self, n_records: int) -> float:
        return self.delta if self.delta is not None else 1.0 / n_records

    def as_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "sources":
                continue
            v = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(v) if isinstance(v, DpSgdConfig) else v
        return json.loads(json.dumps(out))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


def _floats(text: str, n: int | None = None) -> tuple:
    vals = tuple(float(x) for x in text.split(","))
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers")
    return vals


_PARSERS = {
    "bbox": lambda v: _floats(v, 4), "cell_size": float, "s": int, "v_max": float, "window": int,
    "gap": int, "holidays": str, "timezone": str, "workers": int, "index": str,
    "ti_hidden": int, "ti_latent": int, "tpg_embed": int, "tpg_hidden": int,
    "delta": lambda v: None if v.lower() in ("", "auto") else float(v), "seed": int,
    "n": lambda v: None if v.lower() in ("", "auto") else int(v), "retries": int,
    "emd_sample_cap": int, "tpr_k": lambda v: tuple(int(x) for x in v.split(",")),
    "raw": str, "dataset": str, "ti_model": str, "tpg_model": str, "synthetic": str,
    "report": str, "ledger": str,
}
_DPSGD_PARSERS = {"clip_norm": float, "noise_multiplier": float, "batch_size": int,
                  "learning_rate": float, "epochs": int, "seed": int}
# the dotted model keys are accepted with either separator
_ALIASES = {"ti.hidden": "ti_hidden", "ti.latent": "ti_latent", "tpg.embed_dim": "tpg_embed",
            "tpg.hidden": "tpg_hidden"}


def parse_lines(lines, origin: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a raw string mapping."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def build_config(raw: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    models = {"ti": dataclasses.asdict(cfg.ti), "tpg": dataclasses.asdict(cfg.tpg)}
    for key, value in raw.items():
        key = _ALIASES.get(key, key)
        try:
            if key in _PARSERS:
                setattr(cfg, key, _PARSERS[key](value))
            elif "." in key and key.split(".", 1)[0] in models and key.split(".", 1)[1] in _DPSGD_PARSERS:
                which, name = key.split(".", 1)
                models[which][name] = _DPSGD_PARSERS[name](value)
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
        cfg.sources[key] = value
    try:
        cfg.ti, cfg.tpg = DpSgdConfig(**models["ti"]), DpSgdConfig(**models["tpg"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    problems = []
    if cfg.s < 0:
        problems.append("s must be >= 0")
    if not cfg.cell_size > 0:
        problems.append("cell_size must be > 0")
    if cfg.v_max <= 0 or cfg.window <= 0 or cfg.gap <= 0:
        problems.append("v_max, window and gap must be positive")
    if cfg.delta is not None and not 0 < cfg.delta < 1:
        problems.append("delta must lie in (0, 1)")
    if cfg.index not in ("occupied", "full"):
        problems.append("index must be 'occupied' or 'full'")
    if cfg.n is not None and cfg.n < 0:
        problems.append("n must be >= 0")
    if cfg.retries < 1 or cfg.emd_sample_cap < 1 or any(k < 1 for k in cfg.tpr_k):
        problems.append("retries, emd_sample_cap and tpr_k must be positive")
    if not all(math.isfinite(x) for x in cfg.bbox):
        problems.append("bbox must be finite")
    if problems:
        raise ConfigError("; ".join(problems))
    cfg.grid()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        raw = parse_lines(text.splitlines(), str(path))
    raw.update(overrides or {})
    return build_config(raw)
