"""Experiment configuration: JSON in, validated dataclasses out.

A config file may specify any subset of the keys; everything else falls back
to the default synthetic case (20x20 grid, 3x3 partition, one infarcted
region, 20 dB measurement noise).  The master seed is mandatory - there is no
wall-clock seeding anywhere in the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import forward_model as fm


class ConfigError(ValueError):
    """Invalid or missing configuration value."""


@dataclass
class CaseConfig:
    nx: int = 20
    ny: int = 20
    h: float = 1.0
    partition_rows: int = 3
    partition_cols: int = 3
    k: float = fm.DEFAULT_K
    d: float = fm.DEFAULT_D
    e0: float = fm.DEFAULT_E0
    mu1: float = fm.DEFAULT_MU1
    mu2: float = fm.DEFAULT_MU2
    theta_true: list | None = None
    stim_origin: list = field(default_factory=lambda: [0, 0])
    stim_block: list = field(default_factory=lambda: [3, 3])
    stim_t_on: float = 0.0
    stim_t_off: float = 1.0
    stim_amplitude: float = 1.0
    electrode_count: int = 16
    electrode_radius: float | None = None
    electrode_positions: list | None = None
    snr_db: float = 20.0
    dt: float = 0.1
    t_end: float = 25.0
    store_every: int = 5

    @property
    def n_regions(self) -> int:
        return self.partition_rows * self.partition_cols

    def resolved_theta_true(self) -> np.ndarray:
        if self.theta_true is not None:
            theta = np.asarray(self.theta_true, dtype=float)
            if theta.size != self.n_regions:
                raise ConfigError(
                    f"case.theta_true has {theta.size} entries, partition has "
                    f"{self.n_regions} regions"
                )
            return theta
        theta = np.full(self.n_regions, 0.15)
        theta[self.n_regions // 2] = 0.5  # one infarcted block by default
        return theta


@dataclass
class SurrogateConfig:
    beta: float = 4.0
    budget_max: int = 60
    stall_tol: float = 0.01
    hyperopt_every: int = 5
    restarts: int = 4
    init_design_size: int | None = None

    def resolved_init_size(self, n_regions: int) -> int:
        if self.init_design_size is not None:
            return int(self.init_design_size)
        return max(n_regions + 1, 2 * n_regions)


@dataclass
class SamplingConfig:
    chains: int = 4
    steps: int = 20000
    burn_in_frac: float = 0.25
    thin: int = 2
    slice_samples: int = 20000
    slice_burn_in: int = 500
    accept_lo: float = 0.3
    accept_hi: float = 0.4
    pilot_steps: int = 2000


@dataclass
class ExperimentConfig:
    case: CaseConfig
    surrogate: SurrogateConfig
    sampling: SamplingConfig
    seed: int
    out: str

    def to_dict(self) -> dict:
        return {
            "case": asdict(self.case),
            "surrogate": asdict(self.surrogate),
            "sampling": asdict(self.sampling),
            "seed": self.seed,
            "out": self.out,
        }


def _build_section(cls, data: dict, section: str):
    known = {f for f in cls.__dataclass_fields__}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(extra)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def load_config(path=None, seed=None, out=None) -> ExperimentConfig:
    """Load and validate a config file; CLI --seed/--out override the file."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config {path} is not valid JSON (line {exc.lineno}, column {exc.colno}): "
                f"{exc.msg}"
            ) from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")

    known = {"case", "surrogate", "sampling", "seed", "out"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown top-level key(s): {sorted(extra)}")

    cfg = ExperimentConfig(
        case=_build_section(CaseConfig, data.get("case", {}), "case"),
        surrogate=_build_section(SurrogateConfig, data.get("surrogate", {}), "surrogate"),
        sampling=_build_section(SamplingConfig, data.get("sampling", {}), "sampling"),
        seed=seed if seed is not None else data.get("seed"),
        out=out if out is not None else data.get("out", "runs"),
    )
    if cfg.seed is None:
        raise ConfigError("a master seed is required (config 'seed' or --seed)")
    try:
        cfg.seed = int(cfg.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer: {cfg.seed!r}") from exc
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    c, s, m = cfg.case, cfg.surrogate, cfg.sampling
    if c.nx < 2 or c.ny < 2:
        raise ConfigError("case.nx and case.ny must be >= 2")
    if not (1 <= c.partition_rows <= c.nx and 1 <= c.partition_cols <= c.ny):
        raise ConfigError("case.partition dims must fit the grid")
    if not c.dt > 0 or not c.t_end > 0:
        raise ConfigError("case.dt and case.t_end must be positive")
    if c.store_every < 1:
        raise ConfigError("case.store_every must be >= 1")
    if c.snr_db is None or not np.isfinite(c.snr_db):
        raise ConfigError("case.snr_db must be finite (the likelihood needs sigma_e > 0)")
    if c.d > 0 and c.dt > c.h**2 / (4.0 * c.d) * (1 + 1e-12):
        raise ConfigError(
            f"case.dt={c.dt} violates the stability bound h^2/(4d)="
            f"{c.h ** 2 / (4.0 * c.d)}"
        )
    theta = c.resolved_theta_true()
    if np.any(theta < fm.A_MIN) or np.any(theta > fm.A_MAX):
        raise ConfigError(f"case.theta_true entries must lie in [{fm.A_MIN}, {fm.A_MAX}]")
    if c.electrode_positions is None and c.electrode_count < 1:
        raise ConfigError("case.electrode_count must be >= 1")
    if m.chains < 1 or m.steps < 1:
        raise ConfigError("sampling.chains and sampling.steps must be >= 1")
    if not 0 <= m.burn_in_frac < 1:
        raise ConfigError("sampling.burn_in_frac must be in [0, 1)")
    if m.thin < 1:
        raise ConfigError("sampling.thin must be >= 1")
    if not 0 < m.accept_lo <= m.accept_hi < 1:
        raise ConfigError("sampling acceptance range must satisfy 0 < lo <= hi < 1")
    n_regions = c.n_regions
    if s.resolved_init_size(n_regions) < n_regions + 1:
        raise ConfigError(f"surrogate.init_design_size must be >= {n_regions + 1}")
    if s.budget_max < n_regions + 2:
        raise ConfigError(f"surrogate.budget_max must be >= {n_regions + 2}")
    if s.budget_max < s.resolved_init_size(n_regions):
        raise ConfigError("surrogate.budget_max must cover the initial design")


def build_case(case: CaseConfig):
    """Instantiate the forward-model objects a case config describes."""
    geometry = fm.build_grid(case.nx, case.ny, case.h)
    partition = fm.partition_grid(geometry, case.partition_rows, case.partition_cols)
    stimulus = fm.block_stimulus(
        geometry,
        origin=tuple(case.stim_origin),
        block=tuple(case.stim_block),
        t_on=case.stim_t_on,
        t_off=case.stim_t_off,
        amplitude=case.stim_amplitude,
    )
    if case.electrode_positions is not None:
        electrodes = np.asarray(case.electrode_positions, dtype=float)
    else:
        electrodes = fm.circle_electrodes(geometry, case.electrode_count, case.electrode_radius)
    lead_field = fm.build_lead_field(geometry, electrodes)
    return geometry, partition, stimulus, lead_field
