"""Configuration dataclasses and JSON loading for runs.

Every knob a run needs lives here so experiments are reproducible from
one JSON file. ``load_run_config`` fills unspecified fields with the
defaults below; the AVP_SEED environment variable, when set, overrides
the master seed of any loaded config.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import IpmIntrinsics

SEED_ENV_VAR = "AVP_SEED"


@dataclass(frozen=True)
class NoiseSpec:
    """Segmentation noise for the simulated observer."""

    p_flip: float = 1e-4     # per-cell chance of a wrong class label; flips
                             # accumulate across revisits, so this stays low
    jitter_px: float = 1.0   # max per-frame feature displacement, bird's-eye pixels
    p_drop: float = 0.05     # per-frame chance a whole feature goes missing
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_flip", "p_drop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.jitter_px < 0:
            raise ValueError(f"jitter_px must be nonnegative, got {self.jitter_px}")


@dataclass(frozen=True)
class OdomNoise:
    """Wheel-odometry corruption model."""

    sigma_v: float = 0.008       # fractional translation noise per step
    sigma_omega: float = 4e-4    # yaw noise, rad per meter driven
    bias_omega: float = 2.5e-4   # systematic yaw drift, rad/s
    seed: int = 0


@dataclass(frozen=True)
class IcpConfig:
    max_iter: int = 30
    tol: float = 1e-4        # pose-delta norm that stops iterating
    max_corr: float = 1.0    # correspondence rejection distance, m
    min_inlier: float = 0.6  # acceptance gate on matched fraction
    max_resid: float = 0.10  # acceptance gate on mean residual, m
    min_points: int = 50     # required localization-class points in the source
    cell: float = 0.5        # spatial index cell size, m


@dataclass(frozen=True)
class MappingConfig:
    segment_length: float = 30.0  # odometry arc length per local map, m
    voxel: float = 0.1            # local/global map downsampling cell, m
    loop_radius: float = 15.0     # candidate search radius, m
    exclude_recent: int = 2       # most recent local maps never considered
    loop_search_range: float = 4.5  # translation grid half-range for loop seeding, m
    loop_search_step: float = 1.5
    loop_seed_tries: int = 9      # full refinements among the best-seeded guesses
    odom_weight: float = 1.0
    loop_weight: float = 100.0   # ICP closures are far tighter than 30 m odometry hops
    gn_max_iter: int = 50
    gn_step_tol: float = 1e-6
    gn_damping: float = 1e-6      # first damping value after a cost increase
    gn_retries: int = 10
    jac_step: float = 1e-6        # central-difference step for graph Jacobians


@dataclass(frozen=True)
class LocalizerConfig:
    init_cov_rot: float = 0.01    # rad^2 per rotation axis at initialization
    init_cov_trans: float = 1.0   # m^2 per translation axis at initialization
    q_rot: float = 2e-6           # per-frame process noise, rad^2
    q_trans: float = 1e-5         # per-frame process noise, m^2
    sigma_rot: float = 0.01       # measurement noise floor, rad
    sigma_trans: float = 0.03     # measurement noise floor, m
    resid_floor: float = 0.02     # registration residual treated as nominal, m
    gate: float = 16.8            # chi-square gate, 6 dof
    reloc_stride: int = 1         # attempt relocalization every n-th frame
    reloc_points: int = 320       # source-cloud cap per registration attempt
    icp_tol: float = 3e-3         # tracking-time registration stop; polishing
                                  # below the filter's measurement floor is wasted
    jac_step: float = 1e-5        # central-difference step for filter Jacobians

    def init_cov(self) -> np.ndarray:
        return np.diag([self.init_cov_rot] * 3 + [self.init_cov_trans] * 3)

    def process_noise(self) -> np.ndarray:
        return np.diag([self.q_rot] * 3 + [self.q_trans] * 3)

    def measurement_noise(self, mean_residual: float) -> np.ndarray:
        """Heuristic: inflate the floor when registration fit worsens."""
        inflate = max(1.0, mean_residual / self.resid_floor)
        return np.diag([self.sigma_rot ** 2] * 3 + [self.sigma_trans ** 2] * 3) * inflate


@dataclass(frozen=True)
class SimConfig:
    speed: float = 2.0         # m/s along the route
    rate_hz: float = 15.0      # pose/observation cadence
    turn_radius: float = 3.0   # corner rounding for generated routes, m
    footprint: float = 10.0    # half-extent of the observed patch, m
    point_pitch: float = 0.1   # point-tier sampling pitch, m
    tier: str = "point"        # "point" or "pixel"
    stride: int = 4            # pixel-tier feature extraction stride


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    odom: OdomNoise = field(default_factory=OdomNoise)
    icp: IcpConfig = field(default_factory=IcpConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    ipm: IpmIntrinsics = field(default_factory=IpmIntrinsics)


_SECTIONS = {
    "noise": NoiseSpec,
    "odom": OdomNoise,
    "icp": IcpConfig,
    "mapping": MappingConfig,
    "localizer": LocalizerConfig,
    "sim": SimConfig,
    "ipm": IpmIntrinsics,
}


def _build(cls, doc: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(doc)
    for key in ("center", "size"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def load_run_config(path: str | Path | None = None) -> RunConfig:
    """Builds a RunConfig from a JSON file (or pure defaults).

    Seeds: the master ``seed`` feeds the world generator; sections that
    were not given an explicit seed derive theirs from it (noise: +1,
    odometry: +2). AVP_SEED in the environment overrides the master
    seed and re-derives non-explicit section seeds.
    """
    doc: dict = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - (set(_SECTIONS) | {"seed"})
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")

    seed = int(doc.get("seed", 0))
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        seed = int(env_seed)

    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build(cls, dict(doc.get(name, {})))
    if "seed" not in doc.get("noise", {}) or env_seed is not None:
        sections["noise"] = dataclasses.replace(sections["noise"], seed=seed + 1)
    if "seed" not in doc.get("odom", {}) or env_seed is not None:
        sections["odom"] = dataclasses.replace(sections["odom"], seed=seed + 2)
    return RunConfig(seed=seed, **sections)


def config_digest(cfg: RunConfig) -> bytes:
    """16-byte digest of a config; stored in map file headers."""
    import hashlib

    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.md5(blob).digest()
