"""Relocalization against a prior map, fused with odometry in an EKF.

The filter state is the full vehicle pose in minimal coordinates (a
rotation vector stacked on a translation, both in the map frame).
Odometry deltas drive the prediction; accepted ICP matches against the
stored map act as direct pose measurements. A chi-square gate keeps
inconsistent matches (wrong basin, degenerate geometry) from ever
touching the state; skipped or rejected frames simply coast on
odometry.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

from .config import IcpConfig, LocalizerConfig
from .geometry import Pose6, compose, relative
from .mapping import GlobalMap
from .registration import RegistrationError, icp
from .semantics import PointCloud


class Status(Enum):
    UNINITIALIZED = "uninitialized"
    TRACKING = "tracking"
    COASTING = "coasting"


@dataclass
class LocState:
    mean: Pose6
    covariance: np.ndarray      # 6x6 over (rotvec, translation)
    status: Status = Status.UNINITIALIZED

    def __post_init__(self) -> None:
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(6, 6)


@dataclass(frozen=True)
class PoseMeasurement:
    pose: Pose6
    mean_residual: float
    inlier_ratio: float


def initialize(gmap: GlobalMap, hint: Pose6 | None = None,
               cfg: LocalizerConfig | None = None) -> LocState:
    """Seeds the filter at an external hint or at the map's entrance."""
    cfg = cfg or LocalizerConfig()
    mean = hint if hint is not None else gmap.entrance
    return LocState(mean=mean, covariance=cfg.init_cov(), status=Status.COASTING)


def relocalize(feats: PointCloud, gmap: GlobalMap, prior: Pose6,
               icp_cfg: IcpConfig | None = None,
               max_points: int | None = None) -> PoseMeasurement | None:
    """One ICP attempt against the map; None whenever the gates say no.

    ``max_points`` caps the source by stride subsampling; a surround
    view carries several times the points registration needs per frame.
    """
    if max_points is not None and len(feats) > max_points:
        step = -(-len(feats) // max_points)
        feats = feats.select(slice(None, None, step))
    try:
        res = icp(feats, gmap.index, prior, icp_cfg)
    except RegistrationError:
        return None
    if not res.accepted:
        return None
    return PoseMeasurement(pose=res.pose, mean_residual=res.mean_residual,
                           inlier_ratio=res.inlier_ratio)


def _numeric_jacobian(fn, x0: np.ndarray, step: float) -> np.ndarray:
    y0 = fn(x0)
    jac = np.zeros((y0.shape[0], x0.shape[0]))
    for c in range(x0.shape[0]):
        xp = x0.copy()
        xm = x0.copy()
        xp[c] += step
        xm[c] -= step
        jac[:, c] = (fn(xp) - fn(xm)) / (2.0 * step)
    return jac


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return (p + p.T) / 2.0


def ekf_predict(state: LocState, delta: Pose6, q: np.ndarray,
                jac_step: float = 1e-5) -> LocState:
    """Propagates the state through one odometry delta.

    The mean composes exactly; the covariance maps through the numeric
    Jacobian of the composition with respect to the state coordinates.
    """
    q = np.asarray(q, dtype=float).reshape(6, 6)
    if np.min(np.linalg.eigvalsh(_symmetrize(q))) < -1e-12:
        raise ValueError("process noise Q is not positive semi-definite")

    def f(x: np.ndarray) -> np.ndarray:
        return compose(Pose6.from_vector(x), delta).as_vector()

    x0 = state.mean.as_vector()
    fmat = _numeric_jacobian(f, x0, jac_step)
    cov = _symmetrize(fmat @ state.covariance @ fmat.T + q)
    return LocState(mean=compose(state.mean, delta), covariance=cov,
                    status=state.status)


def ekf_update(state: LocState, meas: PoseMeasurement, r: np.ndarray,
               gate: float = 16.8, jac_step: float = 1e-5) -> LocState:
    """Folds one pose measurement in, or refuses it at the gate.

    The innovation is the minimal-coordinate difference between the
    predicted and measured pose; its squared Mahalanobis norm against
    the innovation covariance decides acceptance. A gated measurement
    leaves mean and covariance untouched and flags the frame Coasting.
    """
    r = np.asarray(r, dtype=float).reshape(6, 6)
    z = meas.pose

    def rho(x: np.ndarray) -> np.ndarray:
        return relative(Pose6.from_vector(x), z).as_vector()

    x0 = state.mean.as_vector()
    nu = rho(x0)
    hmat = _numeric_jacobian(rho, x0, jac_step)
    s = _symmetrize(hmat @ state.covariance @ hmat.T + r)
    try:
        s_inv_nu = np.linalg.solve(s, nu)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"singular innovation covariance: {exc}") from exc
    md2 = float(nu @ s_inv_nu)
    if md2 > gate:
        return LocState(mean=state.mean, covariance=state.covariance.copy(),
                        status=Status.COASTING)

    k = np.linalg.solve(s, hmat @ state.covariance).T
    mean = Pose6.from_vector(x0 - k @ nu)
    ikh = np.eye(6) - k @ hmat
    cov = _symmetrize(ikh @ state.covariance @ ikh.T + k @ r @ k.T)
    return LocState(mean=mean, covariance=cov, status=Status.TRACKING)


def track(
    gmap: GlobalMap,
    state: LocState,
    frames: Iterable[tuple[Pose6, PointCloud]],
    cfg: LocalizerConfig | None = None,
    icp_cfg: IcpConfig | None = None,
) -> Iterator[LocState]:
    """Runs the filter over (odometry delta, features) frames.

    Emits one state per frame. A frame is Tracking only when this
    frame's relocalization was attempted, accepted by the ICP gates,
    and accepted by the chi-square gate; everything else coasts.
    """
    cfg = cfg or LocalizerConfig()
    icp_cfg = replace(icp_cfg or IcpConfig(), tol=cfg.icp_tol)
    q = cfg.process_noise()
    for count, (delta, feats) in enumerate(frames):
        state = ekf_predict(state, delta, q, cfg.jac_step)
        meas = None
        if count % cfg.reloc_stride == 0:
            meas = relocalize(feats, gmap, state.mean, icp_cfg, cfg.reloc_points)
        if meas is None:
            state = LocState(state.mean, state.covariance.copy(), Status.COASTING)
        else:
            state = ekf_update(state, meas,
                               cfg.measurement_noise(meas.mean_residual),
                               cfg.gate, cfg.jac_step)
        yield state
