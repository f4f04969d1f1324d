"""Fisheye camera model and bird's-eye (ground-plane) projection.

Camera frame convention: +z is the optical axis, +x right, +y down in
the image. ``FisheyeCamera.extrinsic`` is the pose of the camera in the
vehicle frame, so ``transform_point(extrinsic, x_cam)`` maps camera
coordinates into vehicle coordinates. The vehicle frame has +x forward,
+y left, +z up, origin on the ground under the vehicle center.

The projection is the equidistant fisheye model with a polynomial
distortion on the incidence angle theta (angle from the optical axis):

    radius_px = focal * d(theta)
    d(theta)  = theta * (1 + k1 t^2 + k2 t^4 + k3 t^6 + k4 t^8)

``fisheye_unproject`` inverts d() by Newton iteration. Rays steeper
than ``MAX_THETA`` from the axis are outside the modeled field of view.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose6, inverse, rotvec_to_matrix, transform_point

MAX_THETA = np.pi / 2 + 0.3   # FOV limit, radians from the optical axis
_NEWTON_ITERS = 10
_NEWTON_TOL = 1e-10


class BehindCameraError(ValueError):
    """Point lies outside the forward field of view."""


class OutOfFovError(ValueError):
    """Pixel radius exceeds the calibrated field of view."""


class NoGroundIntersectionError(ValueError):
    """Viewing ray does not hit the ground plane in front of the camera."""


@dataclass(frozen=True)
class FisheyeCamera:
    focal: float
    principal_point: np.ndarray     # (2,) pixels
    distortion: np.ndarray          # k1..k4
    extrinsic: Pose6                # camera pose in the vehicle frame
    image_size: tuple[int, int]     # (width, height) pixels
    name: str = ""

    def __post_init__(self) -> None:
        if self.focal <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        pp = np.array(self.principal_point, dtype=float).reshape(2)
        pp.setflags(write=False)
        object.__setattr__(self, "principal_point", pp)
        k = np.array(self.distortion, dtype=float).reshape(4)
        k.setflags(write=False)
        object.__setattr__(self, "distortion", k)
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError(f"bad image size {self.image_size}")
        object.__setattr__(self, "image_size", (int(w), int(h)))


@dataclass(frozen=True)
class IpmIntrinsics:
    """Affine map from vehicle-frame ground meters to bird's-eye pixels.

    u = scale * x + center_u, v = scale * y + center_v. The default grid
    is 1000x1000 px at 50 px/m, i.e. a +-10 m footprint at 2 cm/px with
    the vehicle origin at the image center.
    """

    scale: float = 50.0
    center: tuple[float, float] = (500.0, 500.0)
    size: tuple[int, int] = (1000, 1000)   # (width, height)

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "size", (int(self.size[0]), int(self.size[1])))

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.scale, 0.0, self.center[0]],
            [0.0, self.scale, self.center[1]],
            [0.0, 0.0, 1.0],
        ])


@dataclass
class LabelImage:
    """Dense per-pixel class codes, indexed labels[v, u]."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"labels must be 2-D, got shape {lab.shape}")
        self.labels = lab.astype(np.uint8, copy=False)

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.labels.shape
        return (w, h)

    @staticmethod
    def filled(size: tuple[int, int], code: int) -> "LabelImage":
        w, h = size
        return LabelImage(np.full((h, w), code, dtype=np.uint8))


def _distort(theta: np.ndarray, k: np.ndarray) -> np.ndarray:
    t2 = theta * theta
    return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))


def _distort_deriv(theta: np.ndarray, k: np.ndarray) -> np.ndarray:
    t2 = theta * theta
    return 1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])))


def fisheye_project(cam: FisheyeCamera, x_cam: np.ndarray) -> np.ndarray:
    """Camera-frame points (..., 3) to pixel coordinates (..., 2)."""
    uv, ok = _project_masked(cam, x_cam)
    if not np.all(ok):
        raise BehindCameraError("point beyond the forward field of view")
    return uv


def _project_masked(cam: FisheyeCamera, x_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels, in-fov mask) without raising."""
    x = np.asarray(x_cam, dtype=float)
    scalar = x.ndim == 1
    x = np.atleast_2d(x)
    rho = np.hypot(x[..., 0], x[..., 1])
    theta = np.arctan2(rho, x[..., 2])
    ok = theta < MAX_THETA
    rd = cam.focal * _distort(theta, cam.distortion)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rho > 0.0, rd / np.where(rho > 0.0, rho, 1.0), 0.0)
    uv = cam.principal_point + scale[..., None] * x[..., :2]
    if scalar:
        return uv[0], ok[0]
    return uv, ok


def _radius_to_theta(cam: FisheyeCamera, r_norm: np.ndarray) -> np.ndarray:
    """Newton inversion of d(theta) = r_norm (radius over focal)."""
    k = cam.distortion
    theta = np.array(r_norm, dtype=float, copy=True)
    for _ in range(_NEWTON_ITERS):
        f = _distort(theta, k) - r_norm
        if np.max(np.abs(f)) < _NEWTON_TOL:
            break
        theta = theta - f / _distort_deriv(theta, k)
        np.clip(theta, 0.0, MAX_THETA + 0.2, out=theta)
    return theta


def fisheye_unproject(cam: FisheyeCamera, uv: np.ndarray) -> np.ndarray:
    """Pixels (..., 2) to unit viewing rays (..., 3) in the camera frame."""
    uv = np.asarray(uv, dtype=float)
    scalar = uv.ndim == 1
    uv = np.atleast_2d(uv)
    d = uv - cam.principal_point
    r = np.hypot(d[..., 0], d[..., 1])
    r_max = cam.focal * _distort(np.array(MAX_THETA), cam.distortion)
    if np.any(r > r_max + 1e-9):
        raise OutOfFovError(
            f"pixel radius {float(np.max(r)):.2f} px beyond calibrated FOV ({float(r_max):.2f} px)")
    theta = _radius_to_theta(cam, r / cam.focal)
    sin_t = np.sin(theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        dir_xy = d / np.where(r > 0.0, r, 1.0)[..., None]
    rays = np.empty(uv.shape[:-1] + (3,))
    rays[..., 0] = sin_t * dir_xy[..., 0]
    rays[..., 1] = sin_t * dir_xy[..., 1]
    rays[..., 2] = np.cos(theta)
    rays[r == 0.0] = (0.0, 0.0, 1.0)
    if scalar:
        return rays[0]
    return rays


def pixel_to_ground(cam: FisheyeCamera, uv: np.ndarray) -> np.ndarray:
    """Intersects the viewing ray of a pixel with the ground plane z=0.

    Returns the (x, y) vehicle-frame ground point. Raises
    NoGroundIntersectionError when the ray is parallel to the ground or
    points away from it.
    """
    ray_cam = fisheye_unproject(cam, uv)
    r_ve = rotvec_to_matrix(cam.extrinsic.r)
    d = ray_cam @ r_ve.T
    o = cam.extrinsic.t
    dz = d[..., 2]
    if np.any(np.abs(dz) < 1e-12):
        raise NoGroundIntersectionError("viewing ray parallel to the ground plane")
    lam = -o[2] / dz
    if np.any(lam <= 0.0):
        raise NoGroundIntersectionError("ground intersection behind the camera")
    g = o[:2] + lam[..., None] * d[..., :2] if d.ndim > 1 else o[:2] + lam * d[:2]
    return g


def vehicle_to_ipm(ipm: IpmIntrinsics, xy: np.ndarray) -> np.ndarray:
    """Vehicle-frame ground meters (..., 2) to bird's-eye pixels (..., 2)."""
    xy = np.asarray(xy, dtype=float)
    return xy * ipm.scale + np.asarray(ipm.center)


def ipm_to_vehicle(ipm: IpmIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Bird's-eye pixels (..., 2) back to vehicle-frame ground meters."""
    uv = np.asarray(uv, dtype=float)
    return (uv - np.asarray(ipm.center)) / ipm.scale


def synthesize_ipm(
    cams: list[FisheyeCamera],
    images: list[LabelImage],
    ipm: IpmIntrinsics,
    fill: int = 0,
) -> LabelImage:
    """Stitches per-camera label images into one bird's-eye label image.

    Each output pixel is lifted to the ground plane and projected into
    every camera; among cameras whose field of view covers the point,
    the one with the nearest optical center wins (earlier camera on
    exact ties). Pixels no camera covers keep ``fill``.
    """
    if len(cams) != len(images):
        raise ValueError(f"{len(cams)} cameras but {len(images)} images")
    w, h = ipm.size
    out = np.full((h, w), fill, dtype=np.uint8)
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    ground = ipm_to_vehicle(ipm, np.stack([us.ravel(), vs.ravel()], axis=1))
    ground3 = np.concatenate([ground, np.zeros((ground.shape[0], 1))], axis=1)
    best_d2 = np.full(ground.shape[0], np.inf)

    for cam, img in zip(cams, images):
        if img.size != cam.image_size:
            raise ValueError(
                f"camera {cam.name!r} expects image size {cam.image_size}, got {img.size}")
        x_cam = transform_point(inverse(cam.extrinsic), ground3)
        uv, ok = _project_masked(cam, x_cam)
        ui = np.rint(uv[:, 0]).astype(np.int64)
        vi = np.rint(uv[:, 1]).astype(np.int64)
        cw, ch = cam.image_size
        ok &= (ui >= 0) & (ui < cw) & (vi >= 0) & (vi < ch)
        d2 = np.sum((ground3 - cam.extrinsic.t) ** 2, axis=1)
        take = ok & (d2 < best_d2)
        if not np.any(take):
            continue
        out.ravel()[np.flatnonzero(take)] = img.labels[vi[take], ui[take]]
        best_d2[take] = d2[take]
    return LabelImage(out)


def load_calibration(path: str | Path) -> tuple[list[FisheyeCamera], IpmIntrinsics]:
    """Reads the surround-rig calibration JSON (see configs/calibration.json)."""
    doc = json.loads(Path(path).read_text())
    cams = []
    for c in doc["cameras"]:
        ext = c["extrinsic"]
        cams.append(FisheyeCamera(
            focal=float(c["focal"]),
            principal_point=np.array(c["principal_point"], dtype=float),
            distortion=np.array(c["distortion"], dtype=float),
            extrinsic=Pose6(np.array(ext["rotvec"]), np.array(ext["translation"])),
            image_size=(int(c["image_size"][0]), int(c["image_size"][1])),
            name=str(c.get("name", "")),
        ))
    ipm_doc = doc.get("ipm", {})
    ipm = IpmIntrinsics(
        scale=float(ipm_doc.get("scale", 50.0)),
        center=tuple(ipm_doc.get("center", (500.0, 500.0))),
        size=tuple(ipm_doc.get("size", (1000, 1000))),
    )
    return cams, ipm
