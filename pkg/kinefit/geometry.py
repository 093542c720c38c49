import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import BehindCameraError, DegenerateGeometryError, DimensionError, ExhaustionError, GeometryError

__all__ = [
    "Camera", "KeypointTrack", "look_at_camera", "place_cameras", "project", "project_points", "triangulate_two_view",
    "triangulate_points", "render_silhouette", "sample_candidate_points", "ProcrustesResult", "procrustes_align"
]

logger = logging.getLogger(__name__)

_ORTHONORMAL_TOL = 1e-9
_PARALLEL_TOL = 1e-9
_MIN_ACCEPTANCE = 1e-4
_MIN_DRAWS = 100000

UP = (0., 1., 0.)


@dataclass(frozen=True, eq=False)
class Camera:
    """Distortion-free pinhole camera

    Extrinsics map world to camera coordinates as `x_cam = R x_world + t`, with the camera looking down its `+z` axis,
    `x` pointing right and `y` pointing down in the image.

    Parameters
    ----------
    focal_length_mm : float
        Lens focal length.
    sensor_width_mm : float
        Sensor width, the sensor is fit horizontally to the image.
    image_width_px : int
        Image width.
    image_height_px : int
        Image height.
    rotation : torch.Tensor
        World to camera rotation `(3, 3)`, proper and orthonormal.
    translation : torch.Tensor
        World to camera translation `(3,)` in meters.
    principal_point : torch.Tensor or None
        Principal point in pixels, defaults to the image center.
    name : str
        Free-form label stored in camera files.
    """
    focal_length_mm: float
    sensor_width_mm: float
    image_width_px: int
    image_height_px: int
    rotation: torch.Tensor
    translation: torch.Tensor
    principal_point: Optional[torch.Tensor] = None
    name: str = "camera"

    def __post_init__(self):
        if not (self.focal_length_mm > 0 and self.sensor_width_mm > 0):
            raise GeometryError("focal length and sensor width must be positive")
        if not (self.image_width_px > 0 and self.image_height_px > 0):
            raise GeometryError("image size must be positive")

        rotation = torch.as_tensor(self.rotation, dtype=torch.float64)
        translation = torch.as_tensor(self.translation, dtype=torch.float64)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise DimensionError("camera extrinsics must be a (3, 3) rotation and a (3,) translation")
        if (rotation @ rotation.t() - torch.eye(3, dtype=torch.float64)).abs().max() > _ORTHONORMAL_TOL:
            raise GeometryError("camera rotation is not orthonormal")
        if torch.det(rotation) < 0:
            raise GeometryError("camera rotation has determinant -1")

        if self.principal_point is None:
            principal_point = torch.tensor([self.image_width_px / 2., self.image_height_px / 2.], dtype=torch.float64)
        else:
            principal_point = torch.as_tensor(self.principal_point, dtype=torch.float64)

        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "principal_point", principal_point)

    @property
    def focal_px(self):
        return self.focal_length_mm / self.sensor_width_mm * self.image_width_px

    @property
    def intrinsics(self):
        f = self.focal_px
        cx, cy = self.principal_point.tolist()
        return torch.tensor([[f, 0., cx], [0., f, cy], [0., 0., 1.]], dtype=torch.float64)

    @property
    def center(self):
        """Camera center in world coordinates"""
        return -self.rotation.t() @ self.translation

    @property
    def projection_matrix(self):
        return self.intrinsics @ torch.cat([self.rotation, self.translation[:, None]], dim=1)

    def to_camera(self, points):
        return points @ self.rotation.t() + self.translation

    def to_dict(self):
        return {
            "name": self.name,
            "focal_length_mm": float(self.focal_length_mm),
            "sensor_width_mm": float(self.sensor_width_mm),
            "image_width_px": int(self.image_width_px),
            "image_height_px": int(self.image_height_px),
            "principal_point_px": self.principal_point.tolist(),
            "rotation": self.rotation.tolist(),
            "translation_m": self.translation.tolist()
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                focal_length_mm=float(data["focal_length_mm"]),
                sensor_width_mm=float(data["sensor_width_mm"]),
                image_width_px=int(data["image_width_px"]),
                image_height_px=int(data["image_height_px"]),
                rotation=data["rotation"],
                translation=data["translation_m"],
                principal_point=data.get("principal_point_px"),
                name=str(data.get("name", "camera")))
        except KeyError as e:
            raise GeometryError("camera record is missing field {}".format(e))


@dataclass(frozen=True, eq=False)
class KeypointTrack:
    """Labelled 2D observations of one view over time

    `uv` has shape `(T, P, 2)` in pixels (NaN where nothing was observed), `confidence` has shape `(T, P)`.
    """
    labels: Tuple[str, ...]
    uv: torch.Tensor
    confidence: Optional[torch.Tensor] = None

    def __post_init__(self):
        uv = torch.as_tensor(self.uv, dtype=torch.float64)
        if uv.dim() != 3 or uv.size(1) != len(self.labels) or uv.size(2) != 2:
            raise DimensionError("keypoint track must have shape (T, {}, 2), got {}".format(
                len(self.labels), tuple(uv.shape)))
        if self.confidence is None:
            confidence = torch.isfinite(uv).all(dim=-1).to(torch.float64)
        else:
            confidence = torch.as_tensor(self.confidence, dtype=torch.float64)
            if confidence.shape != uv.shape[:2]:
                raise DimensionError("confidence must have shape {}, got {}".format(
                    tuple(uv.shape[:2]), tuple(confidence.shape)))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "confidence", confidence)

    @property
    def num_frames(self):
        return self.uv.size(0)


def _normalize(v):
    norm = v.norm()
    if norm < _PARALLEL_TOL:
        raise DegenerateGeometryError("cannot normalize a zero-length vector")
    return v / norm


def look_at_camera(position, target, up=UP, **intrinsics):
    """Build a camera at `position` whose optical axis passes through `target`"""
    position = torch.as_tensor(position, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    up = torch.as_tensor(up, dtype=torch.float64)

    z = _normalize(target - position)
    x = _normalize(torch.cross(z, up, dim=0))
    y = torch.cross(z, x, dim=0)
    rotation = torch.stack([x, y, z], dim=0)
    return Camera(rotation=rotation, translation=-rotation @ position, **intrinsics)


def place_cameras(config, seed):
    """Frontal and sagittal cameras around the subject with randomly perturbed placement

    Parameters
    ----------
    config : dict
        The `camera` configuration section.
    seed : int
        Seed of the placement perturbation.

    Returns
    -------
    frontal : Camera
        Camera on the `+x` axis facing the subject.
    sagittal : Camera
        Camera rotated by 90 degrees about the vertical axis, looking at the subject's side.
    """
    rng = np.random.default_rng(seed)
    intrinsics = {
        "focal_length_mm": config["focal_length_mm"],
        "sensor_width_mm": config["sensor_width_mm"],
        "image_width_px": config["image_width_px"],
        "image_height_px": config["image_height_px"]
    }

    cameras = []
    for name, azimuth in (("frontal", 0.), ("sagittal", 90.)):
        azimuth = math.radians(azimuth + rng.uniform(-1., 1.) * config["azimuth_jitter_deg"])
        height = config["height_m"] + rng.uniform(-1., 1.) * config["height_jitter_m"]
        target = np.asarray(config["target"], dtype=np.float64) + \
            rng.uniform(-1., 1., size=3) * config["target_jitter_m"]
        position = [target[0] + config["distance_m"] * math.cos(azimuth), height,
                    target[2] + config["distance_m"] * math.sin(azimuth)]
        cameras.append(look_at_camera(position, target, name=name, **intrinsics))
    return tuple(cameras)


def project_points(camera, points):
    """Project world points `(..., 3)` without depth checks

    Returns
    -------
    uv : torch.Tensor
        Pixel coordinates `(..., 2)`.
    depth : torch.Tensor
        Depth along the optical axis `(...)`, non-positive values mark points behind the camera.
    """
    points = torch.as_tensor(points, dtype=torch.float64)
    cam = camera.to_camera(points)
    depth = cam[..., 2]
    uv = camera.focal_px * cam[..., :2] / depth[..., None] + camera.principal_point
    return uv, depth


def project(camera, point):
    """Pinhole projection of world points `(..., 3)` to pixels `(..., 2)`

    Raises `BehindCameraError` if any point has non-positive depth.
    """
    uv, depth = project_points(camera, point)
    if (depth <= 0).any():
        raise BehindCameraError("point with depth {:.6g} m is not in front of camera {}".format(
            depth.min().item(), camera.name))
    return uv


def _dlt(cam_a, cam_b, uv_a, uv_b):
    rows = []
    for camera, uv in ((cam_a, uv_a), (cam_b, uv_b)):
        P = camera.projection_matrix
        rows.append(uv[..., 0, None] * P[2] - P[0])
        rows.append(uv[..., 1, None] * P[2] - P[1])
    A = torch.stack(rows, dim=-2)
    A = A / A.norm(dim=-1, keepdim=True)
    _, _, Vh = torch.linalg.svd(A)
    h = Vh[..., -1, :]
    return h[..., :3] / h[..., 3:]


def _gauss_newton_step(cameras, observations, points):
    residuals, jacobians = [], []
    for camera, uv in zip(cameras, observations):
        cam = camera.to_camera(points)
        x, y, z = cam[..., 0:1], cam[..., 1:2], cam[..., 2:3]
        f = camera.focal_px
        R = camera.rotation
        du = f * (R[0] / z - x * R[2] / z ** 2)
        dv = f * (R[1] / z - y * R[2] / z ** 2)
        residuals.append(f * cam[..., :2] / z + camera.principal_point - uv)
        jacobians.append(torch.stack([du, dv], dim=-2))
    r = torch.cat(residuals, dim=-1)
    J = torch.cat(jacobians, dim=-2)
    JtJ = J.transpose(-1, -2) @ J
    Jtr = (J.transpose(-1, -2) @ r[..., None])[..., 0]
    return points - torch.linalg.solve(JtJ, Jtr)


def triangulate_points(cam_a, cam_b, uv_a, uv_b):
    """Batched two-view triangulation, see `triangulate_two_view`

    Returns
    -------
    points : torch.Tensor
        World points `(..., 3)`.
    residuals : torch.Tensor
        Mean reprojection error `(...)` over the two views, in pixels.
    """
    uv_a = torch.as_tensor(uv_a, dtype=torch.float64)
    uv_b = torch.as_tensor(uv_b, dtype=torch.float64)
    if uv_a.shape != uv_b.shape or uv_a.size(-1) != 2:
        raise DimensionError("observations must have matching shapes (..., 2), got {} and {}".format(
            tuple(uv_a.shape), tuple(uv_b.shape)))
    if not (torch.isfinite(uv_a).all() and torch.isfinite(uv_b).all()):
        raise ValueError("observations must be finite")

    if (cam_a.center - cam_b.center).norm() < _PARALLEL_TOL:
        raise DegenerateGeometryError("camera centers coincide")

    # Viewing rays in world coordinates
    ray_a = _ray_directions(cam_a, uv_a)
    ray_b = _ray_directions(cam_b, uv_b)
    sin_angle = torch.cross(ray_a, ray_b, dim=-1).norm(dim=-1)
    if (sin_angle < _PARALLEL_TOL).any():
        raise DegenerateGeometryError("viewing rays are parallel")

    points = _dlt(cam_a, cam_b, uv_a, uv_b)
    points = _gauss_newton_step((cam_a, cam_b), (uv_a, uv_b), points)

    error_a = (project_points(cam_a, points)[0] - uv_a).norm(dim=-1)
    error_b = (project_points(cam_b, points)[0] - uv_b).norm(dim=-1)
    return points, (error_a + error_b) / 2


def _ray_directions(camera, uv):
    homogeneous = torch.cat([uv, torch.ones_like(uv[..., :1])], dim=-1)
    rays = homogeneous @ torch.linalg.inv(camera.intrinsics).t() @ camera.rotation
    return rays / rays.norm(dim=-1, keepdim=True)


def triangulate_two_view(cam_a, cam_b, uv_a, uv_b):
    """Triangulate one point seen by two cameras

    Linear (DLT) solution of the stacked `4 x 4` system followed by one Gauss-Newton refinement of the reprojection
    error.

    Parameters
    ----------
    cam_a, cam_b : Camera
        The two views, with distinct centers.
    uv_a, uv_b : torch.Tensor
        Pixel observations `(2,)` in each view.

    Returns
    -------
    point : torch.Tensor
        World point `(3,)` in meters.
    residual : float
        Mean reprojection error in pixels.
    """
    points, residuals = triangulate_points(cam_a, cam_b, uv_a, uv_b)
    return points, residuals.item()


def render_silhouette(camera, points, mode="bbox", radius_px=12):
    """Rasterise the projection of a point cloud into a binary mask `(H, W)`

    `mode="bbox"` fills the bounding box of the projected points, `mode="disc"` draws a disc around each of them.
    Points behind the camera are ignored.
    """
    uv, depth = project_points(camera, torch.as_tensor(points, dtype=torch.float64).view(-1, 3))
    uv = uv[depth > 0]

    image = Image.new("1", (camera.image_width_px, camera.image_height_px), 0)
    draw = ImageDraw.Draw(image)
    if uv.size(0) > 0:
        if mode == "bbox":
            lo = uv.min(dim=0)[0].tolist()
            hi = uv.max(dim=0)[0].tolist()
            draw.rectangle([lo[0], lo[1], hi[0], hi[1]], fill=1)
        elif mode == "disc":
            for u, v in uv.tolist():
                draw.ellipse([u - radius_px, v - radius_px, u + radius_px, v + radius_px], fill=1)
        else:
            raise ValueError("Unknown silhouette mode {}".format(mode))
    return torch.from_numpy(np.array(image, dtype=bool))


def _inside(camera, mask, points):
    uv, depth = project_points(camera, points)
    col = torch.floor(uv[:, 0])
    row = torch.floor(uv[:, 1])
    valid = (depth > 0) & (col >= 0) & (row >= 0) & (col < camera.image_width_px) & (row < camera.image_height_px)
    inside = torch.zeros_like(valid)
    inside[valid] = mask[row[valid].long(), col[valid].long()]
    return inside


def sample_candidate_points(cam_a, cam_b, silhouette_a, silhouette_b, n, bounds, seed, budget=None):
    """Draw world points whose projections fall inside both silhouettes

    Points are drawn uniformly inside the axis-aligned box `bounds = (low, high)` and rejected unless they project
    inside both binary masks. Sampling stops with `ExhaustionError` when the acceptance rate drops below 1e-4 or the
    draw budget (default `n / 1e-4`) runs out.

    Returns
    -------
    points : torch.Tensor
        Exactly `n` world points `(n, 3)`, identical for identical seeds.
    """
    if n <= 0:
        raise ValueError("number of points must be positive, got {}".format(n))
    masks = []
    for camera, mask in ((cam_a, silhouette_a), (cam_b, silhouette_b)):
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if tuple(mask.shape) != (camera.image_height_px, camera.image_width_px):
            raise DimensionError("silhouette of shape {} does not match the {}x{} image of camera {}".format(
                tuple(mask.shape), camera.image_width_px, camera.image_height_px, camera.name))
        masks.append(mask)

    low = torch.as_tensor(bounds[0], dtype=torch.float64)
    high = torch.as_tensor(bounds[1], dtype=torch.float64)
    if not (high > low).all():
        raise ValueError("sampling bounds must have high > low on every axis")

    budget = int(math.ceil(n / _MIN_ACCEPTANCE)) if budget is None else int(budget)
    batch = max(4 * n, 4096)
    generator = torch.Generator().manual_seed(int(seed))

    accepted, count, drawn = [], 0, 0
    while count < n:
        candidates = low + (high - low) * torch.rand(batch, 3, generator=generator, dtype=torch.float64)
        keep = _inside(cam_a, masks[0], candidates) & _inside(cam_b, masks[1], candidates)
        accepted.append(candidates[keep])
        count += int(keep.sum())
        drawn += batch

        rate = count / drawn
        if count < n and (drawn >= budget or (drawn >= _MIN_DRAWS and rate < _MIN_ACCEPTANCE)):
            raise ExhaustionError("accepted {} of {} candidate points (rate {:.2e}), needed {}".format(
                count, drawn, rate, n))

    logger.debug("sampled %d points, acceptance rate %.4f", n, count / drawn)
    return torch.cat(accepted, dim=0)[:n]


class ProcrustesResult(NamedTuple):
    rotation: torch.Tensor
    translation: torch.Tensor
    scale: torch.Tensor
    aligned: torch.Tensor


def procrustes_align(source, target, with_scale=True):
    """Closed-form similarity alignment of `source` onto `target`

    Finds `scale * rotation @ p + translation` minimising the squared distance to the target points (Kabsch-Umeyama
    on the centered cross-covariance), reflections excluded. Leading batch dimensions are aligned independently.

    Parameters
    ----------
    source : torch.Tensor
        Points `(..., P, 3)`, `P >= 3`.
    target : torch.Tensor
        Points `(..., P, 3)`.
    with_scale : bool
        If `False` the scale is fixed to 1.

    Returns
    -------
    result : ProcrustesResult
        `rotation (..., 3, 3)`, `translation (..., 3)`, `scale (...)` and the aligned source `(..., P, 3)`.
    """
    source = torch.as_tensor(source, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    if source.shape != target.shape or source.dim() < 2 or source.size(-1) != 3:
        raise DimensionError("point sets must have matching shapes (..., P, 3), got {} and {}".format(
            tuple(source.shape), tuple(target.shape)))
    if source.size(-2) < 3:
        raise DimensionError("at least 3 points are needed, got {}".format(source.size(-2)))

    mu_s = source.mean(dim=-2, keepdim=True)
    mu_t = target.mean(dim=-2, keepdim=True)
    s0 = source - mu_s
    t0 = target - mu_t
    var_s = (s0 ** 2).sum(dim=-1).mean(dim=-1)
    if (var_s <= 1e-24).any():
        raise DegenerateGeometryError("source points are all coincident")

    H = t0.transpose(-1, -2) @ s0 / source.size(-2)
    U, D, Vh = torch.linalg.svd(H)
    d = torch.where(torch.det(U) * torch.det(Vh) < 0, -torch.ones_like(var_s), torch.ones_like(var_s))
    S = torch.ones_like(D)
    S[..., 2] = d
    rotation = U @ torch.diag_embed(S) @ Vh

    if with_scale:
        scale = (D * S).sum(dim=-1) / var_s
    else:
        scale = torch.ones_like(var_s)
    translation = mu_t[..., 0, :] - scale[..., None] * (rotation @ mu_s[..., 0, :, None])[..., 0]
    aligned = scale[..., None, None] * source @ rotation.transpose(-1, -2) + translation[..., None, :]
    return ProcrustesResult(rotation, translation, scale, aligned)
