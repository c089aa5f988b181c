"""Software rasterizer producing unlit multi-view renders and G-buffers.

Conventions: view space has +z pointing from the eye toward the target, so
``depth`` is the positive distance along the viewing axis. Pixel (row, col)
has its center at continuous screen coordinate (col + 0.5, row + 0.5).
Texture row 0 is the top of the image, i.e. v = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DegenerateMesh, MissingChannel
from .mesh_io import Mesh, TextureMap

BACKGROUND_FACE = -1
BACKGROUND_COLOR = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class Camera:
    eye: tuple
    target: tuple
    up: tuple = (0.0, 1.0, 0.0)
    fov: float = math.radians(60.0)
    width: int = 512
    height: int = 512
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if not self.near < self.far or self.near <= 0:
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        fwd = np.subtract(self.target, self.eye)
        if np.linalg.norm(fwd) == 0:
            raise ValueError("eye and target coincide")
        cross = np.cross(fwd / np.linalg.norm(fwd), np.asarray(self.up, dtype=float))
        if np.linalg.norm(cross) < 1e-9:
            raise ValueError("up vector is parallel to the view direction")

    def basis(self) -> np.ndarray:
        """Rows are right, up, forward in world coordinates."""
        fwd = np.subtract(self.target, self.eye).astype(np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, fwd])

    def to_view(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.eye)) @ self.basis().T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (screen xy in pixels, view depth)."""
        view = self.to_view(points)
        z = view[..., 2]
        t = math.tan(self.fov / 2.0)
        aspect = self.width / self.height
        with np.errstate(divide="ignore", invalid="ignore"):
            ndc_x = view[..., 0] / (z * t * aspect)
            ndc_y = view[..., 1] / (z * t)
        sx = (ndc_x + 1.0) * 0.5 * self.width
        sy = (1.0 - ndc_y) * 0.5 * self.height
        return np.stack([sx, sy], axis=-1), z

    def to_dict(self) -> dict:
        return {
            "eye": list(map(float, self.eye)),
            "target": list(map(float, self.target)),
            "up": list(map(float, self.up)),
            "fov": self.fov,
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            eye=tuple(d["eye"]), target=tuple(d["target"]), up=tuple(d["up"]), fov=d["fov"],
            width=d["width"], height=d["height"], near=d["near"], far=d["far"],
        )


@dataclass
class GBuffer:
    face_id: np.ndarray  # (H, W) int32, BACKGROUND_FACE where empty
    bary: np.ndarray  # (H, W, 3)
    uv: np.ndarray  # (H, W, 2)
    depth: np.ndarray  # (H, W), inf where empty

    @property
    def covered(self) -> np.ndarray:
        return self.face_id != BACKGROUND_FACE

    @property
    def shape(self) -> tuple[int, int]:
        return self.face_id.shape

    def to_npz(self, path) -> None:
        np.savez_compressed(path, face_id=self.face_id, bary=self.bary, uv=self.uv,
                            depth=self.depth)

    @classmethod
    def from_npz(cls, path) -> "GBuffer":
        with np.load(path) as z:
            return cls(z["face_id"], z["bary"], z["uv"], z["depth"])


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    gbuffer: GBuffer
    camera: Camera

    @property
    def foreground(self) -> np.ndarray:
        return self.gbuffer.covered


def _normalize_size(image_size) -> tuple[int, int]:
    if isinstance(image_size, (int, np.integer)):
        return int(image_size), int(image_size)
    w, h = image_size
    return int(w), int(h)


def make_camera_ring(n_views: int, mesh: Mesh, image_size=512,
                     elevation: float = math.radians(20.0), fov: float = math.radians(60.0),
                     fill: float = 0.8) -> list[Camera]:
    """Cameras on a circle around the bounding-sphere center, azimuths 0, 360/n, ...

    The camera distance makes the bounding sphere subtend ``fill`` of the
    vertical field of view.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    center, radius = mesh.bounding_sphere()
    if radius <= 0:
        raise DegenerateMesh("bounding sphere radius is zero")
    width, height = _normalize_size(image_size)
    dist = radius / math.sin(fill * fov / 2.0)
    cams = []
    for k in range(n_views):
        az = 2.0 * math.pi * k / n_views
        cams.append(_orbit_camera(center, dist, radius, az, elevation, fov, width, height))
    return cams


def top_down_camera(mesh: Mesh, image_size=512, fov: float = math.radians(60.0),
                    fill: float = 0.8) -> Camera:
    center, radius = mesh.bounding_sphere()
    if radius <= 0:
        raise DegenerateMesh("bounding sphere radius is zero")
    width, height = _normalize_size(image_size)
    dist = radius / math.sin(fill * fov / 2.0)
    return _orbit_camera(center, dist, radius, 0.0, math.pi / 2, fov, width, height)


def _orbit_camera(center, dist, radius, az, el, fov, width, height) -> Camera:
    direction = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    eye = center + dist * direction
    up = (0.0, 1.0, 0.0) if abs(math.cos(el)) > 1e-6 else (0.0, 0.0, -1.0)
    near = max((dist - radius) * 0.5, 1e-4)
    far = (dist + radius) * 2.0
    return Camera(eye=tuple(map(float, eye)), target=tuple(map(float, center)), up=up, fov=fov,
                  width=width, height=height, near=near, far=far)


@numba.njit(cache=True)
def _raster_kernel(scr, zs, fuv, width, height, near, far, face_id, bary, depth, uv):
    n_faces = scr.shape[0]
    for f in range(n_faces):
        z0, z1, z2 = zs[f, 0], zs[f, 1], zs[f, 2]
        if z0 < near or z1 < near or z2 < near:
            continue
        x0, y0 = scr[f, 0, 0], scr[f, 0, 1]
        x1, y1 = scr[f, 1, 0], scr[f, 1, 1]
        x2, y2 = scr[f, 2, 0], scr[f, 2, 1]
        # counter-clockwise front faces appear clockwise with y pointing down
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area >= 0.0:
            continue
        xmin = max(int(math.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(math.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(math.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(math.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        inv_area = 1.0 / area
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                l0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) * inv_area
                l1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) * inv_area
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                w0 = l0 / z0
                w1 = l1 / z1
                w2 = l2 / z2
                s = w0 + w1 + w2
                z = 1.0 / s
                if z < near or z > far or z >= depth[py, px]:
                    continue
                b0 = w0 * z
                b1 = w1 * z
                b2 = 1.0 - b0 - b1
                depth[py, px] = z
                face_id[py, px] = f
                bary[py, px, 0] = b0
                bary[py, px, 1] = b1
                bary[py, px, 2] = b2
                uv[py, px, 0] = b0 * fuv[f, 0, 0] + b1 * fuv[f, 1, 0] + b2 * fuv[f, 2, 0]
                uv[py, px, 1] = b0 * fuv[f, 0, 1] + b1 * fuv[f, 1, 1] + b2 * fuv[f, 2, 1]


def rasterize_gbuffer(mesh: Mesh, cam: Camera) -> GBuffer:
    """Z-buffered, back-face culled, perspective-correct G-buffer of ``mesh``."""
    scr, z = cam.project(mesh.face_positions())
    h, w = cam.height, cam.width
    face_id = np.full((h, w), BACKGROUND_FACE, dtype=np.int32)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    uv = np.zeros((h, w, 2))
    _raster_kernel(np.ascontiguousarray(scr), np.ascontiguousarray(z),
                   np.ascontiguousarray(mesh.face_uvs()), w, h, cam.near, cam.far,
                   face_id, bary, depth, uv)
    return GBuffer(face_id, bary, uv, depth)


def uv_to_texel(uv: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Map UV coordinates to (row, col) texel indices; v = 1 is row 0."""
    uv = np.asarray(uv)
    col = np.clip(np.floor(uv[..., 0] * width).astype(np.int64), 0, width - 1)
    row = np.clip(np.floor((1.0 - uv[..., 1]) * height).astype(np.int64), 0, height - 1)
    return row, col


def sample_nearest(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = tex.shape[:2]
    row, col = uv_to_texel(uv, w, h)
    return tex[row, col]


def rasterize(mesh: Mesh, diffuse: TextureMap, cam: Camera) -> RenderOutput:
    """Unlit render: each covered pixel shows the diffuse texel under its UV."""
    if diffuse.role != "diffuse":
        raise ValueError("rasterize expects a diffuse texture")
    gb = rasterize_gbuffer(mesh, cam)
    color = np.empty((cam.height, cam.width, 3))
    color[:] = BACKGROUND_COLOR
    cov = gb.covered
    color[cov] = sample_nearest(diffuse.data, gb.uv[cov])
    return RenderOutput(color=color, gbuffer=gb, camera=cam)


# ----------------------------------------------------------------- preview shading


def _tangent_frames(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-face tangent and bitangent vectors derived from UV gradients."""
    p = mesh.face_positions()
    t = mesh.face_uvs()
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    d1, d2 = t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    det = np.where(np.abs(det) < 1e-12, 1.0, det)
    tan = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) / det[:, None]
    bit = (e2 * d1[:, 0:1] - e1 * d2[:, 0:1]) / det[:, None]
    return tan, bit


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def shade_preview(mesh: Mesh, svbrdf, cam: Camera, light_dir,
                  diffuse: TextureMap | None = None, light_intensity: float = 3.0,
                  ambient: float = 0.03) -> np.ndarray:
    """Cook-Torrance preview under one directional light.

    GGX distribution, Smith/Schlick-GGX geometry and Schlick Fresnel with
    F0 = mix(0.04, albedo, metalness). ``light_dir`` points toward the light.
    Returns linear radiance (H, W, 3), not clipped; background is zero.
    """
    maps = getattr(svbrdf, "maps", svbrdf)
    for role in ("normal", "roughness", "metalness"):
        if role not in maps:
            raise MissingChannel(f"preview needs a {role} map")
    if "albedo" in maps:
        albedo_map = maps["albedo"].data
    elif diffuse is not None:
        albedo_map = diffuse.data
    else:
        albedo_map = np.full((1, 1, 3), 0.5)

    gb = rasterize_gbuffer(mesh, cam)
    cov = gb.covered
    out = np.zeros((cam.height, cam.width, 3))
    if not cov.any():
        return out
    fid = gb.face_id[cov]
    b = gb.bary[cov]
    uv = gb.uv[cov]
    fp = mesh.face_positions()[fid]
    pos = np.einsum("nk,nkd->nd", b, fp)
    if mesh.normals is not None:
        vn = mesh.normals[mesh.normal_faces[fid]]
        geo_n = _unit(np.einsum("nk,nkd->nd", b, vn))
    else:
        geo_n = mesh.face_normals()[fid]
    tan, bit = _tangent_frames(mesh)
    t = _unit(tan[fid] - geo_n * np.sum(tan[fid] * geo_n, axis=1, keepdims=True))
    bt = _unit(np.cross(geo_n, t)) * np.sign(np.sum(np.cross(geo_n, t) * bit[fid], axis=1,
                                                    keepdims=True) + 1e-30)
    nt = sample_nearest(maps["normal"].data, uv) * 2.0 - 1.0
    n = _unit(nt[:, 0:1] * t + nt[:, 1:2] * bt + nt[:, 2:3] * geo_n)

    albedo = sample_nearest(albedo_map, uv)
    rough = sample_nearest(maps["roughness"].data, uv)[:, 0]
    metal = sample_nearest(maps["metalness"].data, uv)[:, 0]

    l_dir = _unit(np.asarray(light_dir, dtype=np.float64))
    v = _unit(np.asarray(cam.eye) - pos)
    h = _unit(v + l_dir)
    n_l = np.clip(n @ l_dir, 0.0, None)
    n_v = np.clip(np.sum(n * v, axis=1), 1e-4, None)
    n_h = np.clip(np.sum(n * h, axis=1), 0.0, None)
    v_h = np.clip(np.sum(v * h, axis=1), 0.0, None)

    alpha = np.clip(rough, 1e-3, 1.0) ** 2
    a2 = alpha ** 2
    d = a2 / (math.pi * ((n_h ** 2) * (a2 - 1.0) + 1.0) ** 2)
    k = alpha / 2.0
    g = (n_v / (n_v * (1 - k) + k)) * (n_l / (n_l * (1 - k) + k))
    f0 = 0.04 * (1.0 - metal[:, None]) + albedo * metal[:, None]
    fres = f0 + (1.0 - f0) * ((1.0 - v_h) ** 5)[:, None]
    spec = (d * g)[:, None] * fres / (4.0 * n_v * np.clip(n_l, 1e-4, None))[:, None]
    kd = (1.0 - fres) * (1.0 - metal[:, None])
    radiance = (kd * albedo / math.pi + spec) * (light_intensity * n_l)[:, None]
    out[cov] = radiance + ambient * albedo
    return out


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    return rgb[..., 0] * 0.2126 + rgb[..., 1] * 0.7152 + rgb[..., 2] * 0.0722
