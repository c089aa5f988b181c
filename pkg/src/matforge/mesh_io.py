"""Mesh and texture I/O: OBJ parsing, PNG/EXR texture loading, bundle export."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    ChannelMismatch,
    EmptyMesh,
    IoFailure,
    MalformedRecord,
    MissingUVs,
    ResolutionMismatch,
    UnsupportedFormat,
)

ROLE_CHANNELS = {
    "diffuse": 3,
    "albedo": 3,
    "normal": 3,
    "roughness": 1,
    "metalness": 1,
    "height": 1,
    "specular": 1,
}
ROLE_ALIASES = {"basecolor": "albedo", "base_color": "albedo", "metallic": "metalness"}
SVBRDF_ROLES = ("normal", "roughness", "metalness", "height", "specular")


def canonical_role(role: str) -> str:
    role = ROLE_ALIASES.get(role.lower(), role.lower())
    if role not in ROLE_CHANNELS:
        raise ValueError(f"unknown texture role {role!r}")
    return role


def wrap_uv(uv: np.ndarray) -> np.ndarray:
    """Wrap coordinates outside [0, 1] with repeat addressing; in-range values are kept."""
    uv = np.asarray(uv, dtype=np.float64)
    out = uv.copy()
    outside = (uv < 0.0) | (uv > 1.0)
    out[outside] = np.mod(uv[outside], 1.0)
    return out


@dataclass
class Mesh:
    """Indexed triangle mesh with per-corner UV indices.

    ``faces`` has shape (F, 3, 2): for each triangle corner the position index
    and the uv index. ``normal_faces`` (F, 3) indexes ``normals`` when present.
    """

    positions: np.ndarray
    uvs: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    normal_faces: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.uvs = wrap_uv(np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2))
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3, 2)
        if len(self.faces) == 0:
            raise EmptyMesh("mesh has no faces")
        if self.faces.min() < 0:
            raise ValueError("negative face index")
        if self.faces[..., 0].max() >= len(self.positions):
            raise ValueError("position index out of range")
        if self.faces[..., 1].max() >= len(self.uvs):
            raise ValueError("uv index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            self.normal_faces = np.asarray(self.normal_faces, dtype=np.int64).reshape(-1, 3)
            if self.normal_faces.shape[0] != self.faces.shape[0]:
                raise ValueError("normal_faces must match faces")

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_positions(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.positions[self.faces[..., 0]]

    def face_uvs(self) -> np.ndarray:
        """(F, 3, 2) corner UVs."""
        return self.uvs[self.faces[..., 1]]

    def face_normals(self) -> np.ndarray:
        p = self.face_positions()
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Center of the AABB and the radius enclosing every vertex."""
        used = self.positions[np.unique(self.faces[..., 0])]
        center = 0.5 * (used.min(axis=0) + used.max(axis=0))
        radius = float(np.linalg.norm(used - center, axis=1).max())
        return center, radius


@dataclass
class TextureMap:
    """A texture image with values in [0, 1], stored as (height, width, channels)."""

    data: np.ndarray
    role: str = "diffuse"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.role = canonical_role(self.role)
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"texture data must be (H, W, C), got {data.shape}")
        want = ROLE_CHANNELS[self.role]
        if data.shape[2] != want:
            raise ChannelMismatch(
                f"role {self.role!r} needs {want} channel(s), got {data.shape[2]}"
            )
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def __eq__(self, other):
        if not isinstance(other, TextureMap):
            return NotImplemented
        return self.role == other.role and np.array_equal(self.data, other.data)


# --------------------------------------------------------------------------- OBJ


def _resolve_index(token: str, count: int, lineno: int, line: str) -> int:
    try:
        idx = int(token)
    except ValueError:
        raise MalformedRecord(lineno, line, f"bad index {token!r}") from None
    if idx > 0:
        idx -= 1
    elif idx < 0:
        idx = count + idx
    else:
        raise MalformedRecord(lineno, line, "index 0 is not valid in OBJ")
    if not 0 <= idx < count:
        raise MalformedRecord(lineno, line, f"index {token} out of range")
    return idx


def parse_obj(data: bytes | str) -> Mesh:
    """Parse Wavefront OBJ text into a triangulated :class:`Mesh`.

    Polygons are fan-triangulated from their first corner. Every face corner
    must reference a texture coordinate.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    positions, uvs, normals = [], [], []
    faces, normal_faces = [], []
    any_missing_normal = False
    for lineno, raw in enumerate(data.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key, args = parts[0], parts[1:]
        try:
            if key == "v":
                if len(args) < 3:
                    raise ValueError
                positions.append([float(a) for a in args[:3]])
            elif key == "vt":
                if len(args) < 1:
                    raise ValueError
                u = float(args[0])
                v = float(args[1]) if len(args) > 1 else 0.0
                uvs.append([u, v])
            elif key == "vn":
                if len(args) < 3:
                    raise ValueError
                normals.append([float(a) for a in args[:3]])
        except ValueError:
            raise MalformedRecord(lineno, raw) from None
        if key != "f":
            continue
        if len(args) < 3:
            raise MalformedRecord(lineno, raw, "face needs at least 3 corners")
        corners = []
        for corner in args:
            fields = corner.split("/")
            if len(fields) < 2 or fields[1] == "":
                raise MissingUVs(f"line {lineno}: face corner {corner!r} has no uv index")
            p = _resolve_index(fields[0], len(positions), lineno, raw)
            t = _resolve_index(fields[1], len(uvs), lineno, raw)
            n = -1
            if len(fields) > 2 and fields[2] != "":
                n = _resolve_index(fields[2], len(normals), lineno, raw)
            corners.append((p, t, n))
        for i in range(1, len(corners) - 1):
            tri = (corners[0], corners[i], corners[i + 1])
            faces.append([(c[0], c[1]) for c in tri])
            nf = [c[2] for c in tri]
            any_missing_normal |= min(nf) < 0
            normal_faces.append(nf)
    if not faces:
        raise EmptyMesh("OBJ contains no faces")
    use_normals = bool(normals) and not any_missing_normal
    return Mesh(
        positions=np.array(positions, dtype=np.float64),
        uvs=np.array(uvs, dtype=np.float64),
        faces=np.array(faces, dtype=np.int64),
        normals=np.array(normals, dtype=np.float64) if use_normals else None,
        normal_faces=np.array(normal_faces, dtype=np.int64) if use_normals else None,
    )


def load_obj(path) -> Mesh:
    return parse_obj(Path(path).read_bytes())


def serialize_obj(mesh: Mesh, mtllib: str | None = None, material: str | None = None) -> str:
    """Write ``mesh`` as OBJ text. Floats use ``repr`` so a re-parse is exact."""
    out = ["# matforge"]
    if mtllib:
        out.append(f"mtllib {mtllib}")
    out.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.positions.tolist())
    out.extend(f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist())
    if mesh.normals is not None:
        out.extend(f"vn {x!r} {y!r} {z!r}" for x, y, z in mesh.normals.tolist())
    if material:
        out.append(f"usemtl {material}")
    for fi, tri in enumerate(mesh.faces.tolist()):
        if mesh.normals is not None:
            nf = mesh.normal_faces[fi]
            corners = [f"{p + 1}/{t + 1}/{n + 1}" for (p, t), n in zip(tri, nf)]
        else:
            corners = [f"{p + 1}/{t + 1}" for p, t in tri]
        out.append("f " + " ".join(corners))
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------------- textures


def _read_exr(path: Path) -> np.ndarray:
    try:
        import OpenEXR
    except ImportError as exc:  # pragma: no cover - declared dependency
        raise UnsupportedFormat("reading EXR needs the OpenEXR package") from exc
    try:
        with OpenEXR.File(str(path)) as f:
            chans = {k: np.asarray(v.pixels) for k, v in f.channels().items()}
    except Exception as exc:
        raise UnsupportedFormat(f"{path}: unreadable EXR ({exc})") from exc
    if "RGB" in chans:
        arr = chans["RGB"]
    elif all(c in chans for c in "RGB"):
        arr = np.stack([chans[c] for c in "RGB"], axis=-1)
    elif len(chans) == 1:
        arr = next(iter(chans.values()))
    elif "Y" in chans:
        arr = chans["Y"]
    else:
        raise UnsupportedFormat(f"{path}: unsupported EXR channel layout {sorted(chans)}")
    return np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)


def read_image(path) -> np.ndarray:
    """Read a PNG or EXR file as float64 (H, W) or (H, W, 3) in [0, 1], RGB order."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".exr":
        return _read_exr(path)
    if suffix != ".png":
        raise UnsupportedFormat(f"{path}: only PNG and EXR are supported")
    if not path.exists():
        raise IoFailure(f"{path}: no such file")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise UnsupportedFormat(f"{path}: unreadable PNG")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise UnsupportedFormat(f"{path}: unsupported sample type {img.dtype}")
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[:, :, :3]
        if img.shape[2] == 2:
            img = img[:, :, 0]
        else:
            img = img[:, :, ::-1]
    return img.astype(np.float64) / scale


def load_texture(path, role: str) -> TextureMap:
    """Load an image file as a :class:`TextureMap` of the given role.

    Single-channel files are broadcast to RGB for the diffuse role only.
    """
    role = canonical_role(role)
    arr = read_image(path)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    want = ROLE_CHANNELS[role]
    have = 1 if arr.ndim == 2 else arr.shape[2]
    if want == 3 and have == 1:
        if role != "diffuse":
            raise ChannelMismatch(f"{path}: role {role!r} needs RGB, file is single-channel")
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif want == 1 and have != 1:
        raise ChannelMismatch(f"{path}: role {role!r} needs one channel, file has {have}")
    return TextureMap(arr, role=role, meta={"path": str(path)})


def to_uint(data: np.ndarray, deep: bool = False) -> np.ndarray:
    scale, dtype = (65535.0, np.uint16) if deep else (255.0, np.uint8)
    return np.round(np.clip(data, 0.0, 1.0) * scale).astype(dtype)


def write_image(path, data: np.ndarray, deep: bool = False) -> None:
    """Write a float [0, 1] image (H, W), (H, W, 1) or (H, W, 3) as PNG or EXR."""
    path = Path(path)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix.lower() == ".exr":
            import OpenEXR

            key = "RGB" if data.ndim == 3 else "Y"
            header = {"type": OpenEXR.scanlineimage, "compression": OpenEXR.ZIP_COMPRESSION}
            with OpenEXR.File(header, {key: np.ascontiguousarray(data, dtype=np.float32)}) as f:
                f.write(str(path))
            return
        img = to_uint(data, deep)
        if img.ndim == 3:
            img = np.ascontiguousarray(img[:, :, ::-1])
        if not cv2.imwrite(str(path), img):
            raise IoFailure(f"{path}: write failed")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def save_texture(tex: TextureMap, path, deep: bool = False) -> None:
    write_image(path, tex.data, deep=deep)


# ------------------------------------------------------------------------- export

MTL_KEYS = {
    "diffuse": "map_Kd",
    "albedo": "map_Kd",
    "normal": "norm",
    "roughness": "map_Pr",
    "metalness": "map_Pm",
    "height": "disp",
    "specular": "map_Ks",
}


def export_bundle(mesh: Mesh, maps, out_dir, stem: str = "mesh", deep: bool = False,
                  diffuse: TextureMap | None = None) -> dict:
    """Write the mesh, one PNG per map role, an MTL file and a JSON manifest.

    ``maps`` is a role -> TextureMap mapping or any object with a ``maps``
    attribute holding one. Returns the manifest dict.
    """
    if not isinstance(maps, Mapping):
        maps = maps.maps if maps is not None else {}
    maps = {canonical_role(r): t for r, t in maps.items()}
    shapes = {t.shape for t in maps.values()}
    if diffuse is not None:
        shapes.add(diffuse.shape)
    if len(shapes) > 1:
        raise ResolutionMismatch(f"maps have differing resolutions: {sorted(shapes)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    files = {}
    if diffuse is not None:
        files["diffuse"] = f"{stem}_diffuse.png"
        save_texture(diffuse, out_dir / files["diffuse"], deep=deep)
    for role in sorted(maps, key=lambda r: list(ROLE_CHANNELS).index(r)):
        files[role] = f"{stem}_{role}.png"
        save_texture(maps[role], out_dir / files[role], deep=deep)

    mtl_lines = [f"newmtl {stem}", "Kd 1.0 1.0 1.0"]
    mtl_lines += [f"{MTL_KEYS[role]} {fname}" for role, fname in files.items()]
    obj_name, mtl_name = f"{stem}.obj", f"{stem}.mtl"
    manifest = {"mesh": obj_name, "mtl": mtl_name, "maps": dict(files)}
    try:
        (out_dir / mtl_name).write_text("\n".join(mtl_lines) + "\n")
        (out_dir / obj_name).write_text(serialize_obj(mesh, mtllib=mtl_name, material=stem))
        (out_dir / f"{stem}.manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest

