"""Procedural fixtures: a UV sphere, an atlas-mapped cube, their diffuse
textures, and a 12-material toy library written in the on-disk library format.

Everything here is seeded and bit-reproducible.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .mesh_io import Mesh, TextureMap, serialize_obj, write_image


def _orient_outward(positions, faces, center=None):
    """Reorder triangle corners so geometric normals point away from ``center``."""
    if center is None:
        center = positions.mean(axis=0)
    p = positions[faces[..., 0]]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    inward = np.sum(n * (p.mean(axis=1) - center), axis=1) < 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, ::-1]
    return faces


def uv_sphere(n_lat: int = 32, n_lon: int = 64, radius: float = 1.0) -> Mesh:
    """Latitude/longitude sphere. u = 0.5 faces +z; the UV seam sits at -z."""
    positions, uvs = [], []
    for i in range(n_lat + 1):
        theta = math.pi * i / n_lat
        for j in range(n_lon + 1):
            phi = 2.0 * math.pi * j / n_lon + math.pi
            positions.append([radius * math.sin(theta) * math.sin(phi), radius * math.cos(theta),
                              radius * math.sin(theta) * math.cos(phi)])
            uvs.append([j / n_lon, 1.0 - i / n_lat])

    def vid(i, j):
        return i * (n_lon + 1) + j

    faces = []
    for i in range(n_lat):
        for j in range(n_lon):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if i != 0:
                faces.append([(a, a), (b, b), (d, d)])
            if i != n_lat - 1:
                faces.append([(b, b), (c, c), (d, d)])
    positions = np.array(positions)
    faces = _orient_outward(positions, np.array(faces), center=np.zeros(3))
    return Mesh(positions=positions, uvs=np.array(uvs), faces=faces)


# atlas cell (col, row) of each cube face; row 0 is the top of the texture
_CUBE_FACES = [
    # axis, sign, (u axis, v axis)
    (0, +1, (2, 1)),
    (0, -1, (2, 1)),
    (1, +1, (0, 2)),
    (1, -1, (0, 2)),
    (2, +1, (0, 1)),
    (2, -1, (0, 1)),
]


def cube(size: float = 1.0, pad: float = 0.0) -> Mesh:
    """Axis-aligned cube with its six faces in a 3x2 UV atlas."""
    h = size / 2.0
    positions, uvs, faces = [], [], []
    for k, (axis, sign, (ua, va)) in enumerate(_CUBE_FACES):
        col, row = k % 3, k // 3
        u0, u1 = col / 3.0 + pad, (col + 1) / 3.0 - pad
        v1, v0 = 1.0 - row / 2.0 - pad, 1.0 - (row + 1) / 2.0 + pad
        base = len(positions)
        for su, sv in [(-1, -1), (1, -1), (1, 1), (-1, 1)]:
            p = [0.0, 0.0, 0.0]
            p[axis] = sign * h
            p[ua] = su * h
            p[va] = sv * h
            positions.append(p)
            uvs.append([u0 if su < 0 else u1, v0 if sv < 0 else v1])
        faces.append([(base, base), (base + 1, base + 1), (base + 2, base + 2)])
        faces.append([(base, base), (base + 2, base + 2), (base + 3, base + 3)])
    positions = np.array(positions)
    faces = _orient_outward(positions, np.array(faces), center=np.zeros(3))
    return Mesh(positions=positions, uvs=np.array(uvs), faces=faces)


def quad(z: float = 0.0, half: float = 1.0) -> Mesh:
    """Square facing +z covering the full UV atlas."""
    positions = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    faces = np.array([[(0, 0), (1, 1), (2, 2)], [(0, 0), (2, 2), (3, 3)]])
    return Mesh(positions=positions, uvs=uvs, faces=faces)


def _noise(shape, rng, sigma=2.0) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    n -= n.min()
    return n / max(n.max(), 1e-12)


# --------------------------------------------------------------------- toy library

TOY_MATERIALS = [
    # id, major, sub, base rgb, metal, roughness range, caption
    ("metal_gold_01", "metal", "gold", (0.85, 0.65, 0.20), 1.0, (0.15, 0.35),
     "Polished yellow gold with faint brushed streaks, high metalness, low roughness."),
    ("metal_gold_02", "metal", "gold", (0.72, 0.50, 0.12), 1.0, (0.35, 0.60),
     "Aged darker gold with worn patches, metallic, moderately rough."),
    ("metal_steel_01", "metal", "steel", (0.55, 0.58, 0.66), 1.0, (0.20, 0.40),
     "Cool blue-grey steel plate, smooth and metallic with subtle scratches."),
    ("metal_steel_02", "metal", "steel", (0.40, 0.44, 0.55), 1.0, (0.45, 0.75),
     "Dark blued steel with a matte, slightly pitted finish."),
    ("wood_oak_01", "wood", "oak", (0.66, 0.45, 0.24), 0.0, (0.50, 0.70),
     "Light oak planks, warm brown with visible straight grain, dielectric, satin."),
    ("wood_oak_02", "wood", "oak", (0.58, 0.44, 0.30), 0.0, (0.60, 0.85),
     "Weathered oak with greyish tint and raised grain embossing."),
    ("wood_walnut_01", "wood", "walnut", (0.36, 0.20, 0.10), 0.0, (0.40, 0.60),
     "Dark walnut with rich reddish-brown tone and fine swirling grain."),
    ("wood_walnut_02", "wood", "walnut", (0.30, 0.22, 0.16), 0.0, (0.55, 0.80),
     "Rough-sawn walnut, dull chocolate colour with coarse texture."),
    ("fabric_cotton_01", "fabric", "cotton", (0.85, 0.18, 0.20), 0.0, (0.80, 1.00),
     "Red woven cotton with tight weave pattern, fully rough, non-metallic."),
    ("fabric_cotton_02", "fabric", "cotton", (0.20, 0.62, 0.30), 0.0, (0.75, 0.95),
     "Green cotton canvas with coarse weave and matte finish."),
    ("fabric_denim_01", "fabric", "denim", (0.15, 0.25, 0.58), 0.0, (0.70, 0.95),
     "Indigo denim twill with diagonal weave, soft and rough."),
    ("fabric_denim_02", "fabric", "denim", (0.30, 0.40, 0.72), 0.0, (0.65, 0.90),
     "Faded light-blue denim with worn, slightly fuzzy surface."),
]


def toy_material_maps(index: int, size: int = 64) -> dict[str, np.ndarray]:
    """Map arrays for toy material ``index``; keys are on-disk role names."""
    mid, _, _, rgb, metal, (r_lo, r_hi), _ = TOY_MATERIALS[index]
    rng = np.random.default_rng(1000 + index)
    pattern = _noise((size, size), rng, sigma=1.5 + index % 3)
    shade = 0.75 + 0.5 * pattern
    diffuse = np.clip(np.asarray(rgb)[None, None, :] * shade[:, :, None], 0.0, 1.0)
    height = pattern
    gy, gx = np.gradient(height)
    strength = 4.0
    normal = np.stack([-gx * strength, -gy * strength, np.ones_like(height)], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    return {
        "diffuse": diffuse,
        "basecolor": diffuse.copy(),
        "normal": normal * 0.5 + 0.5,
        "roughness": r_lo + (r_hi - r_lo) * (1.0 - pattern),
        "metalness": np.full((size, size), metal),
        "height": height,
        "specular": 0.3 + 0.4 * pattern,
    }


def write_toy_library(root, size: int = 64) -> Path:
    """Write the 12-material toy library under ``root`` and return the root path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i, (mid, major, sub, *_rest, caption) in enumerate(TOY_MATERIALS):
        mdir = root / mid
        mdir.mkdir(exist_ok=True)
        files = {}
        for role, arr in toy_material_maps(i, size).items():
            files[role] = f"{role}.png"
            write_image(mdir / files[role], arr)
        manifest = {"id": mid, "major_type": major, "subcategory": sub, "caption": caption,
                    "maps": files}
        (mdir / "material.json").write_text(json.dumps(manifest, indent=2) + "\n")
        dirs.append(mid)
    (root / "library.json").write_text(json.dumps({"materials": dirs}, indent=2) + "\n")
    return root


# ------------------------------------------------------------------ fixture assets


def _paint(size, rgb, rng, sigma=2.0, amp=0.35):
    n = _noise((size, size), rng, sigma=sigma)
    return np.clip(np.asarray(rgb)[None, None, :] * (1.0 - amp / 2 + amp * n)[:, :, None], 0, 1)


def sphere_diffuse(size: int = 256) -> np.ndarray:
    """Upper half denim blue, lower half red cotton."""
    rng = np.random.default_rng(7)
    img = _paint(size, TOY_MATERIALS[10][3], rng)
    lower = _paint(size, TOY_MATERIALS[8][3], rng)
    img[size // 2:] = lower[size // 2:]
    return img


def cube_diffuse(size: int = 256) -> np.ndarray:
    """Top atlas row gold, bottom atlas row walnut."""
    rng = np.random.default_rng(11)
    img = _paint(size, TOY_MATERIALS[0][3], rng)
    lower = _paint(size, TOY_MATERIALS[6][3], rng)
    img[size // 2:] = lower[size // 2:]
    return img


def fixture_assets(tex_size: int = 256) -> dict[str, tuple[Mesh, TextureMap]]:
    return {
        "cube": (cube(), TextureMap(cube_diffuse(tex_size), "diffuse")),
        "sphere": (uv_sphere(), TextureMap(sphere_diffuse(tex_size), "diffuse")),
    }


def write_fixtures(root, tex_size: int = 256, library_size: int = 64) -> dict:
    """Write cube/sphere OBJ + diffuse PNG, the toy library, and sample configs."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lib = write_toy_library(root / "toy_library", size=library_size)
    written = {"library": str(lib)}
    for name, (mesh, tex) in fixture_assets(tex_size).items():
        (root / f"{name}.obj").write_text(serialize_obj(mesh))
        write_image(root / f"{name}_diffuse.png", tex.data)
        cfg = {
            "mesh": f"{name}.obj",
            "diffuse": f"{name}_diffuse.png",
            "library": "toy_library",
            "views": 3,
            "resolution": 256,
            "matcher": "offline",
            "masks": "fallback",
            "output": f"out_{name}",
            "seed": 0,
        }
        (root / f"{name}.json").write_text(json.dumps(cfg, indent=2) + "\n")
        written[name] = str(root / f"{name}.obj")
    return written
