"""UV-space texture partitioning: occupancy, mask back-projection, multi-view
merge and nearest-mean refinement of unassigned texels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numba
import numpy as np
from scipy import ndimage

from .errors import NoAssignedRegions, ResolutionMismatch
from .mesh_io import Mesh, TextureMap
from .render import GBuffer, uv_to_texel
from .seg import RegionMask

UNASSIGNED = -1
UNOCCUPIED = -2
_SQUARE = np.ones((3, 3), dtype=bool)


@numba.njit(cache=True)
def _uv_raster_kernel(tri, width, height, out):
    for f in range(tri.shape[0]):
        x0, y0 = tri[f, 0, 0], tri[f, 0, 1]
        x1, y1 = tri[f, 1, 0], tri[f, 1, 1]
        x2, y2 = tri[f, 2, 0], tri[f, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                l0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) / area
                l1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) / area
                l2 = 1.0 - l0 - l1
                if l0 >= 0.0 and l1 >= 0.0 and l2 >= 0.0:
                    out[py, px] = True


def uv_footprint(mesh: Mesh, tex_size) -> np.ndarray:
    """Texels whose center lies inside some face's UV triangle (no dilation)."""
    w, h = (tex_size, tex_size) if np.isscalar(tex_size) else tex_size
    uv = mesh.face_uvs()
    tri = np.empty_like(uv)
    tri[..., 0] = uv[..., 0] * w
    tri[..., 1] = (1.0 - uv[..., 1]) * h
    out = np.zeros((h, w), dtype=bool)
    _uv_raster_kernel(np.ascontiguousarray(tri), w, h, out)
    return out


def build_occupancy(mesh: Mesh, tex_size, dilation: int = 1) -> np.ndarray:
    """Occupied texels: UV footprint grown by ``dilation`` texels to close seam cracks."""
    occ = uv_footprint(mesh, tex_size)
    if dilation > 0:
        occ = ndimage.binary_dilation(occ, _SQUARE, iterations=dilation)
    return occ


@dataclass
class UVMask:
    mask: np.ndarray  # (H, W) bool at texture resolution
    depth: np.ndarray  # (H, W) nearest contributing view depth, inf elsewhere
    view_id: int = 0
    label: int = 0

    @property
    def texel_count(self) -> int:
        return int(self.mask.sum())


def backproject_mask(mask: RegionMask, gbuffer: GBuffer, tex_size,
                     occupancy: np.ndarray | None = None, dilation: int = 1) -> UVMask:
    """Carry a view-space mask into UV space through the G-buffer.

    Only visible surfels (the G-buffer's z-buffer winners) contribute. The
    result is dilated by ``dilation`` texels, restricted to ``occupancy``.
    """
    w, h = (tex_size, tex_size) if np.isscalar(tex_size) else tex_size
    if mask.mask.shape != gbuffer.shape:
        raise ResolutionMismatch("mask and G-buffer differ in size")
    sel = mask.mask & gbuffer.covered
    out = np.zeros((h, w), dtype=bool)
    depth = np.full((h, w), np.inf)
    if sel.any():
        row, col = uv_to_texel(gbuffer.uv[sel], w, h)
        out[row, col] = True
        np.minimum.at(depth, (row, col), gbuffer.depth[sel])
        if dilation > 0:
            for _ in range(dilation):
                grown = ndimage.grey_erosion(depth, footprint=_SQUARE, mode="constant",
                                             cval=np.inf)
                depth = np.where(np.isinf(depth), grown, depth)
            out = ndimage.binary_dilation(out, _SQUARE, iterations=dilation)
        if occupancy is not None:
            out &= occupancy
        depth[~out] = np.inf
    return UVMask(out, depth, mask.view_id, mask.label)


@dataclass
class PartitionMap:
    grid: np.ndarray  # (H, W) int: index into legend, UNASSIGNED or UNOCCUPIED
    legend: list[str]  # sorted material ids

    @property
    def shape(self):
        return self.grid.shape

    def material_at(self, row: int, col: int) -> str | None:
        v = int(self.grid[row, col])
        return self.legend[v] if v >= 0 else None

    def mask_of(self, material_id: str) -> np.ndarray:
        return self.grid == self.legend.index(material_id)

    @property
    def unassigned(self) -> np.ndarray:
        return self.grid == UNASSIGNED

    @property
    def occupied(self) -> np.ndarray:
        return self.grid != UNOCCUPIED

    def assigned_ids(self) -> list[str]:
        present = set(np.unique(self.grid[self.grid >= 0]).tolist())
        return [m for i, m in enumerate(self.legend) if i in present]

    def __eq__(self, other):
        if not isinstance(other, PartitionMap):
            return NotImplemented
        return self.legend == other.legend and np.array_equal(self.grid, other.grid)

    # indexed PNG: 0 = unoccupied, 1 = unassigned, k + 2 = legend[k]
    def save(self, png_path, legend_path=None) -> None:
        png_path = Path(png_path)
        if len(self.legend) > 253:
            raise ValueError("indexed PNG export supports at most 253 materials")
        img = (self.grid + 2).astype(np.uint8)
        png_path.parent.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(png_path), img)
        legend_path = legend_path or png_path.with_suffix(".json")
        Path(legend_path).write_text(json.dumps(
            {"encoding": {"0": "UNOCCUPIED", "1": "UNASSIGNED"},
             "legend": {str(i + 2): m for i, m in enumerate(self.legend)}},
            indent=2) + "\n")

    @classmethod
    def load(cls, png_path, legend_path=None) -> "PartitionMap":
        png_path = Path(png_path)
        legend_path = legend_path or png_path.with_suffix(".json")
        meta = json.loads(Path(legend_path).read_text())
        img = cv2.imread(str(png_path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise FileNotFoundError(png_path)
        if img.ndim == 3:
            img = img[:, :, 0]
        entries = sorted((int(k), v) for k, v in meta["legend"].items())
        legend = [v for _, v in entries]
        return cls(img.astype(np.int64) - 2, legend)

    def preview(self, colors: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """RGB visualisation; unoccupied black, unassigned magenta."""
        out = np.zeros(self.grid.shape + (3,))
        out[self.grid == UNASSIGNED] = (1.0, 0.0, 1.0)
        rng = np.random.default_rng(0)
        for i, m in enumerate(self.legend):
            c = colors[m] if colors and m in colors else rng.uniform(0.2, 1.0, 3)
            out[self.grid == i] = c
        return out


def merge_views(labeled, occupancy: np.ndarray) -> PartitionMap:
    """Per-texel majority vote across (UVMask, material_id) pairs.

    Vote ties go to the material whose contributing pixel was closest to its
    camera, then to the smaller material id. Unseen occupied texels stay
    UNASSIGNED.
    """
    labeled = list(labeled)
    shape = occupancy.shape
    for uvm, _ in labeled:
        if uvm.mask.shape != shape:
            raise ResolutionMismatch("UV masks must share the occupancy resolution")
    legend = sorted({m for _, m in labeled})
    best_votes = np.zeros(shape, dtype=np.int64)
    best_depth = np.full(shape, np.inf)
    grid = np.full(shape, UNASSIGNED, dtype=np.int64)
    for idx, material in enumerate(legend):
        votes = np.zeros(shape, dtype=np.int64)
        depth = np.full(shape, np.inf)
        for uvm, m in labeled:
            if m == material:
                votes += uvm.mask
                depth = np.minimum(depth, np.where(uvm.mask, uvm.depth, np.inf))
        better = (votes > 0) & ((votes > best_votes) |
                                ((votes == best_votes) & (depth < best_depth)))
        grid[better] = idx
        best_votes[better] = votes[better]
        best_depth[better] = depth[better]
    grid[~occupancy] = UNOCCUPIED
    return PartitionMap(grid, legend)


def refine_missing(part: PartitionMap, diffuse: TextureMap) -> PartitionMap:
    """Assign each unassigned occupied texel the material with the nearest mean diffuse color."""
    if diffuse.shape != part.shape:
        raise ResolutionMismatch("diffuse and partition resolutions differ")
    assigned = [i for i in range(len(part.legend)) if (part.grid == i).any()]
    if not assigned:
        raise NoAssignedRegions("partition has no assigned texels")
    todo = part.grid == UNASSIGNED
    if not todo.any():
        return PartitionMap(part.grid.copy(), list(part.legend))
    rgb = diffuse.data
    means = np.stack([rgb[part.grid == i].mean(axis=0) for i in assigned])
    pix = rgb[todo]
    d = ((pix[:, None, :] - means[None]) ** 2).sum(axis=2)
    # legend is sorted, so the first minimum is the smallest id
    grid = part.grid.copy()
    grid[todo] = np.asarray(assigned)[np.argmin(d, axis=1)]
    return PartitionMap(grid, list(part.legend))
