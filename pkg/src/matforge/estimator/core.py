"""Diffuse-referenced SVBRDF estimation by nearest-neighbor index transfer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..errors import MaterialMissing, ResolutionMismatch, UnassignedTexels
from ..library import LibraryIndex, MaterialRecord
from ..mesh_io import ROLE_CHANNELS, SVBRDF_ROLES, TextureMap
from ..partition import UNASSIGNED, PartitionMap
from .equalize import HistogramEqualizer
from .kdtree import LEAF_SIZE, PixelIndex

ROLE_DEFAULTS = {
    "normal": (0.5, 0.5, 1.0),
    "roughness": (0.5,),
    "metalness": (0.0,),
    "height": (0.5,),
    "specular": (0.5,),
}


@dataclass
class SVBRDFSet:
    maps: dict[str, TextureMap]
    provenance: PartitionMap | None = None

    def __post_init__(self):
        missing = [r for r in SVBRDF_ROLES if r not in self.maps]
        if missing:
            raise ValueError(f"SVBRDF set lacks {missing}")
        if len({t.shape for t in self.maps.values()}) != 1:
            raise ResolutionMismatch("SVBRDF maps differ in resolution")

    def __getitem__(self, role: str) -> TextureMap:
        return self.maps[role]

    @property
    def shape(self):
        return self.maps["normal"].shape

    def normal_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.maps["normal"].data * 2.0 - 1.0, axis=-1)


def default_map(role: str, shape) -> TextureMap:
    h, w = shape
    return TextureMap(np.broadcast_to(np.asarray(ROLE_DEFAULTS[role]), (h, w,
                                      ROLE_CHANNELS[role])).copy(), role)


def resize_wrap(data: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize with repeat addressing, sampling at pixel centers."""
    src_h, src_w = data.shape[:2]
    h, w = shape
    if (src_h, src_w) == (h, w):
        return data.copy()
    ys = (np.arange(h) + 0.5) * src_h / h - 0.5
    xs = (np.arange(w) + 0.5) * src_w / w - 0.5
    y0, x0 = np.floor(ys).astype(np.int64), np.floor(xs).astype(np.int64)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    y1, x1 = (y0 + 1) % src_h, (x0 + 1) % src_w
    y0, x0 = y0 % src_h, x0 % src_w
    top = data[y0][:, x0] * (1 - fx) + data[y0][:, x1] * fx
    bottom = data[y1][:, x0] * (1 - fx) + data[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def material_maps_at(material: MaterialRecord, shape) -> dict[str, TextureMap]:
    """The key diffuse and the five target maps, resampled to ``shape`` when needed.

    Absent roles are filled with neutral defaults.
    """
    out = {"key": material.key_diffuse()}
    for role in SVBRDF_ROLES:
        out[role] = material.maps.get(role) or default_map(role, material.resolution)
    if material.resolution == tuple(shape):
        return out
    resized = {}
    for role, tex in out.items():
        data = resize_wrap(tex.data, shape)
        if role == "normal":
            v = data * 2.0 - 1.0
            v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
            data = v * 0.5 + 0.5
        resized[role] = TextureMap(np.clip(data, 0.0, 1.0), tex.role)
    return resized


class DiffuseReferencedTransfer(BaseEstimator):
    """Nearest-neighbor transfer from one key material.

    ``fit`` equalizes the key diffuse and indexes its pixels; ``predict``
    maps equalized query colors to key pixel indices; ``transfer`` reads the
    material's maps at those indices.
    """

    def __init__(self, leaf_size: int = LEAF_SIZE, n_bins: int = 256, equalize: bool = True):
        self.leaf_size = leaf_size
        self.n_bins = n_bins
        self.equalize = equalize

    def fit(self, key_diffuse: TextureMap, y=None, maps: dict[str, TextureMap] | None = None):
        key = key_diffuse.data.reshape(-1, 3)
        if self.equalize:
            key = HistogramEqualizer(self.n_bins).fit_transform(key)
        self.index_ = PixelIndex(key, leaf_size=self.leaf_size)
        self.key_shape_ = key_diffuse.shape
        self.maps_ = {r: t.data.reshape(-1, t.channels) for r, t in (maps or {}).items()}
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "index_")
        return self.index_.query(np.asarray(X, dtype=np.float64).reshape(-1, 3))

    def transfer(self, X) -> tuple[dict[str, np.ndarray], np.ndarray]:
        idx = self.predict(X)
        return {r: v[idx] for r, v in self.maps_.items()}, idx


def transfer_region(query_eq: TextureMap, region: np.ndarray, material: MaterialRecord,
                    index: PixelIndex | None = None, leaf_size: int = LEAF_SIZE,
                    n_bins: int = 256) -> dict[str, np.ndarray]:
    """SVBRDF values for the texels in ``region`` (row-major order of the mask).

    ``query_eq`` is the already-equalized query diffuse. ``index`` must be
    built over the equalized key diffuse of ``material``; it is built here
    when omitted. The material's maps must share the key's resolution.
    """
    maps = material_maps_at(material, material.resolution)
    if index is None:
        key = HistogramEqualizer(n_bins).fit_transform(maps["key"].data.reshape(-1, 3))
        index = PixelIndex(key, leaf_size=leaf_size)
    idx = index.query(query_eq.data[region])
    return {role: maps[role].data.reshape(-1, maps[role].channels)[idx]
            for role in SVBRDF_ROLES}


class SVBRDFEstimator(BaseEstimator):
    """Full-texture estimation from a query diffuse and a material partition.

    ``fit`` takes the :class:`LibraryIndex`; ``predict(diffuse, partition)``
    returns an :class:`SVBRDFSet` at the diffuse resolution.
    """

    def __init__(self, leaf_size: int = LEAF_SIZE, n_bins: int = 256,
                 include_albedo: bool = False):
        self.leaf_size = leaf_size
        self.n_bins = n_bins
        self.include_albedo = include_albedo

    def fit(self, library: LibraryIndex, y=None):
        self.library_ = library
        return self

    def predict(self, diffuse: TextureMap, partition: PartitionMap) -> SVBRDFSet:
        check_is_fitted(self, "library_")
        if diffuse.shape != partition.shape:
            raise ResolutionMismatch("diffuse and partition resolutions differ")
        if (partition.grid == UNASSIGNED).any():
            raise UnassignedTexels(f"{int(partition.unassigned.sum())} texels unassigned")
        used = partition.assigned_ids()
        missing = [m for m in used if m not in self.library_]
        if missing:
            raise MaterialMissing(", ".join(missing))

        shape = diffuse.shape
        query_eq = HistogramEqualizer(self.n_bins).fit_transform(diffuse.data.reshape(-1, 3))
        query_eq = query_eq.reshape(diffuse.data.shape)
        out = {role: default_map(role, shape).data for role in SVBRDF_ROLES}
        for material_id in used:
            region = partition.mask_of(material_id)
            maps = material_maps_at(self.library_[material_id], shape)
            model = DiffuseReferencedTransfer(self.leaf_size, self.n_bins).fit(
                maps["key"], maps={r: maps[r] for r in SVBRDF_ROLES})
            values, _ = model.transfer(query_eq[region])
            for role, v in values.items():
                out[role][region] = v
        maps = {role: TextureMap(out[role], role) for role in SVBRDF_ROLES}
        if self.include_albedo:
            maps["albedo"] = TextureMap(diffuse.data.copy(), "albedo")
        return SVBRDFSet(maps, provenance=partition)


def estimate(diffuse: TextureMap, part: PartitionMap, lib: LibraryIndex,
             **params) -> SVBRDFSet:
    return SVBRDFEstimator(**params).fit(lib).predict(diffuse, part)

