"""Region masks per rendered view: ingestion, a deterministic color-clustering
fallback segmenter, overlap filtering, and Set-of-Mark annotation."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_array

from .errors import NoMasksFound, ResolutionMismatch
from .mesh_io import read_image, write_image
from .render import GBuffer, RenderOutput

log = logging.getLogger(__name__)

DUST_FRACTION = 0.002
MERGE_FRACTION = 0.005


@dataclass
class RegionMask:
    view_id: int
    label: int
    mask: np.ndarray  # (H, W) bool
    mean_diffuse_rgb: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.mean_diffuse_rgb = np.asarray(self.mean_diffuse_rgb, dtype=np.float64)
        if self.label < 1:
            raise ValueError("labels are positive integers")

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class AnnotatedImage:
    image: np.ndarray  # (H, W, 3) with marks burned in
    marks: list  # [(label, (row, col))]
    view_id: int = 0

    @property
    def legend(self) -> list[int]:
        return [label for label, _ in self.marks]

    def png_bytes(self) -> bytes:
        rgb = np.round(np.clip(self.image, 0, 1) * 255).astype(np.uint8)
        ok, buf = cv2.imencode(".png", np.ascontiguousarray(rgb[:, :, ::-1]))
        if not ok:
            raise RuntimeError("PNG encoding failed")
        return buf.tobytes()


def _mean_color(color: np.ndarray | None, mask: np.ndarray) -> np.ndarray:
    if color is None or not mask.any():
        return np.zeros(3)
    return color[mask].mean(axis=0)


def relabel(masks: list[RegionMask], color: np.ndarray | None = None) -> list[RegionMask]:
    """Renumber labels 1..n in the given order, refreshing mean colors if ``color`` is given."""
    out = []
    for i, m in enumerate(masks, start=1):
        mean = _mean_color(color, m.mask) if color is not None else m.mean_diffuse_rgb
        out.append(RegionMask(m.view_id, i, m.mask, mean))
    return out


_MASK_NAME = re.compile(r"view(\d+)_region(\d+)\.png$")


def load_masks(directory, view_id: int, gbuffer: GBuffer,
               color: np.ndarray | None = None) -> list[RegionMask]:
    """Load ``view<k>_region<j>.png`` files for one view, clipped to the foreground."""
    directory = Path(directory)
    found = []
    for path in directory.glob(f"view{view_id}_region*.png"):
        m = _MASK_NAME.search(path.name)
        if m and int(m.group(1)) == view_id:
            found.append((int(m.group(2)), path))
    if not found:
        raise NoMasksFound(f"no masks for view {view_id} in {directory}")
    masks = []
    for _, path in sorted(found):
        arr = read_image(path)
        if arr.ndim == 3:
            arr = arr.max(axis=2)
        if arr.shape != gbuffer.shape:
            raise ResolutionMismatch(f"{path.name}: {arr.shape} vs render {gbuffer.shape}")
        mask = (arr > 0.5) & gbuffer.covered
        if mask.any():
            masks.append(RegionMask(view_id, len(masks) + 1, mask, _mean_color(color, mask)))
        else:
            log.info("dropping %s: no foreground pixels", path.name)
    return masks


def save_masks(masks: list[RegionMask], directory) -> None:
    directory = Path(directory)
    for m in masks:
        write_image(directory / f"view{m.view_id}_region{m.label}.png", m.mask.astype(float))


# ------------------------------------------------------------------ fallback segmenter


def _elbow_k(inertias: list[float], threshold: float) -> int:
    """Smallest k whose within-cluster inertia is at most ``threshold`` of the k=1 inertia."""
    base = inertias[0]
    if base <= 1e-12:
        return 1
    for k, inertia in enumerate(inertias, start=1):
        if inertia <= threshold * base:
            return k
    return len(inertias)


class ColorSegmenter(ClusterMixin, BaseEstimator):
    """K-means color clustering with an elbow-selected k.

    ``fit`` takes an (n, 3) array of foreground colors. The chosen k is the
    smallest one that explains ``1 - elbow_threshold`` of the total variance,
    capped at ``k_max`` and at the number of distinct colors.
    """

    def __init__(self, k_max: int = 6, elbow_threshold: float = 0.1, random_state: int = 0,
                 n_init: int = 4):
        self.k_max = k_max
        self.elbow_threshold = elbow_threshold
        self.random_state = random_state
        self.n_init = n_init

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n_distinct = len(np.unique(X, axis=0))
        k_cap = max(1, min(self.k_max, n_distinct))
        fits = []
        for k in range(1, k_cap + 1):
            km = KMeans(n_clusters=k, init="k-means++", n_init=self.n_init,
                        random_state=self.random_state).fit(X)
            fits.append(km)
            if _elbow_k([f.inertia_ for f in fits], self.elbow_threshold) < k:
                break
        k = _elbow_k([f.inertia_ for f in fits], self.elbow_threshold)
        best = fits[k - 1]
        # order clusters by center so labels do not depend on k-means internals
        order = np.lexsort(best.cluster_centers_.T[::-1])
        remap = np.empty(k, dtype=np.int64)
        remap[order] = np.arange(k)
        self.n_clusters_ = k
        self.cluster_centers_ = best.cluster_centers_[order]
        self.labels_ = remap[best.labels_]
        self.inertias_ = [f.inertia_ for f in fits]
        return self


def fallback_segment(render: RenderOutput, k_max: int = 6, seed: int = 0,
                     merge_fraction: float = MERGE_FRACTION, view_id: int = 0,
                     elbow_threshold: float = 0.1) -> list[RegionMask]:
    """Deterministic stand-in for a neural segmenter.

    Foreground colors are clustered, each cluster is split into 4-connected
    components, and components smaller than ``merge_fraction`` of the
    foreground are merged into the adjacent region of nearest mean color.
    """
    fg = render.foreground
    n_fg = int(fg.sum())
    if n_fg == 0:
        raise ValueError("render has no foreground pixels")
    colors = render.color[fg]
    seg = ColorSegmenter(k_max=k_max, random_state=seed, elbow_threshold=elbow_threshold)
    labels = seg.fit(colors).labels_

    cluster_img = np.full(fg.shape, -1, dtype=np.int64)
    cluster_img[fg] = labels
    regions = np.zeros(fg.shape, dtype=np.int64)  # 0 = background
    next_id = 1
    for c in range(seg.n_clusters_):
        comp, n = ndimage.label(cluster_img == c)
        if n:
            regions[comp > 0] = comp[comp > 0] + next_id - 1
            next_id += n
    regions = _merge_small(regions, render.color, merge_fraction * n_fg)

    ids = np.unique(regions[regions > 0])
    # order regions by first pixel in raster order for stable labelling
    flat = regions.ravel()
    firsts = {int(r): int(np.argmax(flat == r)) for r in ids}
    ordered = sorted(ids, key=lambda r: firsts[int(r)])
    return [
        RegionMask(view_id, i, regions == r, _mean_color(render.color, regions == r))
        for i, r in enumerate(ordered, start=1)
    ]


def _merge_small(regions: np.ndarray, color: np.ndarray, min_size: float) -> np.ndarray:
    regions = regions.copy()
    struct = ndimage.generate_binary_structure(2, 1)
    while True:
        ids, counts = np.unique(regions[regions > 0], return_counts=True)
        if len(ids) <= 1:
            return regions
        small = [(c, r) for r, c in zip(ids, counts) if c < min_size]
        if not small:
            return regions
        _, rid = min(small)
        m = regions == rid
        ring = ndimage.binary_dilation(m, struct) & ~m
        neighbours = np.unique(regions[ring & (regions > 0)])
        candidates = neighbours if len(neighbours) else ids[ids != rid]
        mean = color[m].mean(axis=0)
        dists = [(float(np.sum((color[regions == n].mean(axis=0) - mean) ** 2)), int(n))
                 for n in candidates]
        regions[m] = min(dists)[1]


# ------------------------------------------------------------------------ filtering


def filter_masks(masks: list[RegionMask], foreground_count: int | None = None,
                 dust_fraction: float = DUST_FRACTION, color: np.ndarray | None = None,
                 return_dropped: bool = False):
    """Make masks of one view pairwise disjoint.

    A pixel claimed by several masks goes to the one with the smallest
    original area (ties: lower label). Masks left with fewer than
    ``dust_fraction`` of the foreground are deleted; survivors are relabelled
    1..n in their original order. With ``return_dropped`` the deleted masks
    are returned as a second value.
    """
    if not masks:
        return ([], []) if return_dropped else []
    if len({m.view_id for m in masks}) > 1:
        raise ValueError("filter_masks works on a single view")
    stack = np.stack([m.mask for m in masks])
    if foreground_count is None:
        foreground_count = int(stack.any(axis=0).sum())
    areas = stack.sum(axis=(1, 2))
    priority = sorted(range(len(masks)), key=lambda i: (areas[i], masks[i].label))
    owner = np.full(stack.shape[1:], -1, dtype=np.int64)
    for i in reversed(priority):
        owner[stack[i]] = i

    kept, dropped = [], []
    for i, m in enumerate(masks):
        resolved = owner == i
        area = int(resolved.sum())
        if area == 0 or area < dust_fraction * foreground_count:
            dropped.append(m)
            continue
        mean = _mean_color(color, resolved) if color is not None else m.mean_diffuse_rgb
        kept.append(RegionMask(m.view_id, m.label, resolved, mean))
    if dropped:
        log.info("view %d: dropped %d dust mask(s)", masks[0].view_id, len(dropped))
    kept = relabel(kept)
    return (kept, dropped) if return_dropped else kept


# ----------------------------------------------------------------------- annotation


def pole_of_inaccessibility(mask: np.ndarray) -> tuple[int, int]:
    """Mask pixel farthest from any non-mask pixel; ties go to the lowest row, then column.

    Pixels outside the image count as outside the mask.
    """
    padded = np.pad(np.asarray(mask, dtype=bool), 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    idx = int(np.argmax(dist))
    return divmod(idx, mask.shape[1])


def _draw_mark(img: np.ndarray, label: int, anchor: tuple[int, int]) -> None:
    text = str(label)
    scale = max(0.35, img.shape[0] / 1024)
    thickness = max(1, int(round(scale * 2)))
    (tw, th), base = cv2.getTextSize(text, cv2.FONT_HERSHEY_SIMPLEX, scale, thickness)
    row, col = anchor
    x0, y0 = col - tw // 2 - 2, row - th // 2 - 2
    cv2.rectangle(img, (x0, y0), (x0 + tw + 4, y0 + th + base + 2), (0, 0, 0), thickness=-1)
    cv2.putText(img, text, (x0 + 2, y0 + th + 2), cv2.FONT_HERSHEY_SIMPLEX, scale,
                (255, 255, 255), thickness, cv2.LINE_AA)


def annotate_som(render: RenderOutput, masks: list[RegionMask]) -> AnnotatedImage:
    """Burn one numeric mark per mask into a copy of the render."""
    img = np.round(np.clip(render.color, 0, 1) * 255).astype(np.uint8).copy()
    marks = []
    for m in sorted(masks, key=lambda m: m.label):
        anchor = pole_of_inaccessibility(m.mask)
        marks.append((m.label, anchor))
        _draw_mark(img, m.label, anchor)
    view = masks[0].view_id if masks else 0
    return AnnotatedImage(image=img.astype(np.float64) / 255.0, marks=marks, view_id=view)
