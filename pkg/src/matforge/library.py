"""Material library: per-material directories, the three-level taxonomy
index, and MLLM captioning of material-ball renders."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateId,
    MalformedResponse,
    MissingManifest,
    NoDiffuseSource,
    ResolutionMismatch,
    UnknownMajorType,
    UnknownSubcategory,
)
from .mesh_io import TextureMap, canonical_role, load_texture
from .mllm_client import PromptPayload, image_part, text_part
from .render import luminance

log = logging.getLogger(__name__)

MAJOR_TYPES = (
    "ceramic", "concrete", "fabric", "ground", "leather", "marble", "metal",
    "misc", "plaster", "plastic", "stone", "terracotta", "wood",
)
BLACK_DIFFUSE_LUMINANCE = 0.02


@dataclass
class MaterialRecord:
    id: str
    major_type: str
    subcategory: str
    caption: str
    maps: dict[str, TextureMap]
    key_role: str = "diffuse"
    path: str | None = field(default=None, compare=False)
    tileable: bool = True

    def __post_init__(self):
        if "diffuse" not in self.maps and "albedo" not in self.maps:
            raise NoDiffuseSource(f"{self.id}: neither diffuse nor basecolor map")
        shapes = {t.shape for t in self.maps.values()}
        if len(shapes) > 1:
            raise ResolutionMismatch(f"{self.id}: maps differ in resolution {sorted(shapes)}")
        if self.key_role not in self.maps:
            raise NoDiffuseSource(f"{self.id}: key role {self.key_role!r} absent")

    def key_diffuse(self) -> TextureMap:
        return self.maps[self.key_role]

    @cached_property
    def mean_diffuse_rgb(self) -> np.ndarray:
        return self.key_diffuse().data.reshape(-1, 3).mean(axis=0)

    @property
    def resolution(self) -> tuple[int, int]:
        return next(iter(self.maps.values())).shape


def choose_key_role(maps: dict[str, TextureMap], material_id: str = "?") -> str:
    """Diffuse unless absent or nearly black; then the basecolor map substitutes."""
    def bright(role):
        return float(luminance(maps[role].data).mean()) >= BLACK_DIFFUSE_LUMINANCE

    if "diffuse" in maps and bright("diffuse"):
        return "diffuse"
    if "albedo" in maps and bright("albedo"):
        return "albedo"
    raise NoDiffuseSource(f"{material_id}: no usable diffuse or basecolor map")


def ingest_material(directory) -> MaterialRecord:
    """Build a :class:`MaterialRecord` from ``material.json`` plus map files."""
    directory = Path(directory)
    manifest_path = directory / "material.json"
    if not manifest_path.is_file():
        raise MissingManifest(f"{directory}: no material.json")
    meta = json.loads(manifest_path.read_text())
    for key in ("id", "major_type", "subcategory"):
        if key not in meta:
            raise MissingManifest(f"{manifest_path}: missing {key!r}")
    files = meta.get("maps")
    if files is None:
        files = {p.stem: p.name for p in sorted(directory.glob("*.png"))}
    maps = {}
    for role_name, fname in files.items():
        try:
            role = canonical_role(role_name)
        except ValueError:
            log.debug("%s: ignoring map %s", meta["id"], role_name)
            continue
        path = directory / fname
        if path.exists():
            maps[role] = load_texture(path, role)
    if "diffuse" not in maps and "albedo" not in maps:
        raise NoDiffuseSource(f"{meta['id']}: neither diffuse nor basecolor present")
    shapes = {t.shape for t in maps.values()}
    if len(shapes) > 1:
        raise ResolutionMismatch(f"{meta['id']}: maps differ in resolution {sorted(shapes)}")
    return MaterialRecord(
        id=meta["id"], major_type=meta["major_type"], subcategory=meta["subcategory"],
        caption=meta.get("caption", ""), maps=maps, key_role=choose_key_role(maps, meta["id"]),
        path=str(directory),
    )


@dataclass
class LibraryIndex:
    tree: dict[str, dict[str, list[str]]]
    records: dict[str, MaterialRecord]

    @property
    def counts(self) -> dict[str, int]:
        return {t: sum(len(v) for v in subs.values()) for t, subs in self.tree.items()}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, material_id: str) -> MaterialRecord:
        return self.records[material_id]

    def __contains__(self, material_id) -> bool:
        return material_id in self.records

    def major_types(self) -> list[str]:
        return list(self.tree)

    def subcategories(self, major_type: str) -> list[str]:
        if major_type not in self.tree:
            raise UnknownMajorType(major_type)
        return list(self.tree[major_type])

    def path_of(self, material_id: str) -> tuple[str, str, str]:
        rec = self.records[material_id]
        return rec.major_type, rec.subcategory, rec.id


def build_index(records) -> LibraryIndex:
    """Three-level taxonomy: major type -> subcategory -> sorted material ids."""
    records = list(records)
    if not records:
        raise ValueError("build_index needs at least one record")
    table: dict[str, MaterialRecord] = {}
    for rec in records:
        if rec.major_type not in MAJOR_TYPES:
            raise UnknownMajorType(f"{rec.id}: {rec.major_type!r}")
        if rec.id in table:
            raise DuplicateId(rec.id)
        table[rec.id] = rec
    tree: dict[str, dict[str, list[str]]] = {}
    for rec in sorted(table.values(), key=lambda r: (MAJOR_TYPES.index(r.major_type),
                                                     r.subcategory, r.id)):
        tree.setdefault(rec.major_type, {}).setdefault(rec.subcategory, []).append(rec.id)
    return LibraryIndex(tree=tree, records={k: table[k] for k in sorted(table)})


def lookup(index: LibraryIndex, major_type: str, subcategory: str | None = None):
    if major_type not in MAJOR_TYPES or major_type not in index.tree:
        raise UnknownMajorType(major_type)
    subs = index.tree[major_type]
    if subcategory is None:
        ids = [i for leaf in subs.values() for i in leaf]
    else:
        if subcategory not in subs:
            raise UnknownSubcategory(f"{major_type}/{subcategory}")
        ids = subs[subcategory]
    return [index.records[i] for i in ids]


def material_dirs(root) -> list[Path]:
    root = Path(root)
    manifest = root / "library.json"
    if manifest.is_file():
        entries = json.loads(manifest.read_text()).get("materials", [])
        return [root / e for e in entries]
    return sorted(p.parent for p in root.glob("*/material.json"))


def load_library(root) -> LibraryIndex:
    dirs = material_dirs(root)
    if not dirs:
        raise MissingManifest(f"{root}: no materials found")
    return build_index(ingest_material(d) for d in dirs)


# ------------------------------------------------------------------------ captions

CAPTION_SYSTEM = (
    "You are a materials expert describing physically based rendering materials "
    "from images of material spheres."
)
CAPTION_PROMPT = (
    "The {n} images show material spheres from the '{subcategory}' subcategory, in order. "
    "Write one short caption per image that separates it from the others. Describe only "
    "appearance: color, pattern, roughness, metalness, embossing pattern and material "
    "condition (new, worn, weathered). Do not describe the overall shape of the object "
    "or the sphere. Answer with JSON: {{\"captions\": [\"...\", ...]}} containing exactly "
    "{n} strings."
)


def _parse_captions(resp) -> list[str] | None:
    value = resp.parsed
    if isinstance(value, dict):
        value = value.get("captions")
    if isinstance(value, list) and all(isinstance(c, str) for c in value):
        return value
    return None


def caption_material(client, sphere_images, subcategory: str) -> list[str]:
    """Ask the MLLM for one appearance caption per material-ball image.

    The request is retried once when the caption count is wrong.
    """
    images = list(sphere_images)
    if not 1 <= len(images) <= 8:
        raise ValueError("caption_material takes 1 to 8 images")
    parts = [text_part(CAPTION_PROMPT.format(n=len(images), subcategory=subcategory))]
    parts += [image_part(img) for img in images]
    payload = PromptPayload(system=CAPTION_SYSTEM, turns=[parts], expect_json=True)
    for _attempt in range(2):
        captions = _parse_captions(client.complete(payload))
        if captions is not None and len(captions) == len(images):
            return captions
    raise MalformedResponse(f"expected {len(images)} captions for '{subcategory}'")


def store_caption(material_dir, caption: str) -> None:
    path = Path(material_dir) / "material.json"
    meta = json.loads(path.read_text())
    meta["caption"] = caption
    path.write_text(json.dumps(meta, indent=2) + "\n")
