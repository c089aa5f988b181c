"""Region-to-material assignment: hierarchical MLLM descent over the library
taxonomy, a deterministic color matcher, and cross-view reconciliation."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import EmptyLibrary, MalformedResponse, MatchFailure, NoValidChoice
from .library import MAJOR_TYPES, LibraryIndex
from .mllm_client import PromptPayload, extract_choice, image_part, text_part
from .seg import AnnotatedImage, RegionMask

log = logging.getLogger(__name__)


@dataclass
class MatchResult:
    view_id: int
    label: int
    material_id: str
    source: str = "offline"  # mllm | offline | image-prior
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchResult":
        return cls(view_id=d["view_id"], label=d["label"], material_id=d["material_id"],
                   source=d.get("source", "offline"), trace=d.get("trace", []))


# ----------------------------------------------------------------- offline matcher


def _centered(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb - rgb.mean(axis=-1, keepdims=True)


class OfflineMaterialMatcher(BaseEstimator):
    """Nearest library material by mean diffuse color.

    Colors are centered per vector (each RGB triple minus its own mean) so hue
    outweighs brightness. Ties go to the lexicographically smallest id.
    """

    def fit(self, index: LibraryIndex, y=None):
        if index is None or len(index) == 0:
            raise EmptyLibrary("library has no materials")
        self.material_ids_ = np.array(sorted(index.records))
        means = np.stack([index[m].mean_diffuse_rgb for m in self.material_ids_])
        self.centered_means_ = _centered(means)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "centered_means_")
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        d = ((_centered(X)[:, None, :] - self.centered_means_[None]) ** 2).sum(axis=2)
        # argmin returns the first minimum, and ids are sorted
        return self.material_ids_[np.argmin(d, axis=1)]


def match_region_offline(mask: RegionMask, index: LibraryIndex) -> MatchResult:
    if mask.pixel_count == 0:
        raise ValueError("empty mask")
    mid = str(OfflineMaterialMatcher().fit(index).predict(mask.mean_diffuse_rgb)[0])
    return MatchResult(mask.view_id, mask.label, mid, source="offline",
                       trace=[{"level": "offline", "rgb": mask.mean_diffuse_rgb.tolist()}])


# ---------------------------------------------------------------- MLLM matcher

SYSTEM_PROMPT = (
    "You are an expert in physically based materials. You are shown a rendering of a 3D "
    "object whose regions are marked with white numbers on black boxes. The rendering shows "
    "only the base color (no lighting), so judge materials from color, pattern and the kind "
    "of object part. Always answer with a JSON object {\"choice\": \"<option>\"} where the "
    "option is copied exactly from the list you are given."
)
LEVEL1 = (
    "Level 1 of 3. Region {label}: which major material type is the part marked "
    "{label} made of? Options: {options}."
)
LEVEL2 = (
    "Level 2 of 3. Region {label} was identified as {major}. Which {major} subcategory fits "
    "it best? Options: {options}."
)
LEVEL3 = (
    "Level 3 of 3. Region {label} is {major} / {sub}. Candidate materials with their "
    "descriptions:\n{captions}\nWhich material id matches region {label} best? "
    "Options: {options}."
)
REASK = "\nYour previous answer was not one of the options. Reply only with {\"choice\": ...}."


def _ask(client, annotated_png: bytes, system: str, question: str, valid: list[str],
         trace: list, level: str) -> str:
    """One level of the descent with a single re-ask on an invalid answer."""
    for attempt in range(2):
        text = question + (REASK if attempt else "")
        payload = PromptPayload(system=system,
                                turns=[[image_part(annotated_png), text_part(text)]],
                                expect_json=True, max_tokens=200)
        resp = client.complete(payload)
        step = {"level": level, "attempt": attempt, "options": valid, "raw": resp.text}
        try:
            choice = extract_choice(resp, valid)
        except NoValidChoice as exc:
            step["error"] = str(exc)
            trace.append(step)
            continue
        step["choice"] = choice
        trace.append(step)
        return choice
    raise MatchFailure(f"{level}: no valid answer after re-ask")


def _match_one(client, png: bytes, system: str, mask: RegionMask, index: LibraryIndex):
    trace: list = []
    label = mask.label
    try:
        majors = [t for t in MAJOR_TYPES if t in index.tree]
        major = _ask(client, png, system,
                     LEVEL1.format(label=label, options=", ".join(MAJOR_TYPES)),
                     list(MAJOR_TYPES), trace, "major_type")
        if major not in majors:
            raise MatchFailure(f"library has no {major!r} materials")
        subs = index.subcategories(major)
        sub = _ask(client, png, system,
                   LEVEL2.format(label=label, major=major, options=", ".join(subs)),
                   subs, trace, "subcategory")
        ids = index.tree[major][sub]
        captions = "\n".join(f"- {i}: {index[i].caption}" for i in ids)
        mid = _ask(client, png, system,
                   LEVEL3.format(label=label, major=major, sub=sub, captions=captions,
                                 options=", ".join(ids)),
                   ids, trace, "material")
    except (MatchFailure, MalformedResponse) as exc:
        log.warning("view %d region %d: %s; using offline matcher", mask.view_id, label, exc)
        fallback = match_region_offline(mask, index)
        fallback.trace = trace + fallback.trace
        return fallback
    return MatchResult(mask.view_id, label, mid, source="mllm", trace=trace)


DESCRIBE_PROMPT = (
    "Describe the object in this reference image in two or three sentences: what it is, "
    "its parts, and the materials each part appears to be made of."
)


def describe_reference(client, image) -> str:
    """Short text description of a reference image, used as an object hint."""
    payload = PromptPayload(system="You describe objects for a material assignment tool.",
                            turns=[[text_part(DESCRIBE_PROMPT), image_part(image)]],
                            max_tokens=200)
    text = client.complete(payload).text.strip()
    if not text:
        raise MalformedResponse("empty reference description")
    return text


def match_regions_mllm(client, annotated: AnnotatedImage, masks: list[RegionMask],
                       index: LibraryIndex, object_hint: str | None = None,
                       n_jobs: int = 1) -> list[MatchResult]:
    """Three prompts per region: major type, subcategory, then material id
    chosen from the verbatim captions of that subcategory."""
    png = annotated.png_bytes()
    system = SYSTEM_PROMPT
    if object_hint:
        system = f"Object description: {object_hint.strip()}\n\n{system}"
    ordered = sorted(masks, key=lambda m: m.label)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda m: _match_one(client, png, system, m, index),
                                    ordered))
    else:
        results = [_match_one(client, png, system, m, index) for m in ordered]
    return sorted(results, key=lambda r: (r.view_id, r.label))


# ----------------------------------------------------------- cross-view consensus


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def reconcile_cross_view(results: list[MatchResult], uv_masks: dict,
                         iou_threshold: float = 0.5) -> list[MatchResult]:
    """Give view-regions that cover the same UV area one shared material.

    ``uv_masks`` maps (view_id, label) to a UV-space mask (array or object
    with a ``.mask``). Regions are grouped transitively by UV IoU above the
    threshold; each group takes its majority material, ties going to the
    member with the largest UV footprint.
    """
    keys = [(r.view_id, r.label) for r in results]
    grids = {}
    for k in keys:
        m = uv_masks.get(k)
        grids[k] = None if m is None else np.asarray(getattr(m, "mask", m), dtype=bool)

    parent = list(range(len(results)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(results)):
        for j in range(i + 1, len(results)):
            gi, gj = grids[keys[i]], grids[keys[j]]
            if gi is not None and gj is not None and _iou(gi, gj) > iou_threshold:
                parent[find(j)] = find(i)

    groups: dict[int, list[int]] = {}
    for i in range(len(results)):
        groups.setdefault(find(i), []).append(i)

    out = list(results)
    for members in groups.values():
        if len(members) < 2:
            continue
        votes: dict[str, int] = {}
        for i in members:
            votes[results[i].material_id] = votes.get(results[i].material_id, 0) + 1
        top = max(votes.values())
        leaders = {m for m, v in votes.items() if v == top}

        def footprint(i):
            g = grids[keys[i]]
            return int(g.sum()) if g is not None else 0

        if len(leaders) == 1:
            winner = next(iter(leaders))
        else:
            best = max((i for i in members if results[i].material_id in leaders),
                       key=lambda i: (footprint(i), -i))
            winner = results[best].material_id
        for i in members:
            if out[i].material_id != winner:
                r = out[i]
                trace = r.trace + [{"level": "reconcile", "from": r.material_id, "to": winner}]
                out[i] = MatchResult(r.view_id, r.label, winner, r.source, trace)
    return out


def write_report(results: list[MatchResult], path) -> None:
    with open(path, "w") as f:
        json.dump({"regions": [r.to_dict() for r in results]}, f, indent=2, sort_keys=True)
        f.write("\n")


def read_report(path) -> list[MatchResult]:
    with open(path) as f:
        return [MatchResult.from_dict(d) for d in json.load(f)["regions"]]
