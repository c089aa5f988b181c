"""End-to-end orchestration. Every stage reads its inputs from and writes its
outputs to the artifact directory, so a full run and a stage-by-stage run
go through the same code."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matcher as matcher_mod
from .errors import (
    AuthError,
    ConfigError,
    MatforgeError,
    MissingPriorArtifact,
    MLLMError,
    StageError,
)
from .estimator import SVBRDFEstimator, SVBRDFSet
from .library import load_library
from .mesh_io import (
    SVBRDF_ROLES,
    TextureMap,
    export_bundle,
    load_obj,
    load_texture,
    read_image,
    write_image,
)
from .mllm_client import DEFAULT_MODEL, MLLMClient, ReplayTransport
from .partition import (
    PartitionMap,
    UVMask,
    backproject_mask,
    build_occupancy,
    merge_views,
    refine_missing,
)
from .render import Camera, GBuffer, RenderOutput, make_camera_ring, rasterize, top_down_camera
from .seg import (
    AnnotatedImage,
    RegionMask,
    annotate_som,
    fallback_segment,
    filter_masks,
    load_masks,
    save_masks,
)

log = logging.getLogger(__name__)

STAGES = ("render", "segment", "annotate", "match", "backproject", "reconcile", "merge",
          "refine", "estimate", "export")
MATCHERS = ("offline", "mllm", "replay")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_MLLM = 0, 2, 3, 4


@dataclass
class PipelineConfig:
    mesh: str
    diffuse: str
    library: str
    output: str = "out"
    views: int = 3
    resolution: int = 512
    elevation: float = 20.0  # degrees
    top_view: bool = False
    matcher: str = "offline"
    replay_log: str | None = None
    masks: str = "fallback"  # "fallback" or "files:<dir>"
    object_hint: str | None = None
    k_max: int = 6
    dust_fraction: float = 0.002
    merge_fraction: float = 0.005
    dump_gbuffer: bool = False
    dump_partition: bool = False
    deep: bool = False
    seed: int = 0
    base_dir: str = field(default=".", repr=False)

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        data.update({k: v for k, v in overrides.items() if v is not None})
        data.setdefault("base_dir", str(path.parent))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.path(self.output)

    @property
    def mask_dir(self) -> Path | None:
        return self.path(self.masks[len("files:"):]) if self.masks.startswith("files:") else None

    def validate(self) -> None:
        if self.views < 1:
            raise ConfigError("views must be >= 1")
        if self.resolution < 8:
            raise ConfigError("resolution must be >= 8")
        if self.matcher not in MATCHERS:
            raise ConfigError(f"matcher must be one of {MATCHERS}")
        if self.masks != "fallback" and not self.masks.startswith("files:"):
            raise ConfigError("masks must be 'fallback' or 'files:<dir>'")
        for name in ("mesh", "diffuse", "library"):
            if not self.path(getattr(self, name)).exists():
                raise ConfigError(f"{name} path does not exist: {self.path(getattr(self, name))}")
        if self.mask_dir is not None and not self.mask_dir.is_dir():
            raise ConfigError(f"mask directory does not exist: {self.mask_dir}")
        if self.matcher == "replay":
            if not self.replay_log or not self.path(self.replay_log).is_file():
                raise ConfigError("matcher=replay needs an existing replay_log")
        if self.object_hint and self.object_hint.lower().endswith(".png") \
                and not self.path(self.object_hint).is_file():
            raise ConfigError(f"object_hint image does not exist: {self.object_hint}")


@dataclass
class RunContext:
    cfg: PipelineConfig
    transport: object = None  # injected MLLM transport (tests, custom providers)
    timings: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict)

    @property
    def out(self) -> Path:
        return self.cfg.out

    def need(self, rel: str) -> Path:
        p = self.out / rel
        if not p.exists():
            raise MissingPriorArtifact(f"{p} is missing; run the earlier stages first")
        return p

    def mesh(self):
        if "mesh" not in self._cache:
            self._cache["mesh"] = load_obj(self.cfg.path(self.cfg.mesh))
        return self._cache["mesh"]

    def diffuse(self) -> TextureMap:
        if "diffuse" not in self._cache:
            self._cache["diffuse"] = load_texture(self.cfg.path(self.cfg.diffuse), "diffuse")
        return self._cache["diffuse"]

    def library(self):
        if "library" not in self._cache:
            self._cache["library"] = load_library(self.cfg.path(self.cfg.library))
        return self._cache["library"]

    def cameras(self) -> list[Camera]:
        data = json.loads(self.need("render/cameras.json").read_text())
        return [Camera.from_dict(c) for c in data["cameras"]]

    def renders(self) -> list[RenderOutput]:
        out = []
        for k, cam in enumerate(self.cameras()):
            color = read_image(self.need(f"render/view{k}.png"))
            gb = GBuffer.from_npz(self.need(f"render/view{k}_gbuffer.npz"))
            out.append(RenderOutput(color, gb, cam))
        return out

    def masks(self) -> dict[int, list[RegionMask]]:
        meta = json.loads(self.need("segment/regions.json").read_text())
        renders = self.renders()
        result = {}
        for k, r in enumerate(renders):
            ms = load_masks(self.out / "segment", k, r.gbuffer, color=r.color) \
                if meta["views"][str(k)] else []
            result[k] = ms
        return result

    def mllm_client(self) -> MLLMClient:
        cfg = self.cfg
        if cfg.matcher == "replay":
            log_path = cfg.path(cfg.replay_log)
            with open(log_path) as f:
                first = json.loads(f.readline())
            model = first["request"]["model"]
            return MLLMClient(ReplayTransport(log_path), model=model, sleep=lambda s: None)
        session = self.out / "mllm_session.jsonl"
        if self.transport is not None:
            model = os.environ.get("MLLM_MODEL", DEFAULT_MODEL)
            return MLLMClient(self.transport, model=model, log_path=session)
        return MLLMClient.from_env(log_path=session)


# ------------------------------------------------------------------------- stages


def stage_render(ctx: RunContext) -> None:
    cfg, mesh, diffuse = ctx.cfg, ctx.mesh(), ctx.diffuse()
    cams = make_camera_ring(cfg.views, mesh, cfg.resolution, elevation=math.radians(cfg.elevation))
    if cfg.top_view:
        cams.append(top_down_camera(mesh, cfg.resolution))
    d = ctx.out / "render"
    d.mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(cams):
        r = rasterize(mesh, diffuse, cam)
        write_image(d / f"view{k}.png", r.color)
        r.gbuffer.to_npz(d / f"view{k}_gbuffer.npz")
        if cfg.dump_gbuffer:
            _dump_gbuffer(r, d / "gbuffer", k)
    (d / "cameras.json").write_text(json.dumps({"cameras": [c.to_dict() for c in cams]},
                                               indent=2) + "\n")


def _dump_gbuffer(r: RenderOutput, d: Path, k: int) -> None:
    gb = r.gbuffer
    cov = gb.covered
    face = np.where(cov, (gb.face_id % 251 + 4) / 255.0, 0.0)
    write_image(d / f"view{k}_face.png", face)
    write_image(d / f"view{k}_bary.png", gb.bary * cov[..., None])
    uv = np.concatenate([gb.uv, np.zeros(gb.shape + (1,))], axis=-1) * cov[..., None]
    write_image(d / f"view{k}_uv.png", uv, deep=True)
    depth = np.where(cov, gb.depth, 0.0)
    if cov.any():
        depth = np.where(cov, depth / depth[cov].max(), 0.0)
    write_image(d / f"view{k}_depth.exr", depth)


def stage_segment(ctx: RunContext) -> None:
    cfg = ctx.cfg
    d = ctx.out / "segment"
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("view*_region*.png"):
        old.unlink()
    meta = {"views": {}}
    for k, r in enumerate(ctx.renders()):
        if cfg.mask_dir is not None:
            masks = load_masks(cfg.mask_dir, k, r.gbuffer, color=r.color)
        else:
            masks = fallback_segment(r, k_max=cfg.k_max, seed=cfg.seed,
                                     merge_fraction=cfg.merge_fraction, view_id=k)
        masks, dropped = filter_masks(masks, foreground_count=int(r.foreground.sum()),
                                      dust_fraction=cfg.dust_fraction, color=r.color,
                                      return_dropped=True)
        save_masks(masks, d)
        meta["views"][str(k)] = [
            {"label": m.label, "pixels": m.pixel_count,
             "mean_rgb": [round(float(c), 6) for c in m.mean_diffuse_rgb]} for m in masks]
        meta.setdefault("dropped", {})[str(k)] = len(dropped)
    (d / "regions.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def stage_annotate(ctx: RunContext) -> None:
    d = ctx.out / "annotate"
    d.mkdir(parents=True, exist_ok=True)
    masks = ctx.masks()
    marks = {}
    for k, r in enumerate(ctx.renders()):
        ann = annotate_som(r, masks[k])
        (d / f"view{k}_som.png").write_bytes(ann.png_bytes())
        marks[str(k)] = [{"label": lab, "anchor": list(map(int, a))} for lab, a in ann.marks]
    (d / "marks.json").write_text(json.dumps(marks, indent=2, sort_keys=True) + "\n")


def stage_match(ctx: RunContext) -> None:
    cfg, index = ctx.cfg, ctx.library()
    d = ctx.out / "match"
    d.mkdir(parents=True, exist_ok=True)
    masks = ctx.masks()
    results = []
    if cfg.matcher == "offline":
        for k in sorted(masks):
            results += [matcher_mod.match_region_offline(m, index) for m in masks[k]]
    else:
        marks = json.loads(ctx.need("annotate/marks.json").read_text())
        session = ctx.out / "mllm_session.jsonl"
        if cfg.matcher == "mllm" and session.exists():
            session.unlink()
        client = ctx.mllm_client()
        hint = cfg.object_hint
        if hint and hint.lower().endswith(".png"):
            hint = matcher_mod.describe_reference(client, cfg.path(hint).read_bytes())
        for k in sorted(masks):
            if not masks[k]:
                continue
            img = read_image(ctx.need(f"annotate/view{k}_som.png"))
            ann = AnnotatedImage(img, [(m["label"], tuple(m["anchor"])) for m in marks[str(k)]],
                                 view_id=k)
            results += matcher_mod.match_regions_mllm(client, ann, masks[k], index,
                                                      object_hint=hint)
    results.sort(key=lambda r: (r.view_id, r.label))
    matcher_mod.write_report(results, d / "match_report.json")


def _load_uv_masks(ctx: RunContext) -> dict:
    with np.load(ctx.need("backproject/uv_masks.npz")) as z:
        keys = sorted(tuple(map(int, n.split("_")[1:3])) for n in z.files if n.startswith("m_"))
        return {k: UVMask(z[f"m_{k[0]}_{k[1]}"], z[f"d_{k[0]}_{k[1]}"], k[0], k[1])
                for k in keys}


def stage_backproject(ctx: RunContext) -> None:
    d = ctx.out / "backproject"
    d.mkdir(parents=True, exist_ok=True)
    tex_h, tex_w = ctx.diffuse().shape
    occ = build_occupancy(ctx.mesh(), (tex_w, tex_h))
    masks = ctx.masks()
    arrays = {}
    for k, r in enumerate(ctx.renders()):
        for m in masks[k]:
            uvm = backproject_mask(m, r.gbuffer, (tex_w, tex_h), occupancy=occ)
            arrays[f"m_{k}_{m.label}"] = uvm.mask
            arrays[f"d_{k}_{m.label}"] = uvm.depth
    np.savez_compressed(d / "uv_masks.npz", occupancy=occ, **arrays)


def stage_reconcile(ctx: RunContext) -> None:
    d = ctx.out / "reconcile"
    d.mkdir(parents=True, exist_ok=True)
    results = matcher_mod.read_report(ctx.need("match/match_report.json"))
    uv = _load_uv_masks(ctx)
    merged = matcher_mod.reconcile_cross_view(results, {k: v.mask for k, v in uv.items()})
    matcher_mod.write_report(merged, d / "match_report.json")


def stage_merge(ctx: RunContext) -> None:
    d = ctx.out / "merge"
    d.mkdir(parents=True, exist_ok=True)
    results = matcher_mod.read_report(ctx.need("reconcile/match_report.json"))
    uv = _load_uv_masks(ctx)
    with np.load(ctx.need("backproject/uv_masks.npz")) as z:
        occ = z["occupancy"]
    labeled = [(uv[(r.view_id, r.label)], r.material_id) for r in results
               if (r.view_id, r.label) in uv]
    part = merge_views(labeled, occ)
    part.save(d / "partition.png")


def stage_refine(ctx: RunContext) -> None:
    d = ctx.out / "refine"
    d.mkdir(parents=True, exist_ok=True)
    part = PartitionMap.load(ctx.need("merge/partition.png"))
    refined = refine_missing(part, ctx.diffuse())
    refined.save(d / "partition.png")
    if ctx.cfg.dump_partition:
        index = ctx.library()
        colors = {m: index[m].mean_diffuse_rgb for m in refined.legend if m in index}
        write_image(d / "partition_preview.png", refined.preview(colors))
        write_image(d / "partition_initial_preview.png", part.preview(colors))


def stage_estimate(ctx: RunContext) -> None:
    d = ctx.out / "estimate"
    d.mkdir(parents=True, exist_ok=True)
    part = PartitionMap.load(ctx.need("refine/partition.png"))
    svbrdf = SVBRDFEstimator().fit(ctx.library()).predict(ctx.diffuse(), part)
    np.savez_compressed(d / "svbrdf.npz", **{r: svbrdf[r].data for r in SVBRDF_ROLES})
    if ctx.cfg.dump_partition:
        part.save(d / "provenance.png")


def stage_export(ctx: RunContext) -> dict:
    with np.load(ctx.need("estimate/svbrdf.npz")) as z:
        maps = {r: TextureMap(z[r], r) for r in SVBRDF_ROLES}
    stem = Path(ctx.cfg.mesh).stem
    return export_bundle(ctx.mesh(), SVBRDFSet(maps), ctx.out / "bundle", stem=stem,
                         deep=ctx.cfg.deep, diffuse=ctx.diffuse())


STAGE_FUNCS = {name: globals()[f"stage_{name}"] for name in STAGES}


def _check_mllm_ready(ctx: RunContext) -> None:
    if ctx.cfg.matcher == "mllm" and ctx.transport is None and not os.environ.get("MLLM_API_KEY"):
        raise AuthError("matcher=mllm needs MLLM_API_KEY (or use matcher=replay)")


def _exec(ctx: RunContext, name: str):
    t0 = time.perf_counter()
    try:
        result = STAGE_FUNCS[name](ctx)
    except (MLLMError, MissingPriorArtifact, ConfigError):
        raise
    except MatforgeError as exc:
        raise StageError(name, exc) from exc
    except (OSError, ValueError) as exc:
        raise StageError(name, exc) from exc
    ctx.timings[name] = round(time.perf_counter() - t0, 4)
    log.info("stage %s done in %.2fs", name, ctx.timings[name])
    return result


def _region_table(ctx: RunContext) -> list[dict]:
    path = ctx.out / "reconcile" / "match_report.json"
    if not path.exists():
        return []
    return [{"view": r.view_id, "label": r.label, "material": r.material_id, "source": r.source}
            for r in matcher_mod.read_report(path)]


def run_pipeline(cfg: PipelineConfig, transport=None) -> tuple[int, dict]:
    """Run every stage in order. Returns (exit code, run manifest)."""
    ctx = RunContext(cfg, transport=transport)
    manifest = {"status": "error", "stages": ctx.timings}
    try:
        cfg.validate()
        _check_mllm_ready(ctx)
        ctx.out.mkdir(parents=True, exist_ok=True)
        bundle = None
        for name in STAGES:
            bundle = _exec(ctx, name)
        manifest.update(status="ok", bundle=bundle, regions=_region_table(ctx))
        code = EXIT_OK
    except ConfigError as exc:
        manifest["error"] = str(exc)
        code = EXIT_CONFIG
    except MLLMError as exc:
        manifest["error"] = f"MLLM: {exc}"
        code = EXIT_MLLM
    except (StageError, MissingPriorArtifact) as exc:
        manifest["error"] = str(exc)
        code = EXIT_STAGE
    if ctx.out.is_dir():
        (ctx.out / "run_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if code:
        log.error("%s", manifest.get("error"))
    return code, manifest


def run_stage(name: str, cfg: PipelineConfig, transport=None) -> int:
    """Run exactly one stage against the artifact directory ``cfg.output``."""
    if name not in STAGE_FUNCS:
        log.error("unknown stage %r; choose from %s", name, ", ".join(STAGES))
        return EXIT_CONFIG
    ctx = RunContext(cfg, transport=transport)
    try:
        cfg.validate()
        if name == "match":
            _check_mllm_ready(ctx)
        ctx.out.mkdir(parents=True, exist_ok=True)
        _exec(ctx, name)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except MLLMError as exc:
        log.error("MLLM: %s", exc)
        return EXIT_MLLM
    except (StageError, MissingPriorArtifact) as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    return EXIT_OK
