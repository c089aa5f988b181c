"""Command-line entry point: ``matforge run | stage | library | fixtures``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

from .errors import ConfigError, MatforgeError, MLLMError
from .pipeline import EXIT_CONFIG, EXIT_MLLM, EXIT_STAGE, STAGES, PipelineConfig
from .pipeline import run_pipeline, run_stage


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", required=True, help="pipeline config JSON")
    p.add_argument("--views", type=int)
    p.add_argument("--res", dest="resolution", type=int, help="render resolution in pixels")
    p.add_argument("--elevation", type=float, help="camera elevation in degrees")
    p.add_argument("--top-view", action="store_true", default=None,
                   help="add a top-down view to the camera ring")
    p.add_argument("--matcher", choices=["offline", "mllm", "replay"])
    p.add_argument("--replay-log", help="session log to replay (matcher=replay)")
    p.add_argument("--masks", help="'fallback' or 'files:<dir>'")
    p.add_argument("--object-hint", help="object description prepended to matcher prompts")
    p.add_argument("-o", "--output", help="artifact / output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-gbuffer", action="store_true", default=None)
    p.add_argument("--dump-partition", action="store_true", default=None)
    p.add_argument("--deep", action="store_true", default=None, help="write 16-bit PNG maps")


def _config(args) -> PipelineConfig:
    keys = ("views", "resolution", "elevation", "top_view", "matcher", "replay_log", "masks",
            "object_hint", "output", "seed", "dump_gbuffer", "dump_partition", "deep")
    return PipelineConfig.from_file(args.config, **{k: getattr(args, k) for k in keys})


def _cmd_run(args) -> int:
    code, manifest = run_pipeline(_config(args))
    print(json.dumps({k: manifest[k] for k in ("status", "stages", "error") if k in manifest}))
    return code


def _cmd_stage(args) -> int:
    if args.name not in STAGES:
        print(f"unknown stage {args.name!r}; choose from: {', '.join(STAGES)}", file=sys.stderr)
        return EXIT_CONFIG
    return run_stage(args.name, _config(args))


def _cmd_library_ingest(args) -> int:
    from .library import build_index, ingest_material, material_dirs

    root = Path(args.dir)
    dirs = material_dirs(root)
    if not dirs:
        print(f"no material directories under {root}", file=sys.stderr)
        return EXIT_STAGE
    index = build_index(ingest_material(d) for d in dirs)
    manifest = root / "library.json"
    if not manifest.exists():
        manifest.write_text(json.dumps(
            {"materials": [Path(index[m].path).name for m in index.records]}, indent=2) + "\n")
    summary = {"materials": len(index), "types": index.counts,
               "subcategories": {t: {s: len(v) for s, v in subs.items()}
                                 for t, subs in index.tree.items()}}
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_library_caption(args) -> int:
    from .fixtures import uv_sphere
    from .library import caption_material, load_library, store_caption
    from .mllm_client import MLLMClient
    from .render import make_camera_ring, shade_preview

    index = load_library(args.dir)
    client = MLLMClient.from_env(log_path=Path(args.dir) / "caption_session.jsonl")
    sphere = uv_sphere()
    cam = make_camera_ring(1, sphere, 256, elevation=0.3)[0]
    groups = defaultdict(list)
    for rec in index.records.values():
        groups[(rec.major_type, rec.subcategory)].append(rec)
    for (_, sub), recs in sorted(groups.items()):
        for start in range(0, len(recs), 8):
            batch = recs[start:start + 8]
            images = [
                shade_preview(sphere, _preview_maps(r), cam, light_dir=(0.4, 0.6, 0.7),
                              diffuse=r.key_diffuse()).clip(0, 1)
                for r in batch
            ]
            for rec, caption in zip(batch, caption_material(client, images, sub)):
                store_caption(rec.path, caption)
                print(f"{rec.id}: {caption}")
    return 0


def _preview_maps(rec) -> dict:
    from .estimator.core import default_map

    maps = dict(rec.maps)
    for role in ("normal", "roughness", "metalness"):
        if role not in maps:
            maps[role] = default_map(role, rec.resolution)
    return maps


def _cmd_fixtures(args) -> int:
    from .fixtures import write_fixtures

    print(json.dumps(write_fixtures(args.dir, tex_size=args.tex_size), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matforge",
                                     description="PBR material maps from a diffuse texture")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the whole pipeline")
    _add_overrides(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("stage", help="run one stage against an artifact directory")
    p.add_argument("name", help=" | ".join(STAGES))
    _add_overrides(p)
    p.set_defaults(func=_cmd_stage)

    lib = sub.add_parser("library", help="material library tools")
    lib_sub = lib.add_subparsers(dest="library_command", required=True)
    p = lib_sub.add_parser("ingest", help="validate and index a library directory")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_library_ingest)
    p = lib_sub.add_parser("caption", help="caption materials with the MLLM")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_library_caption)

    p = sub.add_parser("fixtures", help="write the cube/sphere fixtures and toy library")
    p.add_argument("dir")
    p.add_argument("--tex-size", type=int, default=256)
    p.set_defaults(func=_cmd_fixtures)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MLLMError as exc:
        print(f"MLLM error: {exc}", file=sys.stderr)
        return EXIT_MLLM
    except MatforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
