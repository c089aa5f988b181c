"""Acceptance suite. Each test prints one PASS/FAIL line and asserts it."""

import math
import time

import numpy as np
import pytest
from mocks import faithful_answerer
from verdicts import info, verdict

from matforge.estimator import HistogramEqualizer, PixelIndex, estimate
from matforge.fixtures import cube, sphere_diffuse, toy_material_maps, uv_sphere, write_fixtures
from matforge.library import MaterialRecord, build_index, load_library
from matforge.matcher import match_regions_mllm
from matforge.mesh_io import SVBRDF_ROLES, TextureMap
from matforge.mllm_client import MLLMClient, MockTransport
from matforge.partition import UNASSIGNED, PartitionMap, backproject_mask, build_occupancy
from matforge.pipeline import PipelineConfig, run_pipeline
from matforge.render import luminance, make_camera_ring, rasterize_gbuffer, shade_preview
from matforge.seg import AnnotatedImage, RegionMask


def _brute_nn(key, queries):
    d = ((queries[:, None, :] - key[None]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)  # first minimum = smallest index


# ---------------------------------------------------------------- 1. KD-tree


def test_kdtree_correctness_and_speed():
    rng = np.random.default_rng(2024)
    PixelIndex(rng.random((16, 3))).query(rng.random((4, 3)))  # JIT warm-up, not timed
    mismatches, elapsed = 0, 0.0
    for i in range(200):
        h, w = rng.integers(1, 65, size=2)
        key = rng.random((h * w, 3))
        if i % 2:
            key = np.round(key * 15) / 15  # duplicates and tied distances
        queries = rng.random((100, 3))
        t0 = time.perf_counter()
        got = PixelIndex(key).query(queries)
        elapsed += time.perf_counter() - t0
        mismatches += int((got != _brute_nn(key, queries)).sum())
    ok = mismatches == 0 and elapsed < 5.0
    assert verdict(1, ok, f"200 instances, {mismatches} index mismatches, {elapsed:.2f} s (< 5 s)")


# -------------------------------------------------------------- 2. performance


def _single_material(key_rgb):
    maps = toy_material_maps(4, size=key_rgb.shape[0])
    tex = {r: TextureMap(maps[r], r) for r in SVBRDF_ROLES}
    tex["diffuse"] = TextureMap(key_rgb, "diffuse")
    return build_index([MaterialRecord("key", "wood", "oak", "", tex)])


def test_transfer_1024_under_ten_seconds():
    rng = np.random.default_rng(7)
    n = 1024
    part = PartitionMap(np.zeros((n, n), dtype=np.int64), ["key"])
    small = PartitionMap(np.zeros((8, 8), dtype=np.int64), ["key"])
    # 8-bit uniform noise on both sides is the worst case: ~1M distinct key colors
    key = np.round(rng.random((n, n, 3)) * 255) / 255
    query = TextureMap(np.round(rng.random((n, n, 3)) * 255) / 255, "diffuse")
    lib = _single_material(key)
    estimate(TextureMap(query.data[:8, :8].copy(), "diffuse"), small, lib)  # warm-up
    t0 = time.perf_counter()
    estimate(query, part, lib)
    worst = time.perf_counter() - t0

    lib = _single_material(toy_material_maps(4, size=n)["diffuse"])
    t0 = time.perf_counter()
    estimate(TextureMap(sphere_diffuse(n), "diffuse"), part, lib)
    typical = time.perf_counter() - t0
    info(f"1024^2 transfer on textured inputs: {typical:.2f} s")
    assert verdict(2, worst <= 10.0, f"1024^2 noise query vs 1024^2 noise key: {worst:.2f} s"
                                     " (<= 10 s)")


# ------------------------------------------------------------ 3. identity


def _record_with_key(key_rgb, seed):
    maps = toy_material_maps(seed, size=key_rgb.shape[0])
    tex = {r: TextureMap(maps[r], r) for r in SVBRDF_ROLES}
    tex["diffuse"] = TextureMap(key_rgb, "diffuse")
    return MaterialRecord("m", "wood", "walnut", "", tex)


def _identity_diffs(rec):
    n = rec.maps["diffuse"].height
    part = PartitionMap(np.zeros((n, n), dtype=np.int64), ["m"])
    out = estimate(rec.maps["diffuse"], part, build_index([rec]))
    return out, {r: int((out[r].data != rec.maps[r].data).sum()) for r in SVBRDF_ROLES}


def test_identity_transfer_exact():
    rng = np.random.default_rng(3)
    n = 128
    # 8-bit key with pairwise distinct colors, so no two pixels tie after equalization
    codes = rng.choice(256 ** 3, size=n * n, replace=False)
    key = np.stack([codes // 65536, codes // 256 % 256, codes % 256], axis=-1) / 255.0
    eq = HistogramEqualizer().fit_transform(key)
    distinct = len(np.unique(eq, axis=0)) == n * n
    _, diffs = _identity_diffs(_record_with_key(key.reshape(n, n, 3), 6))

    # toy material: its colors repeat, so duplicated pixels resolve to the first occurrence
    toy = _record_with_key(toy_material_maps(6, size=n)["diffuse"], 6)
    out, toy_diffs = _identity_diffs(toy)
    flat = HistogramEqualizer().fit_transform(toy.maps["diffuse"].data.reshape(-1, 3))
    _, first = np.unique(flat, axis=0, return_index=True)
    owner = first[np.unique(flat, axis=0, return_inverse=True)[1].ravel()]
    explained = all(np.array_equal(out[r].data.reshape(len(flat), -1),
                                   toy.maps[r].data.reshape(len(flat), -1)[owner])
                    for r in SVBRDF_ROLES)
    info(f"identity on a toy material with {len(first)} distinct equalized colors over "
         f"{len(flat)} texels: differing texels {toy_diffs}; all explained by the "
         f"smallest-index tie rule {explained}")

    ok = distinct and all(v == 0 for v in diffs.values()) and explained
    assert verdict(3, ok, f"key = query ({n}x{n}, distinct colors), differing texels per map "
                          f"{diffs}")


# ---------------------------------------------------------- 4. equalization


def test_equalization_properties():
    yy, xx = np.mgrid[:256, :256] / 255.0
    grad = (xx + yy) / 2.0
    img = np.stack([grad, np.sqrt(grad), 1.0 - grad ** 2], axis=-1).reshape(-1, 3)
    out = HistogramEqualizer().fit_transform(img)
    worst_abs = worst_rel = 0.0
    for c in range(3):
        mass = np.histogram(out[:, c], bins=16, range=(0.0, 1.0))[0] / len(out)
        worst_abs = max(worst_abs, float(np.abs(mass - 1 / 16).max()))
        worst_rel = max(worst_rel, float(np.abs(mass * 16 - 1).max()))
    info(f"16-bucket deviation relative to 1/16: {worst_rel:.3f}")

    const = np.full((4096, 3), 0.37)
    const_ok = np.array_equal(HistogramEqualizer().fit_transform(const), const)

    rng = np.random.default_rng(11)
    X = rng.random((100_000, 3))
    eq = HistogramEqualizer().fit(X)
    a, b = rng.random((100_000, 3)), rng.random((100_000, 3))
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    monotone = bool((eq.transform(lo) <= eq.transform(hi)).all())

    ok = worst_abs <= 0.02 and const_ok and monotone
    assert verdict(4, ok, f"bucket mass deviation {worst_abs:.4f} (<= 0.02), constant preserved "
                          f"{const_ok}, monotone on 1e5 pairs {monotone}")


# ------------------------------------------------------- 5. back-projection


def _visible_front_facing(mesh, cam, gbuffer, size, rect):
    """Texels inside ``rect`` = (u0, u1, v0, v1) whose surface point faces and is seen by ``cam``.

    Texel centers are located in UV triangles by brute-force barycentrics, lifted
    to 3D, tested against the face normal and then against the z-buffer.
    """
    u0, u1, v0, v1 = rect
    fp, fuv, fn = mesh.face_positions(), mesh.face_uvs(), mesh.face_normals()
    out = np.zeros((size, size), bool)
    eye = np.asarray(cam.eye)
    for f in range(mesh.n_faces):
        p = np.stack([fuv[f, :, 0] * size, (1.0 - fuv[f, :, 1]) * size], axis=1)
        c0, c1 = max(int(p[:, 0].min()), 0), min(int(math.ceil(p[:, 0].max())), size - 1)
        r0, r1 = max(int(p[:, 1].min()), 0), min(int(math.ceil(p[:, 1].max())), size - 1)
        rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        x, y = cc + 0.5, rr + 0.5
        (x0, y0), (x1, y1), (x2, y2) = p
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0:
            continue
        l0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) / area
        l1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) / area
        l2 = 1.0 - l0 - l1
        u, v = x / size, 1.0 - y / size
        sel = (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)
        if not sel.any():
            continue
        pts = np.stack([l0[sel], l1[sel], l2[sel]], axis=1) @ fp[f]
        facing = (eye - pts) @ fn[f] > 0
        scr, z = cam.project(pts)
        px = np.clip(np.floor(scr[:, 0]).astype(int), 0, cam.width - 1)
        py = np.clip(np.floor(scr[:, 1]).astype(int), 0, cam.height - 1)
        seen = z <= gbuffer.depth[py, px] * 1.01
        out[rr[sel][facing & seen], cc[sel][facing & seen]] = True
    return out


def _round_trip_iou(mesh, cam, size, rect):
    gb = rasterize_gbuffer(mesh, cam)
    occ = build_occupancy(mesh, size)
    recovered = backproject_mask(RegionMask(0, 1, gb.covered), gb, size, occupancy=occ).mask
    u0, u1, v0, v1 = rect
    painted = np.zeros((size, size), bool)
    painted[int(round((1 - v1) * size)):int(round((1 - v0) * size)),
            int(round(u0 * size)):int(round(u1 * size))] = True
    truth = _visible_front_facing(mesh, cam, gb, size, rect) & painted
    rec = recovered & painted
    return (rec & truth).sum() / max((rec | truth).sum(), 1)


def test_backprojection_fidelity():
    size = 512
    sphere = uv_sphere()
    iou_sphere = _round_trip_iou(sphere, make_camera_ring(1, sphere, size)[0], size,
                                 (0.3, 0.8, 0.2, 0.8))
    box = cube()
    # 30 degree azimuth; the rectangle is the +z face's cell of the 3x2 atlas
    iou_cube = _round_trip_iou(box, make_camera_ring(12, box, size)[1], size,
                               (1 / 3, 2 / 3, 0.0, 0.5))
    iou_atlas = _round_trip_iou(box, make_camera_ring(12, box, size)[1], size, (0, 1, 0, 1))
    info(f"cube whole-atlas IoU at 30 deg (includes the grazing top face): {iou_atlas:.3f}")
    ok = iou_sphere >= 0.9 and iou_cube >= 0.9
    assert verdict(5, ok, f"UV-rectangle round-trip IoU sphere {iou_sphere:.3f}, "
                          f"cube {iou_cube:.3f} (>= 0.90)")


# ------------------------------------------------------------ 7. matcher


def test_hierarchical_matcher_faithful_mock(toy_index):
    rng = np.random.default_rng(77)
    ids = sorted(toy_index.records)
    planted = {label: ids[int(rng.integers(len(ids)))] for label in range(1, 21)}
    transport = MockTransport(faithful_answerer(toy_index, planted))
    client = MLLMClient(transport, model="mock", sleep=lambda s: None)
    masks = []
    for label in planted:
        m = np.zeros((80, 80), bool)
        m[(label - 1) * 4:(label - 1) * 4 + 4, :] = True
        masks.append(RegionMask(0, label, m, np.full(3, 0.5)))
    annotated = AnnotatedImage(np.full((80, 80, 3), 0.5),
                               [(lab, ((lab - 1) * 4 + 2, 40)) for lab in planted])
    results = match_regions_mllm(client, annotated, masks, toy_index, n_jobs=4)
    hits = sum(r.material_id == planted[r.label] and r.source == "mllm" for r in results)
    ok = hits == 20 and transport.calls == 60
    assert verdict(7, ok, f"{hits}/20 planted materials recovered with {transport.calls} prompts "
                          "(3 per region)")


# ------------------------------------------------- pipeline runs (6 and 8)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    write_fixtures(root)
    out = {"root": root}
    for name in ("cube", "sphere"):
        for tag, views in (("a", 3), ("b", 3), ("one", 1)):
            cfg = PipelineConfig.from_file(root / f"{name}.json", views=views,
                                           output=f"out_{name}_{tag}")
            code, _ = run_pipeline(cfg)
            out[(name, tag)] = (code, cfg.out)
    return out


def _map_bytes(out_dir):
    return {p.name: p.read_bytes() for p in sorted((out_dir / "bundle").glob("*.png"))}


def test_partition_completeness(runs):
    details, ok = [], True
    for name in ("cube", "sphere"):
        for tag in ("a", "one"):
            code, out = runs[(name, tag)]
            if code != 0:
                ok = False
                details.append(f"{name}/{tag} exit {code}")
                continue
            merged = PartitionMap.load(out / "merge" / "partition.png")
            refined = PartitionMap.load(out / "refine" / "partition.png")
            before = merged.unassigned.sum() / merged.occupied.sum()
            after = int((refined.grid[refined.occupied] == UNASSIGNED).sum())
            ok &= after == 0
            if tag == "one":
                ok &= before >= 0.3
            details.append(f"{name} {'1' if tag == 'one' else '3'}-view: "
                           f"{before:.0%} -> {after} unassigned")
    assert verdict(6, ok, "; ".join(details))


def test_end_to_end_determinism(runs):
    same = {}
    for name in ("cube", "sphere"):
        (ca, a), (cb, b) = runs[(name, "a")], runs[(name, "b")]
        same[name] = ca == cb == 0 and _map_bytes(a) == _map_bytes(b) != {}

    root = runs["root"]
    index = load_library(root / "toy_library")
    ids = sorted(index.records)
    transport = MockTransport(faithful_answerer(index, lambda label: ids[label % len(ids)]))
    rec_cfg = PipelineConfig.from_file(root / "sphere.json", matcher="mllm", output="out_rec")
    code_rec, manifest = run_pipeline(rec_cfg, transport=transport)
    rep_cfg = PipelineConfig.from_file(root / "sphere.json", matcher="replay", output="out_rep",
                                       replay_log=str(rec_cfg.out / "mllm_session.jsonl"))
    code_rep, _ = run_pipeline(rep_cfg)
    replay_same = (code_rec == code_rep == 0 and transport.calls > 0
                   and all(r["source"] == "mllm" for r in manifest["regions"])
                   and _map_bytes(rec_cfg.out) == _map_bytes(rep_cfg.out))
    ok = all(same.values()) and replay_same
    assert verdict(8, ok, f"offline reruns byte-identical {same}; MLLM record/replay identical "
                          f"{replay_same} ({transport.calls} recorded calls)")


# ----------------------------------------------------------- 9. preview note


def test_non_reproducible_metrics_and_preview_smoke():
    info("MLLM preference rates and the user study need a live vision model and human raters; "
         "they are not reproduced here and are replaced by criteria 1-8 plus this preview check")
    mesh = uv_sphere()
    cam = make_camera_ring(1, mesh, 128, elevation=0.0)[0]
    white = TextureMap(np.full((8, 8, 3), 0.8), "diffuse")
    # light at the mirror angle of the center pixel's facet: there h equals the normal
    gb = rasterize_gbuffer(mesh, cam)
    c = cam.height // 2
    f = gb.face_id[c, c]
    point = gb.bary[c, c] @ mesh.face_positions()[f]
    n = mesh.face_normals()[f]
    v = np.asarray(cam.eye) - point
    v /= np.linalg.norm(v)
    light = 2.0 * (n @ v) * n - v

    def maps(rough, metal):
        return {"normal": TextureMap(np.broadcast_to([0.5, 0.5, 1.0], (8, 8, 3)).copy(), "normal"),
                "roughness": TextureMap(np.full((8, 8), rough), "roughness"),
                "metalness": TextureMap(np.full((8, 8), metal), "metalness")}

    metal = shade_preview(mesh, maps(0.05, 1.0), cam, light, white)
    plain = shade_preview(mesh, maps(1.0, 0.0), cam, light, white)
    finite = bool(np.isfinite(metal).all() and np.isfinite(plain).all())
    ordered = luminance(metal[c, c]) > luminance(plain[c, c])
    ok = finite and metal.max() > 0 and ordered
    assert verdict(9, ok, f"non-reproducibility noted; preview renders finite {finite}, metal "
                          f"highlight above dielectric at mirror pixel {ordered}")
