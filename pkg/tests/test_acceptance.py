"""Acceptance criteria 1-9. Each test records one PASS/FAIL line, printed in the terminal summary.

The training criteria share one standard-scene run per session. Set
``PIGAVATAR_ACCEPTANCE_CACHE`` to a directory to keep its checkpoints between
sessions.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from pigavatar import autodiff as ad
from pigavatar.anchor_graph import knn_adjacency
from pigavatar.autodiff import Tensor
from pigavatar.config import ExperimentConfig, apply_overrides
from pigavatar.decoders import SplatFrame, decode_all, make_heads
from pigavatar.experiments import run_ablations
from pigavatar.latent_field import make_grid, query
from pigavatar.linalg import graph_laplacian, lattice_laplacian, sobolev_cg
from pigavatar.losses import total_loss
from pigavatar.proxy import build_humanoid, make_attachments, pose_mesh, sample_surface, transport
from pigavatar.render import ALPHA_MIN, COV_FLOOR, SH_C0, composite, look_at, render_image
from pigavatar.rotations import random_quaternions
from pigavatar.synth import generate
from pigavatar.trainer import (checkpoint_bytes, evaluate, init_state, load_checkpoint, prepare_data,
                               save_checkpoint, state_from_bytes, time_render, train, write_csv, METRIC_FIELDS)

from fd import numerical_grad, rel_err

from criteria import report


# -- 1: gradient audit ----------------------------------------------------------

def _fd_check(loss, leaves):
    tensors = [Tensor(x, requires_grad=True) for x in leaves]
    grads = ad.grad(loss(*tensors), tensors)
    errs = []
    for k, base in enumerate(leaves):
        def f(v, k=k):
            args = list(leaves)
            args[k] = v
            return loss(*[Tensor(a) for a in args]).item()
        errs.append(rel_err(grads[k], numerical_grad(f, base)))
    return errs


def test_criterion_1_gradient_audit():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = {}

    # decoders: conditioning row -> every splat attribute
    heads = make_heads(6, 4, 3, rng, width=6, depth=2, model_width=4)
    for w in heads.parameters():
        w.data[:] = rng.normal(scale=0.5, size=w.shape)
    wts = [rng.normal(size=s) for s in [(3, 48), (3, 3), (3, 4), (3, 3), (3, 1)]]

    def dec_loss(y):
        outs = decode_all(heads, y)
        flat = [outs[0], *outs[1]]
        return sum((o * Tensor(w)).sum() for o, w in zip(flat, wts))

    worst["decoders"] = max(_fd_check(dec_loss, [rng.normal(size=(3, 6))]))

    # latent field query w.r.t. positions
    grid = make_grid(np.array([[-1.0] * 3, [1.0] * 3]), (3, 5), 4, init_scale=1.0, rng=rng)
    wq = rng.normal(size=(5, 4))
    worst["latent_field"] = max(_fd_check(lambda p: (query(grid, p) * Tensor(wq)).sum(),
                                          [rng.uniform(-0.9, 0.9, (5, 3))]))

    # transport w.r.t. anchor positions and pose
    body = build_humanoid()
    tri, bary = sample_surface(body.template_vertices, body.triangles, 6, rng)
    att = make_attachments(body.template_vertices, body.triangles, tri, bary)
    x0 = att.point + rng.normal(scale=2.0, size=att.point.shape)
    wt = rng.normal(size=(6, 3))

    def tr_loss(x, theta):
        out, _ = transport(pose_mesh(body, np.zeros(2), theta), body.triangles, att, x)
        return (out * Tensor(wt)).sum()

    worst["transport"] = max(_fd_check(tr_loss, [x0, rng.normal(scale=0.3, size=(9, 3))]))

    # rasterizer w.r.t. mu, q, s, o, c
    cam = look_at([0.0, 0.0, -100.0], [0.0, 0.0, 0.0], fx=100.0, width=16, height=16)
    n = 5
    leaves = [rng.uniform(-4, 4, (n, 3)), random_quaternions(n, rng), rng.uniform(1.5, 3.0, (n, 3)),
              rng.uniform(0.2, 0.9, (n, 1)), 0.1 * rng.normal(size=(n, 48))]
    wimg = rng.normal(size=(16, 16, 4))
    errs = _fd_check(lambda *a: (composite(SplatFrame(*a), cam) * Tensor(wimg)).sum(), leaves)
    worst["render"] = max(errs)

    # losses
    a = rng.uniform(0.1, 0.9, (1, 12, 12, 3))
    b = rng.uniform(0.0, 1.0, (1, 12, 12, 3))
    pix = np.zeros((1, 12, 12), dtype=bool)
    pix[:, 2:10, 1:11] = True
    worst["losses"] = max(_fd_check(lambda p: total_loss(p, b, pix)[0], [a]))

    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, max(worst.values()) < 1e-4 and elapsed < 120, f"(max rel err: {detail}; {elapsed:.1f}s)")


# -- 2: preconditioner oracle ---------------------------------------------------

def test_criterion_2_preconditioner_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    cases = {"grid 3^3": lattice_laplacian(3)}
    pts = rng.normal(size=(20, 3))
    cases["knn 20"] = graph_laplacian(knn_adjacency(pts, 4))
    errs = {"dense": 0.0, "constant": 0.0, "eigen": 0.0}
    lam = 2.0
    for L in cases.values():
        n = L.shape[0]
        A = np.eye(n) + lam * L.toarray()
        dense = np.linalg.inv(A @ A)
        g = rng.normal(size=(n, 3))
        errs["dense"] = max(errs["dense"], np.abs(sobolev_cg(L, lam, g) - dense @ g).max())
        c = np.full((n, 1), 0.7)
        errs["constant"] = max(errs["constant"], np.abs(sobolev_cg(L, lam, c) - c).max())
        rho, V = np.linalg.eigh(L.toarray())
        out = sobolev_cg(sp.csr_matrix(L), lam, V)
        errs["eigen"] = max(errs["eigen"], np.abs(out - V / (1.0 + lam * rho) ** 2).max())
    elapsed = time.perf_counter() - t0
    ok = errs["dense"] < 1e-6 and errs["constant"] < 1e-10 and errs["eigen"] < 1e-6 and elapsed < 10
    report(2, ok, "(" + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.2f}s)")


# -- 3: transport rigidity ------------------------------------------------------

def test_criterion_3_transport_rigidity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    body = build_humanoid()
    tri, bary = sample_surface(body.template_vertices, body.triangles, 500, rng)
    att = make_attachments(body.template_vertices, body.triangles, tri, bary)
    anchors = att.point + rng.normal(scale=3.0, size=att.point.shape)
    posed = pose_mesh(body, np.zeros(2), rng.normal(scale=0.3, size=(9, 3))).data
    x0, _ = transport(posed, body.triangles, att, anchors)
    rigid = 0.0
    for R in Rotation.random(50, random_state=103).as_matrix():
        u = rng.normal(scale=50.0, size=3)
        x1, _ = transport(posed @ R.T + u, body.triangles, att, anchors)
        rigid = max(rigid, np.abs(x1.data - (x0.data @ R.T + u)).max())
    rest, _ = transport(pose_mesh(body, np.zeros(2), np.zeros((9, 3))), body.triangles, att, anchors)
    ident = np.abs(rest.data - anchors).max()
    elapsed = time.perf_counter() - t0
    report(3, rigid < 1e-9 and ident < 1e-12 and elapsed < 10,
           f"(rigid {rigid:.1e}, rest {ident:.1e}; {elapsed:.2f}s)")


# -- 4: rasterizer oracle -------------------------------------------------------

def test_criterion_4_rasterizer_oracle():
    t0 = time.perf_counter()
    cam = look_at([0.0, 0.0, -100.0], [0.0, 0.0, 0.0], fx=100.0, width=64, height=64)
    sigma, o = 4.0, 0.8
    one = SplatFrame(Tensor([[0.0, 0.0, 0.0]]), Tensor([[1.0, 0, 0, 0]]), Tensor([[sigma] * 3]), Tensor([[o]]),
                     Tensor(np.concatenate([np.full((1, 3), 0.5 / SH_C0), np.zeros((1, 45))], axis=1)))
    im = render_image(one, cam)
    var = sigma ** 2 + COV_FLOOR  # focal length equals depth: one cm is one pixel
    yy, xx = np.mgrid[0:64, 0:64]
    ref = o * np.exp(-0.5 * ((xx - 31.5) ** 2 + (yy - 31.5) ** 2) / var)
    r = np.ceil(3.0 * np.sqrt(var))
    # the same contribution rules the rasterizer applies: 1/255 floor, 3-sigma box
    ref[(ref < ALPHA_MIN) | (np.abs(xx - 31.5) > r) | (np.abs(yy - 31.5) > r)] = 0.0
    foot = max(np.abs(im.alpha - ref).max(), np.abs(im.rgb[..., 0] - ref).max())

    cam9 = look_at([0.0, 0.0, -100.0], [0.0, 0.0, 0.0], fx=100.0, width=9, height=9)
    sh = np.zeros((2, 48))
    sh[0, :3] = (np.array([1.0, 0, 0]) - 0.5) / SH_C0
    sh[1, :3] = (np.array([0, 0, 1.0]) - 0.5) / SH_C0
    two = SplatFrame(Tensor([[0.0, 0.0, -10.0], [0.0, 0.0, 10.0]]), Tensor([[1.0, 0, 0, 0]] * 2),
                     Tensor([[0.5] * 3] * 2), Tensor([[0.5], [1.0]]), Tensor(sh))
    # front red at 0.5 over opaque blue: 0.5 red + (1 - 0.5) * 1.0 blue
    blend = np.abs(render_image(two, cam9).rgb[4, 4] - [0.5, 0.0, 0.5]).max()
    elapsed = time.perf_counter() - t0
    report(4, foot < 1e-3 and blend < 1e-6 and elapsed < 10,
           f"(footprint {foot:.1e}, blend {blend:.1e}; {elapsed:.2f}s)")


# -- shared standard-scene run --------------------------------------------------

def _cache_dir():
    d = os.environ.get("PIGAVATAR_ACCEPTANCE_CACHE")
    if d:
        Path(d).mkdir(parents=True, exist_ok=True)
        return Path(d)
    return None


def _trained(cfg, data, steps, name, start=None):
    """Train ``cfg`` for ``steps`` (from ``start`` if given), reusing a cached checkpoint when present."""
    cache = _cache_dir()
    path = cache / f"{name}.ckpt" if cache else None
    if path is not None and path.exists():
        return load_checkpoint(path), None, 0.0
    state = init_state(cfg, data) if start is None else state_from_bytes(checkpoint_bytes(start))
    t0 = time.perf_counter()
    history = train(state, data, steps)
    elapsed = time.perf_counter() - t0
    if path is not None:
        save_checkpoint(state, path)
    return state, history, elapsed


@pytest.fixture(scope="module")
def standard():
    cfg = ExperimentConfig()
    dataset = generate(cfg.scene)
    data = prepare_data(dataset, cfg)
    init = init_state(cfg, data)
    init_psnr = evaluate(init, data, "novel_view")["psnr"]
    half, h1, e1 = _trained(cfg, data, 1500, "full_1500")
    full, h2, e2 = _trained(cfg, data, 1500, "full_3000", start=half)
    history = (h1 or []) + (h2 or []) if h1 is not None and h2 is not None else None
    return {"cfg": cfg, "dataset": dataset, "data": data, "init_psnr": init_psnr, "half": half, "full": full,
            "history": history, "train_seconds": e1 + e2}


@pytest.mark.slow
def test_criterion_5_end_to_end_fit(standard):
    full, data = standard["full"], standard["data"]
    nv = evaluate(full, data, "novel_view")
    npose = evaluate(full, data, "novel_pose")
    gain = nv["psnr"] - standard["init_psnr"]
    gap = abs(npose["psnr"] - nv["psnr"])
    ok = nv["psnr"] >= 25.0 and gain >= 8.0 and gap <= 3.0
    minutes = standard["train_seconds"] / 60.0
    timing = (f"training {minutes:.1f} min on {os.cpu_count()} core(s)" if minutes
              else "training time not measured (cached)")
    report(5, ok, f"(novel view {nv['psnr']:.2f} dB, gain {gain:.2f} dB over init, novel pose "
                  f"{npose['psnr']:.2f} dB, gap {gap:.2f} dB; {timing}; 8-core budget not measurable here)")


@pytest.mark.slow
def test_loss_trend_on_standard_scene(standard):
    hist = standard["history"]
    if hist is None:
        pytest.skip("loss history unavailable for a cached run")
    losses = np.array([h["loss"] for h in hist])
    assert np.median(losses[:100]) > np.median(losses[-100:])


@pytest.mark.slow
def test_criterion_6_lod_behaviour(standard):
    t0 = time.perf_counter()
    full, data = standard["full"], standard["data"]
    L = full.anchors.num_lods
    psnrs = [evaluate(full, data, "novel_view", lod)["psnr"] for lod in range(1, L + 1)]
    times = [time_render(full, data, lod, repeats=7) for lod in range(1, L + 1)]
    spread = max(psnrs) - min(psnrs)
    faster = all(a < b for a, b in zip(times, times[1:]))
    elapsed = time.perf_counter() - t0
    report(6, spread < 1.5 and faster and elapsed < 300,
           f"(psnr by lod {', '.join(f'{p:.2f}' for p in psnrs)}; spread {spread:.2f} dB; render ms "
           f"{', '.join(f'{1e3 * t:.1f}' for t in times)}; {elapsed:.0f}s)")


@pytest.mark.slow
def test_criterion_7_structural_ablations(standard, tmp_path):
    t0 = time.perf_counter()
    cfg = apply_overrides(standard["cfg"], [("train.iterations", 1500)])
    rows = run_ablations(cfg, standard["dataset"], tmp_path, done={"full": standard["half"]})
    by = {r["variant"]: r for r in rows}
    ablated = [r for r in rows if r["variant"] != "full"]
    largest = max(ablated, key=lambda r: r["drop"])["variant"]
    beats = all(by["full"]["psnr"] > r["psnr"] for r in ablated)
    elapsed = time.perf_counter() - t0
    table = ", ".join(f"{r['variant']} {r['psnr']:.2f}" for r in rows)
    report(7, largest == "no_offsets" and beats,
           f"(1500 iterations; psnr {table}; largest drop: {largest}; {elapsed / 60:.1f} min)")


@pytest.mark.slow
def test_criterion_8_noise_robustness(standard):
    t0 = time.perf_counter()
    clean = evaluate(standard["full"], standard["data"], "novel_view")["psnr"]
    out = {}
    stable = True
    for sigma in (0.1, 0.25):
        cfg = apply_overrides(standard["cfg"], [("train.pose_noise", sigma)])
        data = prepare_data(standard["dataset"], cfg)
        try:
            state, hist, _ = _trained(cfg, data, 3000, f"noise_{sigma:g}")
        except FloatingPointError:
            stable = False
            out[sigma] = float("nan")
            continue
        if hist is not None:
            stable &= bool(np.all(np.isfinite([h["loss"] for h in hist])))
        out[sigma] = evaluate(state, data, "novel_view")["psnr"]
    elapsed = time.perf_counter() - t0
    ok = stable and abs(clean - out[0.1]) <= 1.5 and out[0.25] <= out[0.1]
    report(8, ok, f"(clean {clean:.2f}, sigma 0.1 {out[0.1]:.2f}, sigma 0.25 {out[0.25]:.2f} dB; stable {stable}; "
                  f"{elapsed / 60:.1f} min)")


def test_criterion_9_determinism_and_resume(tmp_path):
    t0 = time.perf_counter()
    cfg = apply_overrides(ExperimentConfig(), [("scene.frames", 6), ("train.iterations", 12)])
    dataset = generate(cfg.scene)
    data = prepare_data(dataset, cfg)
    csvs = []
    for run in range(2):
        state = init_state(cfg, data)
        train(state, data, 12)
        path = tmp_path / f"metrics{run}.csv"
        write_csv(path, [evaluate(state, data, "novel_view", lod) for lod in (1, 3)], METRIC_FIELDS)
        csvs.append(path.read_bytes())
    same_csv = csvs[0] == csvs[1]

    straight = init_state(cfg, data)
    h_straight = train(straight, data, 12)
    part = init_state(cfg, data)
    h_part = train(part, data, 6)
    save_checkpoint(part, tmp_path / "mid.ckpt")
    resumed = load_checkpoint(tmp_path / "mid.ckpt")
    h_resumed = train(resumed, data, 6)
    same_steps = [h["loss"] for h in h_straight] == [h["loss"] for h in h_part + h_resumed]
    same_state = checkpoint_bytes(straight) == checkpoint_bytes(resumed)
    elapsed = time.perf_counter() - t0
    report(9, same_csv and same_steps and same_state and elapsed < 600,
           f"(metrics csv identical {same_csv}, resumed losses identical {same_steps}, final state identical "
           f"{same_state}; {elapsed:.0f}s)")
