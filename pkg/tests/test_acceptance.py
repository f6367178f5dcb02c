"""Acceptance criteria A1-A10.

Each test prints one ``A<n> PASS|FAIL`` line with the measured numbers.
A5-A7 share one set of toy training runs (about five minutes on a CPU).
"""
import time

import numpy as np
import pytest

from nanoflownet import analysis, flowio, ops, quant, weights
from nanoflownet.control import ControllerConfig, ControllerState, flow_balance_error, yaw_rate
from nanoflownet.losses import endpoint_error
from nanoflownet.ops import ConvParams
from nanoflownet.sim import (EpisodeConfig, cluttered_world, count_avoidances, open_world,
                             random_start, run_episode)
from nanoflownet.stdc import build_nanoflownet, nanoflownet_config, nanoflownet_s_config
from nanoflownet.synthetic import SyntheticCfg, generate_synthetic
from nanoflownet.train import TrainConfig, evaluate, grad_check, make_batch, split_indices, train
from oracles import (attention_loop, avg_pool_loop, conv_dense_loop, conv_depthwise_loop,
                     conv_pointwise_loop, upsample_loop)

TARGET_PARAMS = {"nanoflownet": 170_881, "nanoflownet-s": 46_749}

# toy scale used for A5-A7
TOY_H, TOY_W = 48, 64
TOY_DATA = SyntheticCfg(height=TOY_H, width=TOY_W, max_displacement=3, octaves=(12, 6))
TOY_SAMPLES = 300
TOY_EPOCHS = 30
HELD_OUT_SEED = 1000
SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(tag, ok, detail):
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


# ---------------------------------------------------------------- A1


def test_a1_kernel_oracles(report):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = {k: 0.0 for k in ("dense", "depthwise", "pointwise", "avgpool", "upsample", "attention")}
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 17, size=2))
        cin, cout = (int(v) for v in rng.integers(1, 9, size=2))
        k = int(rng.choice([1, 3]))
        s = int(rng.choice([1, 2]))
        x = rng.normal(size=(1, h, w, cin))
        wd, b = rng.normal(size=(k, k, cin, cout)), rng.normal(size=cout)
        wdw, bdw = rng.normal(size=(k, k, cin)), rng.normal(size=cin)
        wp = rng.normal(size=(1, 1, cin, cout))
        wa, ba = rng.normal(size=(cin, cin)), rng.normal(size=cin)
        oh, ow = int(rng.integers(h, 17)), int(rng.integers(w, 17))
        pairs = {
            "dense": (ops.conv2d_dense(x, ConvParams(wd, b, s)), conv_dense_loop(x, wd, b, s)),
            "depthwise": (ops.conv2d_depthwise(x, ConvParams(wdw, bdw, s)), conv_depthwise_loop(x, wdw, bdw, s)),
            "pointwise": (ops.conv2d_pointwise(x, ConvParams(wp, b, s)), conv_pointwise_loop(x, wp, b, s)),
            "avgpool": (ops.avg_pool(x, 3, s), avg_pool_loop(x, 3, s)),
            "upsample": (ops.bilinear_upsample(x, oh, ow), upsample_loop(x, oh, ow)),
            "attention": (ops.channel_attention(x, ConvParams(wa, ba)), attention_loop(x, wa, ba)),
        }
        for name, (got, ref) in pairs.items():
            assert got.shape == ref.shape, name
            worst[name] = max(worst[name], float(np.max(np.abs(got - ref))))
    dt = time.time() - t0
    ok = max(worst.values()) <= 1e-5 and dt < 60
    report("A1", ok, "max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- A2


def test_a2_gradient_check(report):
    t0 = time.time()
    g = build_nanoflownet(nanoflownet_s_config(input_height=16, input_width=16), rng=0)
    data = generate_synthetic(2, SyntheticCfg(height=16, width=16, octaves=(4,)), seed=0)
    x, flow, bnd = make_batch(data)
    rep = grad_check(g, x, flow, bnd, mode="motion-boundary", n_coords=200, tolerance=1e-3)
    dt = time.time() - t0
    ok = rep.ok and rep.checked >= 200 and dt < 300
    report("A2", ok, f"{rep.checked} coords, max rel err {rep.max_rel_error:.2e}, "
                     f"{len(rep.excluded_kinks)} kink coords excluded; {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- A3


def test_a3_strided_module_macs(report):
    rows = analysis.strided_redesign_report(nanoflownet_config())
    red = [r["module_reduction"] for r in rows]
    ok = red[0] >= 0.5 and all(r >= 0.1 for r in red[1:])
    report("A3", ok, "strided-module MAC reduction " + ", ".join(f"{r['stage']} {r['module_reduction']:.1%}"
                                                              for r in rows)
           + " (whole-stage: " + ", ".join(f"{r['stage_reduction']:.1%}" for r in rows) + ")")
    assert ok


# ---------------------------------------------------------------- A4


def test_a4_parameter_budget(report):
    parts, ok = [], True
    for name, factory in (("nanoflownet", nanoflownet_config), ("nanoflownet-s", nanoflownet_s_config)):
        rep = analysis.analyze(factory())
        n = rep["params_train_graph"]
        dev = (n - TARGET_PARAMS[name]) / TARGET_PARAMS[name]
        ok &= abs(dev) <= 0.10
        parts.append(f"{name} {n:,} vs {TARGET_PARAMS[name]:,} ({dev:+.1%}; "
                     f"inference graph {rep['params_inference_graph']:,})")
    report("A4", ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- A5-A7


@pytest.fixture(scope="module")
def toy_runs():
    data = generate_synthetic(TOY_SAMPLES, TOY_DATA, seed=0)
    held = generate_synthetic(100, TOY_DATA, seed=HELD_OUT_SEED)
    cfg = nanoflownet_s_config(input_height=TOY_H, input_width=TOY_W)
    runs = {}
    t0 = time.time()
    for seed in SEEDS:
        for mode in ("none", "motion-boundary"):
            g = build_nanoflownet(cfg, rng=seed)
            runs[seed, mode] = train(g, data, TrainConfig(epochs=TOY_EPOCHS, guidance_mode=mode, seed=seed))
    return {"data": data, "held": held, "cfg": cfg, "runs": runs, "seconds": time.time() - t0}


def test_a5_toy_training(toy_runs, report):
    r = toy_runs["runs"][0, "motion-boundary"]
    final = r.history[-1]["val_epe"]
    ratio = final / r.initial_val_epe
    ok = ratio <= 0.5
    report("A5", ok, f"{TOY_SAMPLES} samples, {TOY_EPOCHS} epochs: val EPE {r.initial_val_epe:.3f} -> "
                     f"{final:.3f} (ratio {ratio:.3f}, best {r.best_val_epe:.3f})")
    assert ok


def test_a6_guidance_ordering(toy_runs, report):
    held = toy_runs["held"]
    epe = {m: [evaluate(toy_runs["runs"][s, m].graph, held) for s in SEEDS]
           for m in ("none", "motion-boundary")}
    mean_none, mean_mb = np.mean(epe["none"]), np.mean(epe["motion-boundary"])
    gi = toy_runs["runs"][0, "motion-boundary"].graph.inference_graph()
    ui = toy_runs["runs"][0, "none"].graph.inference_graph()
    same = ([n.to_dict() for n in gi.nodes] == [n.to_dict() for n in ui.nodes]
            and {k: v.shape for k, v in gi.params.items()} == {k: v.shape for k, v in ui.params.items()})
    ok = mean_mb <= mean_none and same
    report("A6", ok, f"held-out EPE motion-boundary {mean_mb:.4f} {np.round(epe['motion-boundary'], 3).tolist()} "
                     f"vs none {mean_none:.4f} {np.round(epe['none'], 3).tolist()}; "
                     f"inference graphs identical: {same}; training {toy_runs['seconds']:.0f}s")
    assert ok


def test_a7_int8_quantization(toy_runs, report):
    t0 = time.time()
    data = toy_runs["data"]
    res = toy_runs["runs"][0, "motion-boundary"]
    tr_idx, va_idx = split_indices(len(data), 0.2, 0)
    calib = [make_batch([data[i] for i in tr_idx[k:k + 8]])[0] for k in range(0, 64, 8)]
    qg = quant.quantize_network(res.graph, calib)
    val = [data[i] for i in va_idx]
    xs = [make_batch(val[k:k + 10])[0] for k in range(0, len(val), 10)]
    s = quant.output_sqnr(res.graph, qg, xs)
    epe_f = evaluate(res.graph, val)
    epe_q = float(np.mean([endpoint_error(p, g) for k in range(0, len(val), 10)
                           for p, g in zip(qg.forward(xs[k // 10])["flow"], make_batch(val[k:k + 10])[1])]))
    degr = (epe_q - epe_f) / epe_f
    dt = time.time() - t0
    ok = s["mean_db"] >= 10 and s["mean_ratio"] >= 10 and degr <= 0.15 and dt < 600
    report("A7", ok, f"SQNR {s['mean_db']:.2f} dB (ratio {s['mean_ratio']:.1f}); EPE float {epe_f:.4f} "
                     f"int8 {epe_q:.4f} ({degr:+.1%}); {dt:.0f}s")
    assert ok


# ---------------------------------------------------------------- A8


def test_a8_controller(report):
    cmd, _ = yaw_rate(1.0, ControllerState(), 1 / 5.57)
    first = cmd == 0.0126
    odd = all(yaw_rate(-e, ControllerState(), 0.2)[0] == -yaw_rate(e, ControllerState(), 0.2)[0]
              for e in (0.5, 3.0, 40.0, 1e4))
    clamp = (yaw_rate(1e6, ControllerState(), 0.2)[0] == ControllerConfig().max_yaw_rate
             and yaw_rate(-1e6, ControllerState(), 0.2)[0] == -ControllerConfig().max_yaw_rate)
    flow = np.random.default_rng(0).normal(size=(112, 80, 2))
    mirrored = flow[:, ::-1] * np.array([-1.0, 1.0])
    sym = abs(flow_balance_error(np.concatenate([flow, mirrored], axis=1)))
    ok = first and odd and clamp and sym <= 1e-6
    report("A8", ok, f"first-sample 0.0126: {first}; odd symmetry: {odd}; clamp: {clamp}; "
                     f"|e_rl| of mirror-symmetric field {sym:.1e}")
    assert ok


# ---------------------------------------------------------------- A9


def test_a9_closed_loop(report):
    t0 = time.time()
    ctrl = ControllerConfig()
    open_res = []
    for s in range(5):
        tr = run_episode(random_start(open_world(), s), ctrl, EpisodeConfig(max_time=120.0, seed=s))
        open_res.append((tr.collided, tr.duration))
    clutter = []
    for s in range(5):
        tr = run_episode(random_start(cluttered_world(), s), ctrl, EpisodeConfig(max_time=60.0, seed=s))
        clutter.append((count_avoidances(tr), tr.collided))
    dt = time.time() - t0
    open_ok = all(not c and d >= 120.0 for c, d in open_res)
    good = sum(1 for n, c in clutter if n >= 3 and not c)
    ok = open_ok and good >= 3 and dt < 300
    report("A9", ok, f"open world collision-free 120s: {[not c for c, _ in open_res]}; "
                     f"cluttered avoidances per 60s: {[n for n, _ in clutter]} "
                     f"(collisions {[c for _, c in clutter]}), {good}/5 seeds >= 3; {dt:.0f}s")
    assert ok


# ---------------------------------------------------------------- A10


def test_a10_format_fidelity(tmp_path, report):
    rng = np.random.default_rng(7)
    flow = rng.normal(scale=20, size=(37, 53, 2)).astype(np.float32)
    flowio.save_flo(tmp_path / "a.flo", flow)
    flo_ok = flowio.load_flo(tmp_path / "a.flo").tobytes() == flow.tobytes()
    g = build_nanoflownet(nanoflownet_s_config(), rng=3)
    t = weights.graph_tensors(g)
    t["q"] = rng.integers(-128, 128, size=(3, 3, 8)).astype(np.int8)
    t["acc"] = rng.integers(-2**31, 2**31 - 1, size=9).astype(np.int32)
    weights.save(tmp_path / "m.nfnw", t)
    back = weights.load(tmp_path / "m.nfnw")
    nfnw_ok = list(back) == list(t) and all(
        back[k].dtype == t[k].dtype and back[k].shape == t[k].shape and back[k].tobytes() == t[k].tobytes()
        for k in t)
    a = generate_synthetic(5, SyntheticCfg(), seed=11)
    b = generate_synthetic(5, SyntheticCfg(), seed=11)
    data_ok = all(getattr(s, f).tobytes() == getattr(u, f).tobytes()
                  for s, u in zip(a, b) for f in ("frame0", "frame1", "flow", "boundary"))
    ok = flo_ok and nfnw_ok and data_ok
    report("A10", ok, f".flo bitwise: {flo_ok}; NFNW bitwise ({len(t)} tensors): {nfnw_ok}; "
                      f"dataset reproducible: {data_ok}")
    assert ok
