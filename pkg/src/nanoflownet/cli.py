"""Command-line entry point: ``nanoflownet <subcommand> ...``.

Exit codes: 0 success, 1 domain error, 2 usage error, 3 IO error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, flowio, quant, sim, synthetic, weights
from .control import ControllerConfig
from .graph import NonFiniteError
from .stdc import PRESETS, ConfigError, NetworkConfig, build_nanoflownet, stack_frames
from .train import TrainConfig, TrainingError, evaluate, make_batch, train

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
GUIDANCE = {"none": "none", "edge": "edge-detect", "motion": "motion-boundary"}

log = logging.getLogger("nanoflownet")


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def load_network_config(name: str, size: tuple[int, int] | None = None) -> NetworkConfig:
    """Preset name or path to a JSON config, optionally resized."""
    if name in PRESETS:
        cfg = PRESETS[name]()
    else:
        cfg = NetworkConfig.load(name)
    if size is not None:
        cfg.input_height, cfg.input_width = size
    cfg.validate()
    return cfg


def _load_graph(path):
    """Float graph or quantized graph from a checkpoint."""
    config, kind, tensors = weights.load_checkpoint(path)
    cfg = NetworkConfig.from_dict(config)
    if kind == "int8":
        return cfg, quant.quantized_from_tensors(cfg, tensors)
    g = build_nanoflownet(cfg, rng=None, training=False)
    weights.load_into_graph(g, tensors, strict=True)
    return cfg, g


def _write_csv(path, text: str) -> None:
    if path:
        flowio.atomic_write(path, text)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(a) -> int:
    h, w = a.size
    cfg = synthetic.SyntheticCfg(height=h, width=w, max_displacement=a.max_displacement)
    samples = synthetic.generate_synthetic(a.count, cfg, seed=a.seed)
    manifest = synthetic.save_dataset(samples, a.out, cfg, seed=a.seed)
    print(f"wrote {a.count} samples to {a.out} ({manifest.name})")
    return EXIT_OK


def cmd_train(a) -> int:
    data_dir = Path(a.data)
    if not (data_dir / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset manifest in {data_dir}")
    samples = synthetic.load_dataset(data_dir)
    if not samples:
        raise TrainingError("dataset is empty")
    size = samples[0].frame0.shape
    cfg = load_network_config(a.config, size)
    tcfg = TrainConfig(learning_rate=a.lr, batch_size=a.batch_size, epochs=a.epochs,
                       guidance_mode=GUIDANCE[a.guidance], lambda_detail=a.lambda_detail,
                       seed=a.seed, finetune_epochs=a.finetune_epochs)
    graph = build_nanoflownet(cfg, rng=a.seed, training=True)
    res = train(graph, samples, tcfg,
                progress=lambda r: log.info("epoch %d val_epe %.4f", r["epoch"], r["val_epe"]))
    out = Path(a.out)
    weights.save_checkpoint(out / "model.nfnw", weights.graph_tensors(res.graph), cfg.to_dict())
    flowio.atomic_write(out / "history.csv", res.history_csv())
    final = res.history[-1]["val_epe"] if res.history else res.initial_val_epe
    print(f"initial val EPE {res.initial_val_epe:.6f}")
    print(f"final val EPE {final:.6f}")
    print(f"best val EPE {res.best_val_epe:.6f} (epoch {res.best_epoch})")
    return EXIT_OK


def cmd_analyze(a) -> int:
    cfg = load_network_config(a.config, a.size)
    rep = analysis.analyze(cfg)
    print(analysis.format_report(rep))
    _write_csv(a.csv, analysis.report_csv(rep))
    return EXIT_OK


def _read_frame(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        return flowio.read_ppm(data).mean(axis=-1)
    return flowio.read_pgm(data)


def cmd_infer(a) -> int:
    cfg, g = _load_graph(a.checkpoint)
    f0, f1 = _read_frame(a.img0), _read_frame(a.img1)
    if f0.shape != f1.shape:
        raise ValueError(f"frame sizes differ: {f0.shape} vs {f1.shape}")
    if f0.shape != (cfg.input_height, cfg.input_width):
        raise ValueError(f"frames are {f0.shape}, network expects {(cfg.input_height, cfg.input_width)}")
    flow = g.forward(stack_frames(f0, f1))["flow"][0]
    flowio.save_flo(a.out, flow)
    if a.color:
        flowio.atomic_write(a.color, flowio.write_ppm(flowio.flow_to_color(flow)))
    print(f"wrote {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    if a.checkpoint:
        _, g = _load_graph(a.checkpoint)
        samples = synthetic.load_dataset(a.data)
        mean = evaluate(g, samples)
        print(f"mean EPE {mean:.6f} over {len(samples)} samples")
        _write_csv(a.csv, f"metric,value\nmean_epe,{mean:.8g}\n")
        return EXIT_OK
    if not (a.pred and a.gt):
        raise UsageError("eval needs --checkpoint/--data or --pred/--gt")
    rows, mean, text = flowio.evaluate_epe(a.pred, a.gt)
    print(f"mean EPE {mean:.6f} over {len(rows)} frames")
    _write_csv(a.csv, text)
    return EXIT_OK


def cmd_quantize(a) -> int:
    cfg, g = _load_graph(a.checkpoint)
    if isinstance(g, quant.QuantizedGraph):
        raise ValueError("checkpoint is already quantized")
    samples = synthetic.load_dataset(a.data)
    if not samples:
        raise ValueError("calibration dataset is empty")
    calib = samples[:a.calib_count]
    xs = [make_batch(calib[i:i + 8])[0] for i in range(0, len(calib), 8)]
    qg = quant.quantize_network(g, xs)
    weights.save_checkpoint(a.out, qg.tensors(), cfg.to_dict(), kind="int8")
    evals = samples[a.calib_count:] or samples
    xe = [make_batch(evals[i:i + 8])[0] for i in range(0, len(evals), 8)]
    rep = quant.output_sqnr(g, qg, xe)
    float_epe = evaluate(g, evals)
    q_epe = evaluate(qg, evals)
    print(f"SQNR {rep['mean_db']:.3f} dB (ratio {rep['mean_ratio']:.3f})")
    print(f"EPE float {float_epe:.6f} int8 {q_epe:.6f} ({(q_epe / float_epe - 1) * 100:+.2f}%)")
    _write_csv(a.csv, "metric,value\n"
               f"sqnr_db,{rep['mean_db']:.8g}\nsqnr_ratio,{rep['mean_ratio']:.8g}\n"
               f"epe_float,{float_epe:.8g}\nepe_int8,{q_epe:.8g}\n")
    return EXIT_OK


def cmd_simulate(a) -> int:
    if a.world in sim.WORLD_PRESETS:
        world = sim.WORLD_PRESETS[a.world]()
    else:
        world = sim.World.load(a.world)
    if a.random_start:
        world = sim.random_start(world, a.seed)
    network = None
    if a.flow == "network":
        if not a.checkpoint:
            raise UsageError("--flow network needs --checkpoint")
        cfg, network = _load_graph(a.checkpoint)
        cam = sim.CameraModel()
        if (cfg.input_height, cfg.input_width) != (cam.height, cam.width):
            raise ValueError(f"network input must be {cam.height}x{cam.width} for the simulated camera")
    ccfg = ControllerConfig(k_p=a.kp, k_d=a.kd, forward_velocity=a.speed,
                            oscillation_amplitude=a.osc_amplitude,
                            oscillation_frequency=a.osc_frequency)
    ecfg = sim.EpisodeConfig(max_time=a.time, flow_source=a.flow, derotate=not a.no_derotate,
                             flow_noise=a.flow_noise, seed=a.seed)
    traj = sim.run_episode(world, ccfg, ecfg, network)
    traj.save_csv(a.out)
    if a.plot:
        flowio.atomic_write(a.plot, flowio.write_ppm(traj.plot()))
    n = sim.count_avoidances(traj)
    print(f"flew {traj.duration:.2f} s, collision={traj.collided}, avoidances={n}")
    return EXIT_OK


def cmd_visualize(a) -> int:
    flow = flowio.load_flo(a.flow).astype(np.float64)
    flowio.atomic_write(a.out, flowio.write_ppm(flowio.flow_to_color(flow, a.max_mag)))
    print(f"wrote {a.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nanoflownet", description="Tiny optical-flow CNN toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "Generate a synthetic flow dataset.")
    sp.add_argument("--count", type=int, required=True, help="number of samples")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--size", type=_size, default=(112, 160), help="HxW (default 112x160)")
    sp.add_argument("--max-displacement", type=float, default=4.0, help="max object shift in px")

    sp = add("train", cmd_train, "Train a network on a generated dataset.")
    sp.add_argument("--config", default="nanoflownet-s", help="preset name or JSON config path")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--guidance", choices=sorted(GUIDANCE), default="motion", help="detail guidance")
    sp.add_argument("--out", required=True, help="output directory (model.nfnw, history.csv)")
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--finetune-epochs", type=int, default=0)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--lambda-detail", type=float, default=1.0)

    sp = add("analyze", cmd_analyze, "Parameter and MAC report, original vs modified strided modules.")
    sp.add_argument("--config", default="nanoflownet", help="preset name or JSON config path")
    sp.add_argument("--size", type=_size, default=None, help="override input HxW")
    sp.add_argument("--csv", default=None, help="also write the report as CSV")

    sp = add("infer", cmd_infer, "Estimate flow for one frame pair.")
    sp.add_argument("--checkpoint", required=True, help="float or int8 NFNW checkpoint")
    sp.add_argument("--img0", required=True, help="first frame (PGM/PPM)")
    sp.add_argument("--img1", required=True, help="second frame (PGM/PPM)")
    sp.add_argument("--out", required=True, help="output .flo")
    sp.add_argument("--color", default=None, help="optional colour-coded PPM")

    sp = add("eval", cmd_eval, "Mean EPE of a checkpoint on a dataset, or of .flo directories.")
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--data", default=None, help="dataset directory (with --checkpoint)")
    sp.add_argument("--pred", default=None, help="directory of predicted .flo files")
    sp.add_argument("--gt", default=None, help="directory of ground-truth .flo files")
    sp.add_argument("--csv", default=None)

    sp = add("quantize", cmd_quantize, "Int8 post-training quantization with an SQNR report.")
    sp.add_argument("--checkpoint", required=True, help="float checkpoint")
    sp.add_argument("--data", required=True, help="dataset for calibration and evaluation")
    sp.add_argument("--calib-count", type=int, default=32, help="calibration samples (taken first)")
    sp.add_argument("--out", required=True, help="output int8 checkpoint")
    sp.add_argument("--csv", default=None)

    sp = add("simulate", cmd_simulate, "Closed-loop flow-balance avoidance episode.")
    sp.add_argument("--world", default="open", help="'open', 'cluttered' or a world JSON path")
    sp.add_argument("--flow", choices=["analytic", "network"], default="analytic")
    sp.add_argument("--checkpoint", default=None, help="network for --flow network")
    sp.add_argument("--time", type=float, default=120.0, help="max simulated seconds")
    sp.add_argument("--random-start", action="store_true", help="seeded start pose")
    sp.add_argument("--kp", type=float, default=0.0126)
    sp.add_argument("--kd", type=float, default=0.0018)
    sp.add_argument("--speed", type=float, default=0.2, help="forward speed m/s")
    sp.add_argument("--osc-amplitude", type=float, default=0.1, help="m")
    sp.add_argument("--osc-frequency", type=float, default=0.5, help="Hz")
    sp.add_argument("--flow-noise", type=float, default=0.0, help="Gaussian flow noise in px")
    sp.add_argument("--no-derotate", action="store_true", help="keep the yaw-induced flow")
    sp.add_argument("--out", required=True, help="trajectory CSV")
    sp.add_argument("--plot", default=None, help="optional top-view PPM")

    sp = add("visualize", cmd_visualize, "Colour-code a .flo file.")
    sp.add_argument("--flow", required=True, help="input .flo")
    sp.add_argument("--out", required=True, help="output PPM")
    sp.add_argument("--max-mag", type=float, default=None, help="saturation magnitude")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, flowio.FlowFormatError, weights.WeightsFormatError, json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, TrainingError, quant.QuantizationError, sim.WorldError,
            ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
