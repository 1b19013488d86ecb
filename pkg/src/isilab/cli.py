"""Experiment runner: simulate, train, exit, latency, validate-config.

Every subcommand takes a flat key=value config file, runs deterministically
under the configured seeds and writes CSV with a comment line recording
the config hash, seed and package version.  Exit codes: 0 ok, 2 config
error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import __version__
from . import neural
from .channel import Constellation, ebn0_to_sigma2, snr_to_sigma2
from .config import ConfigError, ExperimentConfig, validate
from .detectors import bcjr_detect_batch, lmmse_detect, spa_detect
from .gnn import (GnnConfig, GraphRuntime, Schedule, build_model_for_graph,
                  jdd_infer, llr_tensor_to_batch)
from .graphs import Interleaver, build_ffg, build_joint, build_tanner, build_ufg
from .ldpc import channel_llrs_with_punctures, encode, load_alist, spa_decode
from .metrics import (ExitCurve, bmi_estimate, exit_characteristic,
                      exit_trajectory, latency_cycles)
from .neural import TrainingDivergedError
from .receivers import (BcjrDetectorComponent, GnnDetectorComponent,
                        SpaDecoderComponent, SpaDetectorComponent, TddSystem)
from .training import (TrainConfig, TrainingContext, apply_paper_budget,
                       train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _csv_writer(path, fieldnames, config, seed):
    f = open(path, "w", newline="") if path else sys.stdout
    f.write(f"# config_hash={config.config_hash()} seed={seed} version=isilab-{__version__}\n")
    w = csv.DictWriter(f, fieldnames=fieldnames)
    w.writeheader()
    return f, w


def _load_code(config):
    path = config.get_str("code.alist")
    if not path:
        return None, None
    with open(path) as fh:
        pcm = load_alist(fh.read())
    punct = config.get("code.puncture")
    if punct:
        pcm.puncture_mask = np.asarray(config.get_int_list("code.puncture"), dtype=np.int64)
    interleaver = Interleaver.random(pcm.num_cols,
                                     np.random.default_rng(config.get_int("code.interleaver_seed", 0)))
    return pcm, interleaver


def _sweep_points(config):
    if config.get("sweep.snr_db") is not None:
        return config.get_float_list("sweep.snr_db"), "snr"
    if config.get("sweep.ebn0_db") is not None:
        return config.get_float_list("sweep.ebn0_db"), "ebn0"
    raise ConfigError("need sweep.snr_db or sweep.ebn0_db")


def _sigma2_for_point(value, axis, config, constellation, pcm):
    if axis == "snr":
        return snr_to_sigma2(value)
    if pcm is not None:
        rate = pcm.dimension / pcm.num_cols
    else:
        rate = config.get_float("sweep.code_rate", 1.0)
    return ebn0_to_sigma2(value, rate, constellation.bits_per_symbol)


def _build_gnn(config, graph, constellation, cir):
    ckpt = config.get_str("detector.checkpoint")
    cfg = GnnConfig(
        feature_size=config.get_int("detector.feature_size", 16),
        hidden=tuple(config.get_int_list("detector.hidden", (64, 64))),
        variant="fgnn" if config.get_str("detector.kind") == "fgnn" else "gnn",
        include_noise_input=config.get_bool("detector.embed_noise", True),
        with_prior_embedding=config.get_bool("detector.prior_embedding", False),
    )
    model = build_model_for_graph(
        graph, constellation,
        embedding=config.get_str("detector.embedding", "linear"),
        rng=np.random.default_rng(config.get_int("detector.init_seed", 0)),
        config=cfg, cir=cir)
    if ckpt:
        model.store.load_arrays(neural.load_checkpoint(ckpt))
    return model


def run_simulate(config, out_path=None):
    """Monte-Carlo sweep; one CSV row per sweep point."""
    validate(config)
    cir = config.get_cir()
    constellation = Constellation(config.get_int("channel.constellation", 2))
    pcm, interleaver = _load_code(config)
    mode = config.get_str("run.mode", "uncoded")
    kind = config.get_str("detector.kind", "bcjr")
    n_sym = config.get_int("detector.n_sym", 64)
    if mode in ("sdd", "tdd", "jdd"):
        if pcm is None:
            raise ConfigError(f"mode {mode} needs code.alist")
        if constellation.order != 2:
            raise ConfigError("coded modes are wired for binary signalling")
        n_sym = pcm.num_cols
    base_seed = config.get_int("run.seed", 0)
    max_frames = config.get_int("run.max_frames", 10_000)
    min_errors = config.get_int("run.min_frame_errors", 100)
    batch = config.get_int("run.batch", 128)
    points, axis = _sweep_points(config)

    fields = ["snr_db", "ber", "bler", "bmi", "frames", "detector", "seed", "diverged"]
    f, writer = _csv_writer(out_path or config.get_str("run.output"), fields, config, base_seed)
    diverged_any = False
    try:
        for p_idx, point in enumerate(points):
            sigma2 = _sigma2_for_point(point, axis, config, constellation, pcm)
            seed = base_seed + p_idx
            row = _simulate_point(config, cir, constellation, pcm, interleaver, mode,
                                  kind, n_sym, sigma2, seed, max_frames, min_errors, batch)
            row["snr_db"] = point
            row["detector"] = kind
            row["seed"] = seed
            diverged_any = diverged_any or row["diverged"]
            writer.writerow(row)
    finally:
        if f is not sys.stdout:
            f.close()
    return EXIT_OK


def _simulate_point(config, cir, constellation, pcm, interleaver, mode, kind,
                    n_sym, sigma2, seed, max_frames, min_errors, batch):
    rng = np.random.default_rng(seed)
    k = constellation.bits_per_symbol
    detector = _make_detector(config, kind, cir, constellation, sigma2, n_sym)
    frames = 0
    bit_errors = 0
    frame_errors = 0
    total_bits = 0
    bmi_acc = []
    diverged = False

    if mode == "uncoded":
        while frames < max_frames and frame_errors < min_errors:
            n = min(batch, max_frames - frames)
            bits, ctx = detector.sample(rng, n)
            llrs = detector.infer(ctx, None)
            if hasattr(detector, "last_diverged") and detector.last_diverged:
                diverged = True
            hard = (llrs < 0).astype(np.int64)
            bit_errors += int(np.sum(hard != bits))
            frame_errors += int(np.sum(np.any(hard != bits, axis=1)))
            total_bits += bits.size
            bmi_acc.append(bmi_estimate(bits.ravel(), llrs.ravel()))
            frames += n
    elif mode in ("sdd", "tdd"):
        turbo = config.get_int("detector.turbo_iterations", 1 if mode == "sdd" else 4)
        system = TddSystem(detector, pcm, interleaver,
                           config.get_int("code.decoder_iterations", 20))
        info_pos = pcm.encoder().info_positions
        while frames < max_frames and frame_errors < min_errors:
            n = min(batch, max_frames - frames)
            bits, ctx = system.sample(rng, n)
            u_hat = system.run_turbo(ctx, turbo)
            u = ctx.info_bits
            bit_errors += int(np.sum(u_hat != u))
            frame_errors += int(np.sum(np.any(u_hat != u, axis=1)))
            total_bits += u.size
            frames += n
    elif mode == "jdd":
        row = _simulate_jdd(config, cir, constellation, pcm, interleaver, sigma2,
                            seed, max_frames, min_errors, batch)
        return row
    else:
        raise ConfigError(f"unknown run.mode {mode!r}")

    return {
        "ber": bit_errors / max(total_bits, 1),
        "bler": frame_errors / max(frames, 1),
        "bmi": float(np.mean(bmi_acc)) if bmi_acc else "",
        "frames": frames,
        "diverged": diverged,
    }


def _make_detector(config, kind, cir, constellation, sigma2, n_sym):
    if kind == "bcjr":
        return BcjrDetectorComponent(cir, constellation, sigma2, n_sym,
                                     config.get_int("detector.state_budget", 2_000_000))
    if kind == "lmmse":
        return _LmmseComponent(cir, constellation, sigma2, n_sym)
    if kind in ("spa-ffg", "spa-ufg"):
        return SpaDetectorComponent(cir, constellation, sigma2, n_sym,
                                    graph_kind=kind.split("-")[1],
                                    damping=config.get_float("detector.damping", 1.0),
                                    n_iterations=config.get_int("detector.iterations", 10))
    if kind in ("gnn", "fgnn"):
        graph = build_ufg(n_sym, cir.memory) if config.get_str("detector.graph", "ffg") == "ufg" \
            else build_ffg(n_sym, cir.memory)
        model = _build_gnn(config, graph, constellation, cir)
        return GnnDetectorComponent(model, graph, cir, constellation, sigma2,
                                    config.get_int("detector.iterations", 8))
    raise ConfigError(f"unknown detector.kind {kind!r}")


class _LmmseComponent(BcjrDetectorComponent):
    name = "lmmse"

    def __init__(self, cir, constellation, sigma2, n_sym):
        super().__init__(cir, constellation, sigma2, n_sym)

    def infer(self, ctx, prior_llrs=None):
        out = np.empty((ctx.observations.shape[0], self.n_bits))
        for b in range(ctx.observations.shape[0]):
            llr, _ = lmmse_detect(ctx.observations[b], self.channel_matrix,
                                  ctx.sigma2, self.constellation)
            out[b] = llr.values
        return out


def _simulate_jdd(config, cir, constellation, pcm, interleaver, sigma2, seed,
                  max_frames, min_errors, batch):
    rng = np.random.default_rng(seed)
    n_sym = pcm.num_cols
    det_graph = build_ffg(n_sym, cir.memory)
    tanner = build_tanner(pcm)
    joint = build_joint(det_graph, tanner, interleaver)
    model = _build_gnn(config, joint, constellation, cir)
    runtime = GraphRuntime(joint)
    schedule = _parse_schedule(config.get_str("detector.schedule", "flooding:10"))
    info_pos = pcm.encoder().info_positions
    from . import autodiff as ad

    frames = bit_errors = frame_errors = total_bits = 0
    while frames < max_frames and frame_errors < min_errors:
        n = min(batch, max_frames - frames)
        info = rng.integers(0, 2, size=(n, pcm.dimension))
        code = np.stack([encode(pcm, u) for u in info])
        payload = np.stack([interleaver.interleave(c) for c in code])
        symbols = np.stack([constellation.modulate(b) for b in payload])
        L = cir.memory
        padded = np.concatenate([np.zeros((n, L), dtype=np.complex128), symbols,
                                 np.zeros((n, L), dtype=np.complex128)], axis=1)
        from .channel import build_channel_matrix

        ys = padded @ build_channel_matrix(cir, n_sym).T
        if sigma2 > 0:
            ys = ys + np.sqrt(sigma2 / 2.0) * (rng.standard_normal(ys.shape)
                                               + 1j * rng.standard_normal(ys.shape))
        with ad.no_grad():
            outs, _ = jdd_infer(model, joint, ys, sigma2, cir, constellation,
                                schedule, runtime=runtime)
        llrs = llr_tensor_to_batch(outs[-1])
        hard_interleaved = (llrs < 0).astype(np.int64)
        hard_code = np.stack([interleaver.deinterleave(h) for h in hard_interleaved])
        u_hat = hard_code[:, info_pos]
        bit_errors += int(np.sum(u_hat != info))
        frame_errors += int(np.sum(np.any(u_hat != info, axis=1)))
        total_bits += info.size
        frames += n
    return {
        "ber": bit_errors / max(total_bits, 1),
        "bler": frame_errors / max(frames, 1),
        "bmi": "",
        "frames": frames,
        "diverged": False,
    }


def _parse_schedule(text):
    """'flooding:10' or 'sequential:3:3,5'."""
    parts = text.split(":")
    if parts[0] == "flooding":
        return Schedule("flooding", int(parts[1]) if len(parts) > 1 else 10)
    if parts[0] == "sequential":
        inner = tuple(int(x) for x in parts[2].split(",")) if len(parts) > 2 else (1, 1)
        return Schedule("sequential", int(parts[1]), inner)
    raise ConfigError(f"bad schedule {text!r}")


def run_train(config, out_path=None):
    """Train a detector (or joint receiver); emits checkpoint + CSV log."""
    validate(config)
    cir = config.get_cir()
    constellation = Constellation(config.get_int("channel.constellation", 2))
    pcm, interleaver = _load_code(config)
    mode = config.get_str("run.mode", "uncoded")
    n_sym = pcm.num_cols if mode == "jdd" else config.get_int("detector.n_sym", 32)
    graph_kind = config.get_str("detector.graph", "ffg")
    det_graph = build_ufg(n_sym, cir.memory) if graph_kind == "ufg" else build_ffg(n_sym, cir.memory)
    if mode == "jdd":
        joint = build_joint(det_graph, build_tanner(pcm), interleaver)
        graph = joint
    else:
        graph = det_graph
    model = _build_gnn(config, graph, constellation, cir)

    tc = TrainConfig(
        batch_size=config.get_int("train.batch_size", 128),
        steps=config.get_int("train.steps", 20_000),
        snr_range_db=(config.get_float("train.snr_min_db", 10.0),
                      config.get_float("train.snr_max_db", 14.0)),
        learning_rate=config.get_float("train.learning_rate", 1e-4),
        loss=config.get_str("train.loss", "multi"),
        seed=config.get_int("train.seed", 0),
        n_iterations=config.get_int("train.iterations", 8),
        schedule=_parse_schedule(config.get_str("train.schedule")) if config.get("train.schedule") else None,
        gaussian_priors=config.get_bool("train.gaussian_priors", False),
        log_every=config.get_int("train.log_every", 100),
    )
    if config.get_bool("train.paper_budget", False):
        tc = apply_paper_budget(tc, "jdd" if mode == "jdd" else "detection")
    context = TrainingContext(model=model, graph=graph, cir=cir,
                              constellation=constellation, pcm=pcm,
                              interleaver=interleaver)
    fields = ["step", "loss", "bmi", "snr_db", "wall_time"]
    f, writer = _csv_writer(out_path or config.get_str("run.output"), fields, config, tc.seed)
    t0 = time.time()

    def logger(m):
        writer.writerow({"step": m.step, "loss": f"{m.loss:.6f}", "bmi": f"{m.bmi:.6f}",
                         "snr_db": f"{m.snr_db:.3f}", "wall_time": f"{time.time() - t0:.2f}"})

    try:
        train(context, tc, callback=logger)
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        if f is not sys.stdout:
            f.close()
    ckpt_out = config.get_str("train.checkpoint_out", "model.ckpt")
    neural.save_checkpoint(ckpt_out, model.store.as_arrays())
    return EXIT_OK


def run_exit(config, out_path=None):
    """EXIT transfer curves and optional turbo trajectories."""
    validate(config)
    cir = config.get_cir()
    constellation = Constellation(config.get_int("channel.constellation", 2))
    pcm, interleaver = _load_code(config)
    seed = config.get_int("run.seed", 0)
    rng = np.random.default_rng(seed)
    sigma2 = snr_to_sigma2(config.get_float("exit.snr_db", 8.0))
    n_sym = pcm.num_cols if pcm is not None else config.get_int("detector.n_sym", 8)
    component_kind = config.get_str("exit.component", "bcjr")
    if component_kind == "ldpc":
        if pcm is None:
            raise ConfigError("exit.component=ldpc needs code.alist")
        component = SpaDecoderComponent(pcm, config.get_int("code.decoder_iterations", 20))
    else:
        component = _make_detector(config, component_kind, cir, constellation, sigma2, n_sym)
    grid = config.get_float_list("exit.ia_grid",
                                 np.round(np.linspace(0.0, 0.95, 20), 4).tolist())
    n_frames = max(1, config.get_int("exit.samples", 200_000) // max(component_bits(component), 1))
    curve = exit_characteristic(component, grid, n_frames, rng,
                                method=config.get_str("exit.method", "subtract"),
                                omit_budget=config.get_int("exit.omit_budget", 16))
    fields = ["ia", "ie", "snr_db", "component", "method", "samples"]
    f, writer = _csv_writer(out_path or config.get_str("run.output"), fields, config, seed)
    try:
        for row in curve.to_csv_rows():
            writer.writerow(row)
    finally:
        if f is not sys.stdout:
            f.close()

    traj_out = config.get_str("exit.trajectory_output")
    if traj_out:
        detector = _make_detector(config, config.get_str("detector.kind", "bcjr"),
                                  cir, constellation, sigma2, pcm.num_cols)
        system = TddSystem(detector, pcm, interleaver,
                           config.get_int("code.decoder_iterations", 20))
        points, diverged = exit_trajectory(system, config.get_int("exit.turbo_iterations", 6),
                                           np.random.default_rng(seed + 1),
                                           n_frames=config.get_int("exit.trajectory_frames", 100))
        with open(traj_out, "w", newline="") as tf:
            tf.write(f"# config_hash={config.config_hash()} seed={seed} version=isilab-{__version__} diverged={diverged}\n")
            w = csv.DictWriter(tf, fieldnames=["stage", "ia", "ie"])
            w.writeheader()
            for p in points:
                w.writerow({"stage": p.stage, "ia": f"{p.ia:.6f}", "ie": f"{p.ie:.6f}"})
    return EXIT_OK


def component_bits(component):
    return getattr(component, "n_bits", getattr(component, "pcm", None) and component.pcm.num_cols or 0)


def run_latency(config, out_path=None):
    """Latency/BER table: cycle model paired with measured BER per depth."""
    validate(config)
    cir = config.get_cir()
    constellation = Constellation(config.get_int("channel.constellation", 2))
    sigma2 = snr_to_sigma2(config.get_float("latency.snr_db", 14.0))
    n_sym = config.get_int("detector.n_sym", 64)
    seed = config.get_int("run.seed", 0)
    frames = config.get_int("latency.frames", 200)
    kinds = [k.strip() for k in config.get_str("latency.kinds", "bcjr,spa,gnn").split(",")]
    max_it = config.get_int("latency.iterations", 8)

    fields = ["method", "n_it", "cycles", "ber"]
    f, writer = _csv_writer(out_path or config.get_str("run.output"), fields, config, seed)
    try:
        for kind in kinds:
            rng = np.random.default_rng(seed)
            if kind == "bcjr":
                comp = _make_detector(config, "bcjr", cir, constellation, sigma2, n_sym)
                bits, ctx = comp.sample(rng, frames)
                llrs = comp.infer(ctx)
                writer.writerow({"method": "bcjr", "n_it": 1,
                                 "cycles": latency_cycles("bcjr", n_sym=n_sym, memory=cir.memory),
                                 "ber": f"{np.mean((llrs < 0) != bits):.6e}"})
                continue
            if kind in ("spa", "spa-ffg"):
                comp = SpaDetectorComponent(cir, constellation, sigma2, n_sym, "ffg",
                                            damping=config.get_float("detector.damping", 1.0),
                                            n_iterations=max_it)
                bits, ctx = comp.sample(rng, frames)
                res = spa_detect(comp.graph, ctx.observations, sigma2, constellation,
                                 cir=cir, damping=comp.damping, n_iterations=max_it)
                for it, llrs in enumerate(res.llrs_per_iteration, start=1):
                    writer.writerow({"method": "spa", "n_it": it,
                                     "cycles": latency_cycles("spa", it),
                                     "ber": f"{np.mean((np.atleast_2d(llrs) < 0) != bits):.6e}"})
                continue
            if kind in ("gnn", "fgnn"):
                graph = build_ffg(n_sym, cir.memory)
                model = _build_gnn(config, graph, constellation, cir)
                comp = GnnDetectorComponent(model, graph, cir, constellation, sigma2, max_it)
                bits, ctx = comp.sample(rng, frames)
                from . import autodiff as ad

                with ad.no_grad():
                    from .gnn import detection_features

                    feats = detection_features(model, graph, ctx.observations, sigma2,
                                               cir, constellation)
                    outs = model.detect(comp.runtime, feats, n_iterations=max_it,
                                        batch=ctx.observations.shape[0])
                for it, out in enumerate(outs, start=1):
                    llrs = llr_tensor_to_batch(out)
                    writer.writerow({"method": kind, "n_it": it,
                                     "cycles": latency_cycles(kind, it),
                                     "ber": f"{np.mean((llrs < 0) != bits):.6e}"})
                continue
            raise ConfigError(f"unknown latency kind {kind!r}")
    finally:
        if f is not sys.stdout:
            f.close()
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(prog="isilab",
                                     description="ISI-channel detection laboratory")
    parser.add_argument("command",
                        choices=["simulate", "train", "exit", "latency", "validate-config"])
    parser.add_argument("config", help="flat key=value config file")
    parser.add_argument("-o", "--output", default=None, help="output CSV path override")
    args = parser.parse_args(argv)

    try:
        config = ExperimentConfig.from_file(args.config)
    except (OSError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    workers = os.environ.get("ISILAB_WORKERS")
    if workers is not None:
        config.values.setdefault("run.workers", workers)

    try:
        if args.command == "validate-config":
            validate(config)
            print("config ok")
            return EXIT_OK
        if args.command == "simulate":
            return run_simulate(config, args.output)
        if args.command == "train":
            return run_train(config, args.output)
        if args.command == "exit":
            return run_exit(config, args.output)
        if args.command == "latency":
            return run_latency(config, args.output)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError,) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
