"""Command line entry point.

Commands: pretrain, grow, retrain, evaluate, sweep. Exit codes: 0 success,
2 configuration error (bad flags, missing or malformed files), 3 runtime
fault (simulation, solve or evaluation failure). All randomness flows from
the --seed flags; given the same inputs and seeds every command writes
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import dataio, harness, plotting
from .growth import grow_network, grow_normalizer
from .harness import (
    CollectionConfig,
    CollectionFault,
    EvaluationConfig,
    EvaluationFault,
    collect_post_growth,
    collect_pretraining,
    evaluate_control,
    make_transplant,
    run_sweep,
    tension_similarity,
    tension_spread,
)
from .mae import (
    MASK_THETA_F,
    SensorSample,
    SolveFailure,
    estimate_joint_angles,
    load_model,
    make_body_schema,
    mae_forward,
    predict_muscle_length,
    save_model,
    train_mae,
)
from .netcore import ConfigError
from .retrain import (
    METHODS,
    RetrainConfig,
    SamplerRanges,
    load_ranges,
    retrain,
    save_history_csv,
    save_ranges,
)
from .sim import Plant, SimulationFault, TrajectoryRecorder, default_plant, load_plant_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliConfigError(Exception):
    pass


def _results_dir(flag_value: str | None, default: str) -> str:
    if flag_value:
        return flag_value
    return os.environ.get("MYOSCHEMA_RESULTS_DIR", default)


def _load_plant(path: str | None, default_muscles: int) -> Plant:
    if path is None:
        return default_plant(default_muscles)
    if not os.path.exists(path):
        raise CliConfigError(f"plant config not found: {path}")
    try:
        return Plant(load_plant_config(path))
    except ValueError as exc:
        raise CliConfigError(f"bad plant config {path}: {exc}") from exc


def _load_model_checked(path: str):
    if not os.path.exists(path):
        raise CliConfigError(f"model file not found: {path}")
    try:
        return load_model(path)
    except ValueError as exc:
        raise CliConfigError(f"bad model file {path}: {exc}") from exc


def _load_dataset_checked(path: str):
    if not os.path.exists(path):
        raise CliConfigError(f"dataset file not found: {path}")
    return dataio.load_dataset(path)


def _load_ranges_checked(path: str) -> SamplerRanges:
    if not os.path.exists(path):
        raise CliConfigError(f"sampler-ranges file not found: {path}")
    return load_ranges(path)


# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    plant = _load_plant(args.plant, default_muscles=3)
    coll = CollectionConfig(
        count=args.count,
        f_range=(args.f_min, args.f_max),
        k_stiff=args.k_stiff,
        seed=args.seed,
    )
    print(f"collecting {coll.count} babbling samples (seed {args.seed})")
    dataset = collect_pretraining(plant, coll)
    n_holdout = max(1, int(len(dataset) * args.holdout))
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(len(dataset))
    holdout = [dataset[i] for i in perm[:n_holdout]]
    train_set = [dataset[i] for i in perm[n_holdout:]]

    net = make_body_schema(
        1, plant.n_muscles, latent=args.latent, hidden=args.hidden, seed=args.seed
    )
    print(f"training for {args.epochs} epochs on {len(train_set)} samples")
    net, history = train_mae(net, train_set, args.epochs, args.batch, args.seed,
                             learning_rate=args.learning_rate)

    theta_err = []
    l_err = []
    for s in holdout:
        theta_err.append(abs(estimate_joint_angles(net, s.tension, s.length)[0] - s.theta[0]))
        l_pred = predict_muscle_length(net, s.theta, s.tension)
        l_err.append(np.mean(np.abs(l_pred - s.length)))
    print(f"held-out theta error: {math.degrees(float(np.mean(theta_err))):.3f} deg")
    print(f"held-out length error: {float(np.mean(l_err)) * 1e3:.3f} mm")
    if history:
        print(f"final training loss: {history[-1]:.6f}")

    save_model(net, args.out)
    save_ranges(SamplerRanges.from_dataset(train_set), args.out + ".ranges")
    if args.data_out:
        dataio.save_dataset(dataset, args.data_out)
    print(f"wrote {args.out} and {args.out}.ranges")
    return EXIT_OK


def cmd_grow(args) -> int:
    net_old = _load_model_checked(args.model)
    if args.m_new <= net_old.n_muscles:
        raise CliConfigError(
            f"--m-new must exceed the old muscle count {net_old.n_muscles}"
        )
    d_new = None
    if args.d_new:
        d_new = _load_dataset_checked(args.d_new)
    net_new = make_transplant(net_old, args.m_new)
    if args.collect:
        plant = _load_plant(args.plant, default_muscles=args.m_new)
        coll = CollectionConfig(seed=args.seed)
        d_new = collect_post_growth(plant, net_new, coll, args.collect, net_old.n_muscles)
        if args.data_out:
            dataio.save_dataset(d_new, args.data_out)
            print(f"wrote {len(d_new)} collected samples to {args.data_out}")
    if d_new is not None:
        pad = range(net_old.n_muscles, args.m_new)
        net_new.normalizer = grow_normalizer(
            net_old.normalizer,
            [np.array([s.tension[i] for s in d_new]) for i in pad],
            [np.array([s.length[i] for s in d_new]) for i in pad],
        )

    # transplant self-check: old-channel behavior must be bit-for-bit stable
    worst = _transplant_check(net_old, net_new, seed=args.seed)
    if worst > 1e-9:
        print(f"transplant self-check failed: max deviation {worst:.3e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"transplant self-check passed (max old-channel deviation {worst:.3e})")
    save_model(net_new, args.out)
    print(f"wrote {args.out} (transplant, untrained)")
    return EXIT_OK


def _transplant_check(net_old, net_new, seed: int, rounds: int = 100) -> float:
    from .mae import ALL_MASKS

    rng = np.random.default_rng(seed)
    m_old, m_new = net_old.n_muscles, net_new.n_muscles
    worst = 0.0
    for _ in range(rounds):
        theta = rng.normal(size=net_old.n_joints)
        f = rng.normal(size=m_new) * 50.0
        l = rng.normal(size=m_new) * 0.1 + 0.3
        s_new = SensorSample(theta, f, l)
        s_old = SensorSample(theta, f[:m_old], l[:m_old])
        mask = ALL_MASKS[rng.integers(len(ALL_MASKS))]
        out_new = mae_forward(net_new, s_new, mask)
        out_old = mae_forward(net_old, s_old, mask)
        worst = max(
            worst,
            float(np.max(np.abs(out_new.theta - out_old.theta))),
            float(np.max(np.abs(out_new.tension[:m_old] - out_old.tension))),
            float(np.max(np.abs(out_new.length[:m_old] - out_old.length))),
        )
    return worst


def cmd_retrain(args) -> int:
    net_new = _load_model_checked(args.model)
    net_old = _load_model_checked(args.old)
    d_new = _load_dataset_checked(args.d_new)
    ranges = _load_ranges_checked(args.ranges or args.old + ".ranges")
    if args.method == "nocopy":
        net_new = make_body_schema(
            net_new.n_joints, net_new.n_muscles, net_new.latent,
            net_new.encoder.layer_sizes[1], args.seed,
        )
        net_new.normalizer = _load_model_checked(args.model).normalizer
        method = "i"
    else:
        method = args.method
    cfg = RetrainConfig(
        method=method, n_epoch=args.epochs, seed=args.seed,
        learning_rate=args.learning_rate,
    )
    trained, history = retrain(net_new, net_old, d_new, cfg, ranges)
    save_model(trained, args.out)
    if args.loss_csv:
        save_history_csv(history, args.loss_csv)
    print(
        f"retrained with method ({args.method}) on {len(d_new)} samples, "
        f"{len(history)} epochs, final loss {history[-1][1]:.6f}" if history
        else "no epochs run"
    )
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    net = _load_model_checked(args.model)
    plant = _load_plant(args.plant, default_muscles=net.n_muscles)
    out_dir = _results_dir(args.out_dir, "results")
    cfg = EvaluationConfig(k_stiff=args.k_stiff, settle_timeout=args.settle_timeout)
    result = evaluate_control(net, plant, cfg)
    flexors = plant.flexor_indices
    sigma = tension_spread(result.records, flexors) if len(flexors) >= 2 else math.nan
    print(f"E_theta: {result.e_theta:.5f} rad over {len(result.records)} targets "
          f"({result.n_failed} failed)")
    print(f"sigma_f (flexors {flexors}): {sigma:.4f} N")
    if plant.n_muscles >= 4:
        e_f, f_max = tension_similarity(result.records, 2, 3)
        print(f"E_f (muscles 3,4): {e_f:.4f}   f_max_new: {f_max:.2f} N")

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "evaluation.csv")
    with open(csv_path, "w") as out:
        m = plant.n_muscles
        cols = ["theta_ref", "theta", "ok"] + [f"f_{i}" for i in range(m)] + [
            f"l_{i}" for i in range(m)]
        out.write("# myoschema evaluation v1\n")
        out.write(",".join(cols) + "\n")
        for r in result.records:
            if r.ok:
                vals = [r.theta_ref, r.sample.theta[0], 1, *r.sample.tension, *r.sample.length]
            else:
                vals = [r.theta_ref, math.nan, 0] + [math.nan] * (2 * m)
            out.write(",".join(f"{v:.9g}" for v in vals) + "\n")
    print(f"wrote {csv_path}")
    if args.trace:
        _dump_traces(net, plant, cfg, out_dir)
    return EXIT_OK


def _dump_traces(net, plant, cfg, out_dir):
    from .mae import predict_tension, solve_control

    state = plant.initial_state()
    for k, theta_ref in enumerate(cfg.targets):
        l_ref = solve_control(net, [theta_ref], None, cfg.solve)
        f_bias = np.maximum(predict_tension(net, [theta_ref], l_ref), cfg.f_bias_min)
        commands = [
            harness.MuscleCommand(max(l_ref[i], 0.0), f_bias[i], cfg.k_stiff)
            for i in range(plant.n_muscles)
        ]
        rec = TrajectoryRecorder(plant.n_muscles)
        res = plant.settle(state, commands, cfg.settle_timeout, recorder=rec)
        state = res.state
        path = os.path.join(out_dir, f"target_{k:02d}.csv")
        rec.write_csv(path)
    print(f"wrote {len(cfg.targets)} trajectory CSVs to {out_dir}")


def cmd_sweep(args) -> int:
    if not os.path.exists(args.config):
        raise CliConfigError(f"sweep config not found: {args.config}")
    try:
        cfg = harness.load_sweep_config(args.config)
    except (ValueError, KeyError) as exc:
        raise CliConfigError(f"bad sweep config {args.config}: {exc}") from exc
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.out_dir = _results_dir(args.out_dir, cfg.out_dir)
    for path, what in (
        (cfg.model_old_path, "model"),
        (cfg.ranges_path, "sampler-ranges file"),
        (cfg.plant_new_path, "plant config"),
    ):
        if not os.path.exists(path):
            raise CliConfigError(f"{what} not found: {path}")
    rows = run_sweep(cfg, progress=print)
    print(f"sweep complete: {len(rows)} rows in {os.path.join(cfg.out_dir, 'sweep.csv')}")
    if args.plot:
        e_path = os.path.join(cfg.out_dir, "e_theta.svg")
        s_path = os.path.join(cfg.out_dir, "sigma_f.svg")
        plotting.plot_sweep_metric(
            rows, "e_theta", e_path,
            title="Control error vs data budget", ylabel="E_theta [rad]",
        )
        plotting.plot_sweep_metric(
            rows, "sigma_f", s_path,
            title="Flexor tension spread vs data budget", ylabel="sigma_f [N]",
        )
        print(f"wrote {e_path} and {s_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="myoschema",
        description="Body schema learning for a growing tendon-driven robot",
    )
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="babble the plant and train a body schema")
    pre.add_argument("--plant", help="plant config file (default: built-in 3-muscle elbow)")
    pre.add_argument("--out", required=True, help="output model path")
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--count", type=int, default=200, help="babbling samples")
    pre.add_argument("--epochs", type=int, default=2000)
    pre.add_argument("--batch", type=int, default=32)
    pre.add_argument("--learning-rate", type=float, default=1e-3)
    pre.add_argument("--latent", type=int, default=16)
    pre.add_argument("--hidden", type=int, default=64)
    pre.add_argument("--holdout", type=float, default=0.2)
    pre.add_argument("--f-min", type=float, default=5.0)
    pre.add_argument("--f-max", type=float, default=60.0)
    pre.add_argument("--k-stiff", type=float, default=3000.0)
    pre.add_argument("--data-out", help="also dump the collected dataset CSV")
    pre.set_defaults(func=cmd_pretrain)

    grow = sub.add_parser("grow", help="widen a model to more muscles by weight transplant")
    grow.add_argument("--model", required=True, help="old model path")
    grow.add_argument("--m-new", type=int, required=True)
    grow.add_argument("--out", required=True)
    grow.add_argument("--seed", type=int, default=0)
    grow.add_argument("--d-new", help="dataset CSV for the new-channel normalizer stats")
    grow.add_argument("--collect", type=int, metavar="N",
                      help="collect N post-growth samples inline")
    grow.add_argument("--plant", help="plant config for --collect")
    grow.add_argument("--data-out", help="where to write collected samples")
    grow.set_defaults(func=cmd_grow)

    ret = sub.add_parser("retrain", help="retrain a grown model from new data")
    ret.add_argument("--model", required=True, help="grown model path")
    ret.add_argument("--old", required=True, help="frozen pre-growth model path")
    ret.add_argument("--d-new", required=True, help="new dataset CSV")
    ret.add_argument("--method", choices=list(METHODS) + ["nocopy"], default="iii")
    ret.add_argument("--epochs", type=int, default=3000)
    ret.add_argument("--seed", type=int, default=0)
    ret.add_argument("--learning-rate", type=float, default=1e-3)
    ret.add_argument("--ranges", help="sampler-ranges sidecar (default <old>.ranges)")
    ret.add_argument("--out", required=True)
    ret.add_argument("--loss-csv", help="write the loss history CSV here")
    ret.set_defaults(func=cmd_retrain)

    ev = sub.add_parser("evaluate", help="run the 16-target closed-loop evaluation")
    ev.add_argument("--model", required=True)
    ev.add_argument("--plant", help="plant config (default: built-in)")
    ev.add_argument("--out-dir", help="results directory (or MYOSCHEMA_RESULTS_DIR)")
    ev.add_argument("--k-stiff", type=float, default=3000.0)
    ev.add_argument("--settle-timeout", type=float, default=8.0)
    ev.add_argument("--trace", action="store_true", help="dump per-target trajectory CSVs")
    ev.set_defaults(func=cmd_evaluate)

    sw = sub.add_parser("sweep", help="run the method x N_new x seed comparison")
    sw.add_argument("--config", required=True, help="sweep config file")
    sw.add_argument("--plot", action="store_true", help="write SVG plots")
    sw.add_argument("--workers", type=int, help="parallel worker processes")
    sw.add_argument("--out-dir", help="override output directory")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliConfigError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationFault, SolveFailure, CollectionFault, EvaluationFault,
            FloatingPointError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
