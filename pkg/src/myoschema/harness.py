"""Data collection, closed-loop evaluation and the retraining sweep.

Collection drives the simulated plant with the muscle stiffness law and
records settled (theta, f, l) triples: pretraining babbling wanders with
random biases and winch-target offsets, post-growth collection follows the
grown net for existing muscles while the added muscle gets k_stiff = 0 and
a random tension bias. Evaluation runs the 16-target up-down staircase and
reports the control error plus the tension coordination metrics. The sweep
grid (method x N_new x seed) lands in a resumable CSV.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .growth import grow_network, grow_normalizer
from .mae import (
    BodySchemaNet,
    ControlSolveConfig,
    SensorSample,
    SolveFailure,
    load_model,
    make_body_schema,
    predict_muscle_length,
    predict_tension,
    solve_control,
)
from .retrain import RetrainConfig, SamplerRanges, load_ranges, retrain
from .sim import MuscleCommand, Plant, load_plant_config

__all__ = [
    "CollectionFault",
    "EvaluationFault",
    "CollectionConfig",
    "EvaluationConfig",
    "TargetRecord",
    "EvalResult",
    "SweepRow",
    "SweepConfig",
    "collect_pretraining",
    "collect_post_growth",
    "default_targets",
    "evaluate_control",
    "tension_spread",
    "tension_similarity",
    "make_transplant",
    "run_sweep",
    "read_sweep_csv",
    "load_sweep_config",
    "save_sweep_config",
]


class CollectionFault(RuntimeError):
    pass


class EvaluationFault(RuntimeError):
    pass


@dataclass
class CollectionConfig:
    count: int = 200
    theta_range: tuple[float, float] = (0.0, math.radians(120.0))
    f_range: tuple[float, float] = (5.0, 60.0)
    f_bias_new_range: tuple[float, float] = (5.0, 60.0)
    l_ref_jitter: float = 0.025  # m, babbling winch-target offsets
    k_stiff: float = 3000.0  # N/m during collection
    settle_timeout: float = 8.0  # s
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        for lo, hi in (self.theta_range, self.f_range, self.f_bias_new_range):
            if hi < lo:
                raise ValueError("empty range in collection config")


def collect_pretraining(plant: Plant, config: CollectionConfig) -> list[SensorSample]:
    """Babble the plant: random per-muscle biases and winch-target offsets,
    settle, record. Non-converged settles are rejected; fewer than 50%
    conversions is a fault."""
    rng = np.random.default_rng(config.seed)
    state = plant.initial_state()
    samples: list[SensorSample] = []
    attempts = 0
    max_attempts = 2 * config.count
    while len(samples) < config.count and attempts < max_attempts:
        attempts += 1
        commands = []
        for i in range(plant.n_muscles):
            f_bias = rng.uniform(*config.f_range)
            l_ref = state.winch[i] + rng.uniform(-config.l_ref_jitter, config.l_ref_jitter)
            commands.append(MuscleCommand(max(l_ref, 0.0), f_bias, config.k_stiff))
        res = plant.settle(state, commands, config.settle_timeout)
        state = res.state
        if res.converged:
            samples.append(res.sample)
    if len(samples) < config.count:
        raise CollectionFault(
            f"only {len(samples)}/{config.count} settles converged in {attempts} attempts"
        )
    return samples


def collect_post_growth(
    plant: Plant,
    net_new: BodySchemaNet,
    config: CollectionConfig,
    n_new: int,
    n_old: int | None = None,
) -> list[SensorSample]:
    """Collect D_new after growth: existing muscles track lengths predicted
    by the grown net for a random (theta, f) state; the added muscles run
    k_stiff = 0 with a random tension bias."""
    m = plant.n_muscles
    if net_new.n_muscles != m:
        raise ValueError("net and plant disagree on the number of muscles")
    n_old = m - 1 if n_old is None else n_old
    if not 0 < n_old < m:
        raise ValueError(f"n_old must be in (0, {m})")
    rng = np.random.default_rng(config.seed)
    state = plant.initial_state()
    samples: list[SensorSample] = []
    attempts = 0
    max_attempts = 2 * n_new
    while len(samples) < n_new and attempts < max_attempts:
        attempts += 1
        theta_rand = rng.uniform(*config.theta_range, size=net_new.n_joints)
        f_rand = rng.uniform(*config.f_range, size=m)
        l_pred = predict_muscle_length(net_new, theta_rand, f_rand)
        commands = []
        for i in range(m):
            if i < n_old:
                commands.append(
                    MuscleCommand(max(l_pred[i], 0.0), f_rand[i], config.k_stiff)
                )
            else:
                f_bias = rng.uniform(*config.f_bias_new_range)
                commands.append(MuscleCommand(state.winch[i], f_bias, 0.0))
        res = plant.settle(state, commands, config.settle_timeout)
        state = res.state
        if res.converged:
            samples.append(res.sample)
    if len(samples) < n_new:
        raise CollectionFault(
            f"only {len(samples)}/{n_new} settles converged in {attempts} attempts"
        )
    return samples


# ---------------------------------------------------------------------------
# evaluation


def default_targets() -> list[float]:
    """0 -> 120 deg in 15 deg steps and back: 16 targets, the starting 0 deg
    pose is the initial state rather than a target."""
    up = [math.radians(d) for d in range(15, 121, 15)]
    down = [math.radians(d) for d in range(105, -1, -15)]
    return up + down


@dataclass
class EvaluationConfig:
    targets: list[float] = field(default_factory=default_targets)
    k_stiff: float = 3000.0  # N/m
    f_bias_min: float = 2.0  # N, floor on predicted biases
    settle_timeout: float = 8.0  # s
    solve: ControlSolveConfig = field(default_factory=ControlSolveConfig)
    max_failure_frac: float = 0.2


@dataclass
class TargetRecord:
    theta_ref: float
    solve_ok: bool
    converged: bool
    sample: SensorSample | None
    l_ref: np.ndarray | None
    f_bias: np.ndarray | None

    @property
    def ok(self) -> bool:
        return self.solve_ok and self.converged and self.sample is not None


@dataclass
class EvalResult:
    records: list[TargetRecord]
    e_theta: float
    n_failed: int


def evaluate_control(
    net: BodySchemaNet,
    plant: Plant,
    cfg: EvaluationConfig | None = None,
    start_state=None,
) -> EvalResult:
    """Visit the target staircase with MAE-driven stiffness control.

    For each target the latent solve yields l_ref; tension biases come from
    the net's own (l, theta) -> f prediction so the command is
    self-consistent. E_theta is the mean absolute angle error over targets
    that solved and settled; too many failures raise EvaluationFault."""
    cfg = cfg or EvaluationConfig()
    if net.n_muscles != plant.n_muscles:
        raise ValueError("net and plant disagree on the number of muscles")
    state = plant.initial_state() if start_state is None else start_state
    records: list[TargetRecord] = []
    for theta_ref in cfg.targets:
        try:
            l_ref = solve_control(net, [theta_ref], None, cfg.solve)
        except SolveFailure:
            records.append(TargetRecord(theta_ref, False, False, None, None, None))
            continue
        f_bias = np.maximum(
            predict_tension(net, [theta_ref], l_ref), cfg.f_bias_min
        )
        commands = [
            MuscleCommand(max(l_ref[i], 0.0), f_bias[i], cfg.k_stiff)
            for i in range(plant.n_muscles)
        ]
        res = plant.settle(state, commands, cfg.settle_timeout)
        state = res.state
        records.append(
            TargetRecord(theta_ref, True, res.converged, res.sample, l_ref, f_bias)
        )
    ok = [r for r in records if r.ok]
    n_failed = len(records) - len(ok)
    if n_failed > cfg.max_failure_frac * len(records):
        raise EvaluationFault(
            f"{n_failed}/{len(records)} targets failed to solve or settle"
        )
    e_theta = float(np.mean([abs(r.theta_ref - r.sample.theta[0]) for r in ok]))
    return EvalResult(records, e_theta, n_failed)


def tension_spread(records: list[TargetRecord], flexor_indices) -> float:
    """Mean over settled targets of the population std across the given
    muscles' tensions."""
    flexor_indices = list(flexor_indices)
    if len(flexor_indices) < 2:
        raise ValueError("need at least two muscle indices")
    spreads = [
        float(np.std(r.sample.tension[flexor_indices])) for r in records if r.ok
    ]
    if not spreads:
        raise ValueError("no settled targets")
    return float(np.mean(spreads))


def tension_similarity(records: list[TargetRecord], i: int, j: int):
    """(E_f, f_max_j): normalized disparity of the two muscles' mean
    tensions over settled targets, and the peak tension of muscle j."""
    if i == j:
        raise ValueError("need two distinct muscles")
    ok = [r for r in records if r.ok]
    if not ok:
        raise ValueError("no settled targets")
    f_i = float(np.mean([r.sample.tension[i] for r in ok]))
    f_j = float(np.mean([r.sample.tension[j] for r in ok]))
    if f_i + f_j <= 0.0:
        raise ValueError("tension similarity undefined: zero mean tensions")
    e_f = abs(f_i - f_j) / (f_i + f_j)
    f_max = float(max(r.sample.tension[j] for r in ok))
    return e_f, f_max


# ---------------------------------------------------------------------------
# growth pipeline helpers


def make_transplant(net_old: BodySchemaNet, m_new: int) -> BodySchemaNet:
    """Grow the old net and give the added channels pooled-old normalizer
    statistics (mean of the old channel means, mean of the old stds).

    Data-free and identical for every sweep cell; the added muscle's
    channels live on the same physical scales as the old ones.
    """
    net = grow_network(net_old, m_new)
    nz_old = net_old.normalizer
    pad = m_new - net_old.n_muscles

    def two_point(mu, sd):
        return np.array([mu - sd, mu + sd])

    f_mu, f_sd = float(nz_old.f_mean.mean()), float(nz_old.f_std.mean())
    l_mu, l_sd = float(nz_old.l_mean.mean()), float(nz_old.l_std.mean())
    net.normalizer = grow_normalizer(
        nz_old,
        [two_point(f_mu, f_sd) for _ in range(pad)],
        [two_point(l_mu, l_sd) for _ in range(pad)],
    )
    return net


# ---------------------------------------------------------------------------
# the sweep


METHOD_ORDER = ("transplant", "i", "ii", "iii", "nocopy")
_STREAM_COLLECT = 0
_STREAM_NOCOPY_INIT = 100


@dataclass
class SweepRow:
    method: str
    n_new: int
    seed: int
    e_theta: float
    sigma_f: float
    e_f: float
    f_max_new: float
    status: str = "ok"

    @property
    def key(self):
        return (self.method, self.n_new, self.seed)


@dataclass
class SweepConfig:
    model_old_path: str
    ranges_path: str
    plant_new_path: str
    out_dir: str
    methods: list[str] = field(default_factory=lambda: ["i", "ii", "iii", "nocopy"])
    n_new_list: list[int] = field(default_factory=lambda: [1, 3, 5, 7, 10, 15])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    root_seed: int = 0
    collection: CollectionConfig = field(default_factory=CollectionConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    retrain_epochs: int = 3000
    pseudo_batch: int = 64
    new_batch: int = 32
    learning_rate: float = 1e-3
    ef_pair: tuple[int, int] = (2, 3)
    workers: int = 1


def _child_seed(root: int, *parts: int) -> int:
    ss = np.random.SeedSequence((root, *parts))
    return int(ss.generate_state(1)[0])


def _method_stream(method: str) -> int:
    return 1 + METHOD_ORDER.index(method)


def _cell_net(method, transplant, net_old, cfg, n_new, seed):
    if method == "nocopy":
        init_seed = _child_seed(cfg.root_seed, n_new, seed, _STREAM_NOCOPY_INIT)
        hidden = transplant.encoder.layer_sizes[1]
        return make_body_schema(
            net_old.n_joints, transplant.n_muscles, transplant.latent,
            hidden, init_seed, transplant.encoder.activation,
        ), transplant.normalizer.clone()
    return transplant.clone(), None


def _run_cell(method, transplant, net_old, ranges, plant, cfg, d_new, n_new, seed):
    net0, nz_override = _cell_net(method, transplant, net_old, cfg, n_new, seed)
    if nz_override is not None:
        net0.normalizer = nz_override
    rcfg = RetrainConfig(
        method="i" if method == "nocopy" else method,
        n_epoch=cfg.retrain_epochs,
        pseudo_batch=cfg.pseudo_batch,
        new_batch=cfg.new_batch,
        learning_rate=cfg.learning_rate,
        seed=_child_seed(cfg.root_seed, n_new, seed, _method_stream(method)),
    )
    trained, _ = retrain(net0, net_old, d_new, rcfg, ranges)
    return _evaluate_cell(trained, plant, cfg, method, n_new, seed)


def _evaluate_cell(net, plant, cfg, method, n_new, seed) -> SweepRow:
    try:
        result = evaluate_control(net, plant, cfg.evaluation)
        sigma = tension_spread(result.records, plant.flexor_indices)
        e_f, f_max = tension_similarity(result.records, *cfg.ef_pair)
        return SweepRow(method, n_new, seed, result.e_theta, sigma, e_f, f_max)
    except (EvaluationFault, SolveFailure, ValueError) as exc:
        return SweepRow(
            method, n_new, seed, math.nan, math.nan, math.nan, math.nan,
            status=f"failed: {exc}",
        )


def _run_group(cfg: SweepConfig, n_new: int, seed: int, methods) -> list[SweepRow]:
    """All requested method cells for one (n_new, seed): one shared D_new."""
    net_old = load_model(cfg.model_old_path)
    ranges = load_ranges(cfg.ranges_path)
    plant = Plant(load_plant_config(cfg.plant_new_path))
    transplant = make_transplant(net_old, plant.n_muscles)
    coll = replace(
        cfg.collection,
        seed=_child_seed(cfg.root_seed, n_new, seed, _STREAM_COLLECT),
    )
    try:
        d_new = collect_post_growth(plant, transplant, coll, n_new, net_old.n_muscles)
    except CollectionFault as exc:
        return [
            SweepRow(m, n_new, seed, math.nan, math.nan, math.nan, math.nan,
                     status=f"collection failed: {exc}")
            for m in methods
        ]
    rows = []
    for method in methods:
        rows.append(
            _run_cell(method, transplant, net_old, ranges, plant, cfg, d_new, n_new, seed)
        )
    return rows


def run_sweep(cfg: SweepConfig, progress=None) -> list[SweepRow]:
    """Run the full grid, appending rows to out_dir/sweep.csv as they
    complete; cells already present in the CSV are skipped, so an
    interrupted sweep resumes. The finished file is rewritten in canonical
    order."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "sweep.csv")
    done = {row.key: row for row in read_sweep_csv(csv_path)} if os.path.exists(csv_path) else {}

    def log(msg):
        if progress:
            progress(msg)

    mode = "a" if done else "w"
    out = open(csv_path, mode)
    if not done:
        out.write("# myoschema sweep v1\n")
        out.write(f"# root_seed {cfg.root_seed}\n")
        out.write(f"# seeds {' '.join(str(s) for s in cfg.seeds)}\n")
        out.write("method,n_new,seed,e_theta,sigma_f,e_f,f_max_new,status\n")
        out.flush()

    def emit(row: SweepRow):
        done[row.key] = row
        out.write(_row_to_csv(row))
        out.flush()
        log(f"  [{row.method} n={row.n_new} seed={row.seed}] "
            f"E_theta={row.e_theta:.4f} sigma_f={row.sigma_f:.3f} ({row.status})")

    # pre-retraining baseline cell
    if ("transplant", 0, 0) not in done:
        net_old = load_model(cfg.model_old_path)
        plant = Plant(load_plant_config(cfg.plant_new_path))
        transplant = make_transplant(net_old, plant.n_muscles)
        log("evaluating transplant baseline")
        emit(_evaluate_cell(transplant, plant, cfg, "transplant", 0, 0))

    groups = []
    for n_new in cfg.n_new_list:
        for seed in cfg.seeds:
            missing = [m for m in cfg.methods if (m, n_new, seed) not in done]
            if missing:
                groups.append((n_new, seed, missing))

    if cfg.workers > 1 and groups:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [
                pool.submit(_run_group, cfg, n_new, seed, methods)
                for n_new, seed, methods in groups
            ]
            for fut in futures:
                for row in fut.result():
                    emit(row)
    else:
        for n_new, seed, methods in groups:
            log(f"group n_new={n_new} seed={seed}: methods {methods}")
            for row in _run_group(cfg, n_new, seed, methods):
                emit(row)
    out.close()

    rows = sorted(
        done.values(),
        key=lambda r: (METHOD_ORDER.index(r.method), r.n_new, r.seed),
    )
    with open(csv_path, "w") as final:
        final.write("# myoschema sweep v1\n")
        final.write(f"# root_seed {cfg.root_seed}\n")
        final.write(f"# seeds {' '.join(str(s) for s in cfg.seeds)}\n")
        final.write("method,n_new,seed,e_theta,sigma_f,e_f,f_max_new,status\n")
        for row in rows:
            final.write(_row_to_csv(row))
    return rows


def _row_to_csv(row: SweepRow) -> str:
    return (
        f"{row.method},{row.n_new},{row.seed},"
        f"{row.e_theta:.10g},{row.sigma_f:.10g},{row.e_f:.10g},{row.f_max_new:.10g},"
        f"{row.status}\n"
    )


def read_sweep_csv(path) -> list[SweepRow]:
    rows = []
    with open(path) as inp:
        for line in inp:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("method,"):
                continue
            parts = line.split(",", 7)
            rows.append(
                SweepRow(
                    parts[0], int(parts[1]), int(parts[2]),
                    float(parts[3]), float(parts[4]), float(parts[5]), float(parts[6]),
                    parts[7] if len(parts) > 7 else "ok",
                )
            )
    return rows


# ---------------------------------------------------------------------------
# sweep config file


def save_sweep_config(cfg: SweepConfig, path) -> None:
    with open(path, "w") as out:
        out.write("sweep v1\n")
        out.write("[paths]\n")
        out.write(f"model_old {cfg.model_old_path}\n")
        out.write(f"ranges {cfg.ranges_path}\n")
        out.write(f"plant_new {cfg.plant_new_path}\n")
        out.write(f"out_dir {cfg.out_dir}\n")
        out.write("[grid]\n")
        out.write(f"methods {' '.join(cfg.methods)}\n")
        out.write(f"n_new {' '.join(str(n) for n in cfg.n_new_list)}\n")
        out.write(f"seeds {' '.join(str(s) for s in cfg.seeds)}\n")
        out.write(f"root_seed {cfg.root_seed}\n")
        out.write(f"workers {cfg.workers}\n")
        out.write("[retrain]\n")
        out.write(f"epochs {cfg.retrain_epochs}\n")
        out.write(f"pseudo_batch {cfg.pseudo_batch}\n")
        out.write(f"new_batch {cfg.new_batch}\n")
        out.write(f"learning_rate {cfg.learning_rate!r}\n")
        out.write("[collection]\n")
        c = cfg.collection
        out.write(f"theta_range {c.theta_range[0]!r} {c.theta_range[1]!r}\n")
        out.write(f"f_range {c.f_range[0]!r} {c.f_range[1]!r}\n")
        out.write(f"f_bias_new_range {c.f_bias_new_range[0]!r} {c.f_bias_new_range[1]!r}\n")
        out.write(f"k_stiff {c.k_stiff!r}\n")
        out.write(f"settle_timeout {c.settle_timeout!r}\n")
        out.write("[evaluation]\n")
        e = cfg.evaluation
        out.write(f"k_stiff {e.k_stiff!r}\n")
        out.write(f"f_bias_min {e.f_bias_min!r}\n")
        out.write(f"settle_timeout {e.settle_timeout!r}\n")
        out.write(f"solve_iterations {e.solve.iterations}\n")
        out.write(f"solve_step {e.solve.step_size!r}\n")
        out.write(f"ef_pair {cfg.ef_pair[0]} {cfg.ef_pair[1]}\n")


def load_sweep_config(path) -> SweepConfig:
    paths: dict[str, str] = {}
    grid: dict[str, list[str]] = {}
    retrain_kv: dict[str, str] = {}
    coll_kv: dict[str, list[str]] = {}
    eval_kv: dict[str, list[str]] = {}
    sections = {"paths": paths, "grid": grid, "retrain": retrain_kv,
                "collection": coll_kv, "evaluation": eval_kv}
    with open(path) as inp:
        if inp.readline().split() != ["sweep", "v1"]:
            raise ValueError(f"not a sweep config: {path}")
        section = None
        for raw in inp:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                name = line.strip("[]").strip()
                if name not in sections:
                    raise ValueError(f"unknown section [{name}] in {path}")
                section = sections[name]
                continue
            if section is None:
                raise ValueError(f"key outside any section in {path}")
            key, *vals = line.split()
            section[key] = vals if section is not paths and section is not retrain_kv else " ".join(vals)

    cfg = SweepConfig(
        model_old_path=paths["model_old"],
        ranges_path=paths["ranges"],
        plant_new_path=paths["plant_new"],
        out_dir=paths["out_dir"],
    )
    if "methods" in grid:
        cfg.methods = list(grid["methods"])
    if "n_new" in grid:
        cfg.n_new_list = [int(v) for v in grid["n_new"]]
    if "seeds" in grid:
        cfg.seeds = [int(v) for v in grid["seeds"]]
    if "root_seed" in grid:
        cfg.root_seed = int(grid["root_seed"][0])
    if "workers" in grid:
        cfg.workers = int(grid["workers"][0])
    if "epochs" in retrain_kv:
        cfg.retrain_epochs = int(retrain_kv["epochs"])
    if "pseudo_batch" in retrain_kv:
        cfg.pseudo_batch = int(retrain_kv["pseudo_batch"])
    if "new_batch" in retrain_kv:
        cfg.new_batch = int(retrain_kv["new_batch"])
    if "learning_rate" in retrain_kv:
        cfg.learning_rate = float(retrain_kv["learning_rate"])
    c = cfg.collection
    if "theta_range" in coll_kv:
        c.theta_range = (float(coll_kv["theta_range"][0]), float(coll_kv["theta_range"][1]))
    if "f_range" in coll_kv:
        c.f_range = (float(coll_kv["f_range"][0]), float(coll_kv["f_range"][1]))
    if "f_bias_new_range" in coll_kv:
        c.f_bias_new_range = (
            float(coll_kv["f_bias_new_range"][0]), float(coll_kv["f_bias_new_range"][1])
        )
    if "k_stiff" in coll_kv:
        c.k_stiff = float(coll_kv["k_stiff"][0])
    if "settle_timeout" in coll_kv:
        c.settle_timeout = float(coll_kv["settle_timeout"][0])
    e = cfg.evaluation
    if "k_stiff" in eval_kv:
        e.k_stiff = float(eval_kv["k_stiff"][0])
    if "f_bias_min" in eval_kv:
        e.f_bias_min = float(eval_kv["f_bias_min"][0])
    if "settle_timeout" in eval_kv:
        e.settle_timeout = float(eval_kv["settle_timeout"][0])
    if "solve_iterations" in eval_kv:
        e.solve.iterations = int(eval_kv["solve_iterations"][0])
    if "solve_step" in eval_kv:
        e.solve.step_size = float(eval_kv["solve_step"][0])
    if "ef_pair" in eval_kv:
        cfg.ef_pair = (int(eval_kv["ef_pair"][0]), int(eval_kv["ef_pair"][1]))
    return cfg
