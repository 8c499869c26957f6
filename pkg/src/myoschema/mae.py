"""Masked autoencoder over (joint angles, muscle tensions, muscle lengths).

One network answers all three sensory questions of a tendon-driven robot:
(theta, f) -> l, (f, l) -> theta and (l, theta) -> f. The input is the
concatenation of the three normalized sensor blocks plus a 3-bit mask;
whichever block the mask marks absent is replaced by zeros before encoding,
and the decoder always reconstructs all three blocks. Control targets are
obtained by gradient descent over the latent vector.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .netcore import DenseNet, OptimizerState, fmt

__all__ = [
    "SensorSample",
    "Mask",
    "MASK_THETA_F",
    "MASK_F_L",
    "MASK_L_THETA",
    "ALL_MASKS",
    "Normalizer",
    "BodySchemaNet",
    "ControlSolveConfig",
    "SolveFailure",
    "make_body_schema",
    "compute_normalizer",
    "assemble_input",
    "assemble_batch",
    "mae_forward",
    "train_mae",
    "estimate_joint_angles",
    "predict_muscle_length",
    "predict_tension",
    "decoder_length_jacobian",
    "solve_control",
    "save_model",
    "load_model",
    "write_model",
    "read_model",
]

MODEL_FORMAT_VERSION = 1
STD_FLOOR = 1e-6

# weight of the hinge penalty that keeps solved tensions above the floor,
# in normalized units
HINGE_WEIGHT = 1.0


@dataclass
class SensorSample:
    """One measured (theta, f, l) triple: rad, N, m."""

    theta: np.ndarray
    tension: np.ndarray
    length: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        self.tension = np.atleast_1d(np.asarray(self.tension, dtype=float))
        self.length = np.atleast_1d(np.asarray(self.length, dtype=float))

    def validate(self, n_joints: int, n_muscles: int) -> None:
        if self.theta.shape != (n_joints,):
            raise ValueError(f"theta shape {self.theta.shape}, expected ({n_joints},)")
        if self.tension.shape != (n_muscles,) or self.length.shape != (n_muscles,):
            raise ValueError(
                f"tension/length shapes {self.tension.shape}/{self.length.shape}, "
                f"expected ({n_muscles},)"
            )
        if not (
            np.all(np.isfinite(self.theta))
            and np.all(np.isfinite(self.tension))
            and np.all(np.isfinite(self.length))
        ):
            raise ValueError("non-finite sensor values")


@dataclass(frozen=True)
class Mask:
    """Which of the three blocks are present at the input (theta, f, l)."""

    name: str
    bits: tuple[int, int, int]


MASK_THETA_F = Mask("theta_f", (1, 1, 0))  # (theta, f) -> l
MASK_F_L = Mask("f_l", (0, 1, 1))  # (f, l) -> theta
MASK_L_THETA = Mask("l_theta", (1, 0, 1))  # (l, theta) -> f
ALL_MASKS = (MASK_THETA_F, MASK_F_L, MASK_L_THETA)


@dataclass
class Normalizer:
    """Per-channel mean/std for the theta, f and l blocks."""

    theta_mean: np.ndarray
    theta_std: np.ndarray
    f_mean: np.ndarray
    f_std: np.ndarray
    l_mean: np.ndarray
    l_std: np.ndarray

    def clone(self) -> "Normalizer":
        return Normalizer(*(np.array(getattr(self, f)) for f in (
            "theta_mean", "theta_std", "f_mean", "f_std", "l_mean", "l_std")))

    @property
    def mean_vec(self) -> np.ndarray:
        return np.concatenate([self.theta_mean, self.f_mean, self.l_mean])

    @property
    def std_vec(self) -> np.ndarray:
        return np.concatenate([self.theta_std, self.f_std, self.l_std])

    def check(self) -> None:
        if np.any(self.std_vec <= 0):
            raise ValueError("normalizer stds must be positive")


def identity_normalizer(n_joints: int, n_muscles: int) -> Normalizer:
    return Normalizer(
        np.zeros(n_joints), np.ones(n_joints),
        np.zeros(n_muscles), np.ones(n_muscles),
        np.zeros(n_muscles), np.ones(n_muscles),
    )


def compute_normalizer(dataset: list[SensorSample], floor: float = STD_FLOOR) -> Normalizer:
    """Per-channel mean/std over a dataset; stds floored to stay invertible."""
    if not dataset:
        raise ValueError("cannot compute normalizer from an empty dataset")
    th = np.array([s.theta for s in dataset])
    f = np.array([s.tension for s in dataset])
    l = np.array([s.length for s in dataset])
    return Normalizer(
        th.mean(axis=0), np.maximum(th.std(axis=0), floor),
        f.mean(axis=0), np.maximum(f.std(axis=0), floor),
        l.mean(axis=0), np.maximum(l.std(axis=0), floor),
    )


@dataclass
class BodySchemaNet:
    """Encoder/decoder pair plus the frozen sensor normalization.

    Encoder input width is N + 2M + 3 (theta, f, l blocks and the mask),
    decoder output width is N + 2M.
    """

    n_joints: int
    n_muscles: int
    latent: int
    encoder: DenseNet
    decoder: DenseNet
    normalizer: Normalizer

    def __post_init__(self):
        n, m = self.n_joints, self.n_muscles
        if self.encoder.in_width != n + 2 * m + 3:
            raise ValueError(
                f"encoder input width {self.encoder.in_width} != {n + 2 * m + 3}"
            )
        if self.encoder.out_width != self.latent or self.decoder.in_width != self.latent:
            raise ValueError("latent width mismatch between encoder and decoder")
        if self.decoder.out_width != n + 2 * m:
            raise ValueError(
                f"decoder output width {self.decoder.out_width} != {n + 2 * m}"
            )

    @property
    def theta_slice(self) -> slice:
        return slice(0, self.n_joints)

    @property
    def f_slice(self) -> slice:
        n, m = self.n_joints, self.n_muscles
        return slice(n, n + m)

    @property
    def l_slice(self) -> slice:
        n, m = self.n_joints, self.n_muscles
        return slice(n + m, n + 2 * m)

    def clone(self) -> "BodySchemaNet":
        return BodySchemaNet(
            self.n_joints, self.n_muscles, self.latent,
            self.encoder.clone(), self.decoder.clone(), self.normalizer.clone(),
        )


def make_body_schema(
    n_joints: int,
    n_muscles: int,
    latent: int = 16,
    hidden: int = 64,
    seed: int = 0,
    activation: str = "tanh",
) -> BodySchemaNet:
    """Fresh untrained net with identity normalization.

    Five layers in total: input, one hidden, latent, one hidden, output.
    """
    n_in = n_joints + 2 * n_muscles + 3
    n_out = n_joints + 2 * n_muscles
    enc = netcore.init_network([n_in, hidden, latent], seed, activation)
    dec = netcore.init_network([latent, hidden, n_out], seed + 1, activation)
    return BodySchemaNet(
        n_joints, n_muscles, latent, enc, dec,
        identity_normalizer(n_joints, n_muscles),
    )


# ---------------------------------------------------------------------------
# input assembly and forward mapping


def assemble_input(sample: SensorSample, mask: Mask, normalizer: Normalizer) -> np.ndarray:
    """Normalize the present blocks, zero the absent one, append the mask."""
    sample.validate(len(normalizer.theta_mean), len(normalizer.f_mean))
    th = (sample.theta - normalizer.theta_mean) / normalizer.theta_std
    f = (sample.tension - normalizer.f_mean) / normalizer.f_std
    l = (sample.length - normalizer.l_mean) / normalizer.l_std
    bt, bf, bl = mask.bits
    return np.concatenate([
        th if bt else np.zeros_like(th),
        f if bf else np.zeros_like(f),
        l if bl else np.zeros_like(l),
        np.array(mask.bits, dtype=float),
    ])


def assemble_batch(theta_n, f_n, l_n, mask: Mask) -> np.ndarray:
    """Batched assembly from already-normalized blocks (rows are samples)."""
    rows = theta_n.shape[0]
    bt, bf, bl = mask.bits
    return np.hstack([
        theta_n if bt else np.zeros_like(theta_n),
        f_n if bf else np.zeros_like(f_n),
        l_n if bl else np.zeros_like(l_n),
        np.tile(np.array(mask.bits, dtype=float), (rows, 1)),
    ])


def mae_forward(net: BodySchemaNet, sample: SensorSample, mask: Mask) -> SensorSample:
    """Reconstruct all three blocks from the masked input.

    The output is de-normalized as-is; tensions are raw regression output
    and may be negative for poorly trained nets.
    """
    x = assemble_input(sample, mask, net.normalizer)
    z, _ = netcore.forward(net.encoder, x)
    out_n, _ = netcore.forward(net.decoder, z)
    raw = out_n * net.normalizer.std_vec + net.normalizer.mean_vec
    return SensorSample(raw[net.theta_slice], raw[net.f_slice], raw[net.l_slice])


def estimate_joint_angles(net: BodySchemaNet, tension, length) -> np.ndarray:
    """(f, l) -> theta."""
    sample = SensorSample(np.zeros(net.n_joints), tension, length)
    return mae_forward(net, sample, MASK_F_L).theta


def predict_muscle_length(net: BodySchemaNet, theta, tension) -> np.ndarray:
    """(theta, f) -> l."""
    sample = SensorSample(theta, tension, np.zeros(net.n_muscles))
    return mae_forward(net, sample, MASK_THETA_F).length


def predict_tension(net: BodySchemaNet, theta, length) -> np.ndarray:
    """(l, theta) -> f."""
    sample = SensorSample(theta, np.zeros(net.n_muscles), length)
    return mae_forward(net, sample, MASK_L_THETA).tension


# ---------------------------------------------------------------------------
# supervised training


def _normalized_blocks(net: BodySchemaNet, dataset: list[SensorSample]):
    th = np.array([s.theta for s in dataset])
    f = np.array([s.tension for s in dataset])
    l = np.array([s.length for s in dataset])
    nz = net.normalizer
    return (
        (th - nz.theta_mean) / nz.theta_std,
        (f - nz.f_mean) / nz.f_std,
        (l - nz.l_mean) / nz.l_std,
    )


def reconstruction_loss_and_grads(net: BodySchemaNet, theta_n, f_n, l_n):
    """Mean over samples and the three masks of the squared reconstruction
    residual (summed over channels), plus parameter gradients for encoder
    and decoder."""
    target = np.hstack([theta_n, f_n, l_n])
    rows = theta_n.shape[0] * len(ALL_MASKS)
    x = np.vstack([assemble_batch(theta_n, f_n, l_n, m) for m in ALL_MASKS])
    t = np.vstack([target] * len(ALL_MASKS))
    z, enc_cache = netcore.forward(net.encoder, x)
    out, dec_cache = netcore.forward(net.decoder, z)
    res = out - t
    loss = float(np.sum(res * res)) / rows
    d_out = 2.0 * res / rows
    dec_grads = netcore.backward_params(net.decoder, dec_cache, d_out)
    d_z = netcore.backward_input(net.decoder, dec_cache, d_out)
    enc_grads = netcore.backward_params(net.encoder, enc_cache, d_z)
    return loss, enc_grads, dec_grads


def train_mae(
    net: BodySchemaNet,
    dataset: list[SensorSample],
    epochs: int,
    batch: int,
    seed: int,
    learning_rate: float = 1e-3,
    refit_normalizer: bool = True,
):
    """Minimize reconstruction error over all three masks per sample.

    Returns (trained net, per-epoch mean loss history). Normalization
    statistics are fitted from the dataset once at the start (when
    refit_normalizer is set) and frozen into the returned model.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    for s in dataset:
        s.validate(net.n_joints, net.n_muscles)
    if epochs == 0:
        return net.clone(), []
    out = net.clone()
    if refit_normalizer:
        out.normalizer = compute_normalizer(dataset)
    theta_n, f_n, l_n = _normalized_blocks(out, dataset)
    n_samples = theta_n.shape[0]
    batch = max(1, min(batch, n_samples))
    rng = np.random.default_rng(seed)
    enc_state = OptimizerState(learning_rate=learning_rate)
    dec_state = OptimizerState(learning_rate=learning_rate)
    history = []
    for _ in range(epochs):
        perm = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, batch):
            idx = perm[start:start + batch]
            loss, enc_g, dec_g = reconstruction_loss_and_grads(
                out, theta_n[idx], f_n[idx], l_n[idx]
            )
            out.encoder, enc_state = netcore.apply_update(out.encoder, enc_g, enc_state)
            out.decoder, dec_state = netcore.apply_update(out.decoder, dec_g, dec_state)
            total += loss * len(idx)
        history.append(total / n_samples)
    return out, history


# ---------------------------------------------------------------------------
# latent-space control solve


@dataclass
class ControlSolveConfig:
    iterations: int = 200
    step_size: float = 0.5
    weight_theta: float = 1.0
    weight_tension: float = 1e-3
    weight_torque: float = 0.0
    torque_ref: np.ndarray | None = None  # N.m, length n_joints
    tension_floor: float = 5.0  # N

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step size must be > 0")


class SolveFailure(RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"solve failed at iteration {iteration}: {message}")
        self.iteration = iteration


def decoder_length_jacobian(net: BodySchemaNet, z: np.ndarray):
    """d(l_raw)/d(theta_raw) along the decoder manifold at latent z.

    Rows of the decoder Jacobian are extracted by one-hot backward passes;
    the length-vs-angle sensitivity is J_l pinv(J_theta), shape (M, N).
    """
    n, m = net.n_joints, net.n_muscles
    width = n + 2 * m
    z_tiled = np.tile(z, (width, 1))
    _, cache = netcore.forward(net.decoder, z_tiled)
    jac_n = netcore.backward_input(net.decoder, cache, np.eye(width))
    std = net.normalizer.std_vec
    j_theta = jac_n[net.theta_slice] * std[net.theta_slice, None]
    j_l = jac_n[net.l_slice] * std[net.l_slice, None]
    return j_l @ np.linalg.pinv(j_theta)


def _solve_loss_and_grad(net, z, theta_ref_n, cfg, shift_f, floor_n, torque_ref):
    """Loss of the control objective at latent z plus its gradient d/dz."""
    out, cache = netcore.forward(net.decoder, z)
    nz = net.normalizer
    d_out = np.zeros_like(out)

    res_th = out[net.theta_slice] - theta_ref_n
    loss = cfg.weight_theta * float(res_th @ res_th)
    d_out[net.theta_slice] += cfg.weight_theta * 2.0 * res_th

    # tension magnitude in scale-free units: f_raw / sigma = f_n + mu/sigma
    f_scaled = out[net.f_slice] + shift_f
    loss += cfg.weight_tension * float(f_scaled @ f_scaled)
    d_out[net.f_slice] += cfg.weight_tension * 2.0 * f_scaled

    # hinge below the tension floor
    hinge = np.maximum(0.0, floor_n - out[net.f_slice])
    loss += HINGE_WEIGHT * float(hinge @ hinge)
    d_out[net.f_slice] += HINGE_WEIGHT * -2.0 * hinge

    if cfg.weight_torque > 0.0:
        # tau = -G^T f with G = dl/dtheta; G is treated as locally constant
        # for the gradient (Gauss-Newton style), exact for linear decoders.
        g_mat = decoder_length_jacobian(net, z)
        f_raw = out[net.f_slice] * nz.f_std + nz.f_mean
        tau = -(g_mat.T @ f_raw)
        res_tau = tau - torque_ref
        loss += cfg.weight_torque * float(res_tau @ res_tau)
        d_out[net.f_slice] += cfg.weight_torque * -2.0 * (g_mat @ res_tau) * nz.f_std

    if not np.isfinite(loss):
        return loss, None, out
    d_z = netcore.backward_input(net.decoder, cache, d_out)
    return loss, d_z, out


def solve_control(
    net: BodySchemaNet,
    theta_ref,
    tension_seed=None,
    cfg: ControlSolveConfig | None = None,
) -> np.ndarray:
    """Target muscle lengths realizing theta_ref, via gradient descent on z.

    Starts from the encoding of (theta_ref, tension seed) under the
    (theta, f) mask, then iteratively updates z against a loss that pulls
    the decoded angles to theta_ref, discourages large tensions, keeps
    tensions above the floor and (optionally) matches a joint-torque
    target. Steps that would increase the loss are rejected and the step
    size halved, so the loss is non-increasing over accepted steps.
    """
    cfg = cfg or ControlSolveConfig()
    nz = net.normalizer
    theta_ref = np.atleast_1d(np.asarray(theta_ref, dtype=float))
    if theta_ref.shape != (net.n_joints,):
        raise ValueError(f"theta_ref shape {theta_ref.shape} != ({net.n_joints},)")
    if tension_seed is None:
        tension_seed = nz.f_mean.copy()
    tension_seed = np.atleast_1d(np.asarray(tension_seed, dtype=float))
    if tension_seed.shape != (net.n_muscles,):
        raise ValueError("tension seed has wrong length")

    seed_sample = SensorSample(theta_ref, tension_seed, np.zeros(net.n_muscles))
    x0 = assemble_input(seed_sample, MASK_THETA_F, nz)
    z, _ = netcore.forward(net.encoder, x0)

    theta_ref_n = (theta_ref - nz.theta_mean) / nz.theta_std
    shift_f = nz.f_mean / nz.f_std
    floor_n = (cfg.tension_floor - nz.f_mean) / nz.f_std
    torque_ref = (
        np.zeros(net.n_joints) if cfg.torque_ref is None
        else np.atleast_1d(np.asarray(cfg.torque_ref, dtype=float))
    )

    step = cfg.step_size
    loss, grad, out = _solve_loss_and_grad(net, z, theta_ref_n, cfg, shift_f, floor_n, torque_ref)
    if not np.isfinite(loss):
        raise SolveFailure(0, "non-finite loss at the initial latent")
    for it in range(cfg.iterations):
        trial = z - step * grad
        t_loss, t_grad, t_out = _solve_loss_and_grad(
            net, trial, theta_ref_n, cfg, shift_f, floor_n, torque_ref
        )
        if not np.isfinite(t_loss):
            raise SolveFailure(it + 1, "non-finite loss")
        if t_loss > loss:
            step *= 0.5
            continue
        z, loss, grad, out = trial, t_loss, t_grad, t_out
    return out[net.l_slice] * nz.l_std + nz.l_mean


# ---------------------------------------------------------------------------
# model file: netcore sections plus normalizer


def write_model(net: BodySchemaNet, out: io.TextIOBase) -> None:
    out.write(f"bodyschema v{MODEL_FORMAT_VERSION}\n")
    out.write(f"n_joints {net.n_joints}\n")
    out.write(f"n_muscles {net.n_muscles}\n")
    out.write(f"latent {net.latent}\n")
    netcore.write_densenet(net.encoder, out)
    netcore.write_densenet(net.decoder, out)
    out.write("normalizer\n")
    nz = net.normalizer
    for name in ("theta_mean", "theta_std", "f_mean", "f_std", "l_mean", "l_std"):
        vec = getattr(nz, name)
        out.write(name + " " + " ".join(fmt(v) for v in vec) + "\n")
    out.write("end bodyschema\n")


def read_model(inp: io.TextIOBase) -> BodySchemaNet:
    header = inp.readline().split()
    if len(header) != 2 or header[0] != "bodyschema":
        raise ValueError(f"not a body schema model: {header}")
    if header[1] != f"v{MODEL_FORMAT_VERSION}":
        raise ValueError(f"unsupported model format {header[1]}")
    fields = {}
    for key in ("n_joints", "n_muscles", "latent"):
        tok = inp.readline().split()
        if tok[0] != key:
            raise ValueError(f"expected {key} line, got {tok}")
        fields[key] = int(tok[1])
    encoder = netcore.read_densenet(inp)
    decoder = netcore.read_densenet(inp)
    if inp.readline().strip() != "normalizer":
        raise ValueError("expected normalizer section")
    vecs = {}
    for name in ("theta_mean", "theta_std", "f_mean", "f_std", "l_mean", "l_std"):
        tok = inp.readline().split()
        if tok[0] != name:
            raise ValueError(f"expected {name} line, got {tok}")
        vecs[name] = np.array([float(v) for v in tok[1:]])
    if inp.readline().split() != ["end", "bodyschema"]:
        raise ValueError("missing bodyschema terminator")
    net = BodySchemaNet(
        fields["n_joints"], fields["n_muscles"], fields["latent"],
        encoder, decoder, Normalizer(**vecs),
    )
    net.normalizer.check()
    return net


def save_model(net: BodySchemaNet, path) -> None:
    with open(path, "w") as f:
        write_model(net, f)


def load_model(path) -> BodySchemaNet:
    with open(path) as f:
        return read_model(f)
