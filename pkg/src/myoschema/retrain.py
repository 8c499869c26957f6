"""Retrain a grown body schema from few new samples plus distillation.

The frozen pre-growth net generates pseudo-data covering the old motion
range; the grown net is trained on the real new samples and, weighted by a
schedule, on that pseudo-data. Residuals of the added muscle's channels in
the pseudo term are masked out because the old net knows nothing about it.

Schedules for the pseudo-data weight over epochs e of N_epoch:
  method "i"   -> 0
  method "ii"  -> 1.0
  method "iii" -> 1.0 - e / N_epoch
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .mae import (
    ALL_MASKS,
    BodySchemaNet,
    MASK_THETA_F,
    SensorSample,
    assemble_batch,
)
from .netcore import OptimizerState

__all__ = [
    "METHODS",
    "RetrainConfig",
    "SamplerRanges",
    "make_r_mask",
    "w_loss_value",
    "sample_pseudo_old",
    "retrain_loss",
    "retrain",
    "save_ranges",
    "load_ranges",
]

METHODS = ("i", "ii", "iii")


def w_loss_value(method: str, e: int, n_epoch: int) -> float:
    """Distillation weight at epoch e of n_epoch."""
    if not 0 <= e < n_epoch:
        raise ValueError(f"epoch {e} outside [0, {n_epoch})")
    if method == "i":
        return 0.0
    if method == "ii":
        return 1.0
    if method == "iii":
        return 1.0 - e / n_epoch
    raise ValueError(f"unknown method {method!r}")


def make_r_mask(n_joints: int, m_old: int, m_new: int) -> np.ndarray:
    """Output-channel mask: 1 on theta and original-muscle f/l channels,
    0 on added-muscle f/l channels."""
    if not 0 < m_old < m_new:
        raise ValueError(f"need 0 < m_old < m_new, got {m_old}, {m_new}")
    block = np.concatenate([np.ones(m_old), np.zeros(m_new - m_old)])
    return np.concatenate([np.ones(n_joints), block, block])


@dataclass
class RetrainConfig:
    method: str = "iii"
    n_epoch: int = 3000
    pseudo_batch: int = 64
    new_batch: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    early_stop_patience: int = 300
    early_stop_rel: float = 1e-4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_epoch < 0:
            raise ValueError("n_epoch must be >= 0")


@dataclass
class SamplerRanges:
    """Per-channel min/max of the data the old net was trained on; the
    pseudo-data sampler draws uniformly inside these."""

    theta_min: np.ndarray
    theta_max: np.ndarray
    f_min: np.ndarray
    f_max: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: list[SensorSample]) -> "SamplerRanges":
        if not dataset:
            raise ValueError("empty dataset")
        th = np.array([s.theta for s in dataset])
        f = np.array([s.tension for s in dataset])
        return cls(th.min(axis=0), th.max(axis=0), f.min(axis=0), f.max(axis=0))


def save_ranges(ranges: SamplerRanges, path) -> None:
    with open(path, "w") as out:
        out.write("ranges v1\n")
        for name in ("theta_min", "theta_max", "f_min", "f_max"):
            vec = getattr(ranges, name)
            out.write(name + " " + " ".join(netcore.fmt(v) for v in vec) + "\n")


def load_ranges(path) -> SamplerRanges:
    with open(path) as inp:
        if inp.readline().split() != ["ranges", "v1"]:
            raise ValueError(f"not a sampler-ranges file: {path}")
        vals = {}
        for name in ("theta_min", "theta_max", "f_min", "f_max"):
            tok = inp.readline().split()
            if tok[0] != name:
                raise ValueError(f"expected {name} in {path}")
            vals[name] = np.array([float(v) for v in tok[1:]])
    return SamplerRanges(**vals)


def _pseudo_arrays(net_old: BodySchemaNet, ranges: SamplerRanges, batch: int, rng):
    """Random (theta, f) in the old ranges; l from the old net, batched."""
    theta = rng.uniform(ranges.theta_min, ranges.theta_max, (batch, net_old.n_joints))
    f = rng.uniform(ranges.f_min, ranges.f_max, (batch, net_old.n_muscles))
    nz = net_old.normalizer
    theta_n = (theta - nz.theta_mean) / nz.theta_std
    f_n = (f - nz.f_mean) / nz.f_std
    x = assemble_batch(theta_n, f_n, np.zeros_like(f_n), MASK_THETA_F)
    z, _ = netcore.forward(net_old.encoder, x)
    out, _ = netcore.forward(net_old.decoder, z)
    l = out[:, net_old.l_slice] * nz.l_std + nz.l_mean
    return theta, f, l


def sample_pseudo_old(net_old: BodySchemaNet, ranges: SamplerRanges, batch: int,
                      seed: int, m_new: int):
    """Pseudo-samples from the frozen old net, zero-padded to m_new muscles.

    Returns (samples, r_mask). Added-muscle tensions and lengths are raw 0.
    """
    if m_new <= net_old.n_muscles:
        raise ValueError(
            f"m_new ({m_new}) must exceed the old net's muscle count "
            f"({net_old.n_muscles})"
        )
    rng = np.random.default_rng(seed)
    r = make_r_mask(net_old.n_joints, net_old.n_muscles, m_new)
    if batch == 0:
        return [], r
    theta, f, l = _pseudo_arrays(net_old, ranges, batch, rng)
    pad = np.zeros((batch, m_new - net_old.n_muscles))
    f_pad = np.hstack([f, pad])
    l_pad = np.hstack([l, pad])
    samples = [SensorSample(theta[i], f_pad[i], l_pad[i]) for i in range(batch)]
    return samples, r


def _as_arrays(batch, n_joints: int, n_muscles: int):
    if isinstance(batch, tuple):
        return batch
    if not batch:
        return (
            np.zeros((0, n_joints)), np.zeros((0, n_muscles)), np.zeros((0, n_muscles)),
        )
    th = np.array([s.theta for s in batch]).reshape(len(batch), n_joints)
    f = np.array([s.tension for s in batch]).reshape(len(batch), n_muscles)
    l = np.array([s.length for s in batch]).reshape(len(batch), n_muscles)
    return th, f, l


def _masked_norm_term(net: BodySchemaNet, theta_n, f_n, l_n, channel_mask, weight):
    """Mean over (rows x masks) of the sum of per-block masked residual
    norms; returns (value, enc grads, dec grads) scaled by weight."""
    n_rows = theta_n.shape[0]
    target = np.hstack([theta_n, f_n, l_n])
    x = np.vstack([assemble_batch(theta_n, f_n, l_n, m) for m in ALL_MASKS])
    t = np.vstack([target] * len(ALL_MASKS))
    z, enc_cache = netcore.forward(net.encoder, x)
    out, dec_cache = netcore.forward(net.decoder, z)
    res = (out - t) * channel_mask
    total_rows = n_rows * len(ALL_MASKS)

    d_out = np.zeros_like(res)
    value = 0.0
    for sl in (net.theta_slice, net.f_slice, net.l_slice):
        block = res[:, sl]
        norms = np.sqrt(np.sum(block * block, axis=1))
        value += float(norms.sum()) / total_rows
        safe = np.where(norms > 1e-12, norms, 1.0)
        d_out[:, sl] = block / safe[:, None] / total_rows
    d_out *= weight * channel_mask

    dec_grads = netcore.backward_params(net.decoder, dec_cache, d_out)
    d_z = netcore.backward_input(net.decoder, dec_cache, d_out)
    enc_grads = netcore.backward_params(net.encoder, enc_cache, d_z)
    return value, enc_grads, dec_grads


def retrain_loss(net_new: BodySchemaNet, new_batch, pseudo_batch, r_mask, w_loss: float):
    """L = L_new + w_loss * L_old and its parameter gradients.

    Each term is the mean over its batch and the three input masks of the
    per-block L2 residual norms (normalized space); in L_old the f and l
    residuals are multiplied elementwise by r_mask first. Batches may be
    lists of SensorSample or pre-split (theta, f, l) array tuples.
    """
    n, m = net_new.n_joints, net_new.n_muscles
    nz = net_new.normalizer
    ones = np.ones(n + 2 * m)
    r_mask = np.asarray(r_mask, dtype=float)
    if r_mask.shape != ones.shape:
        raise ValueError(f"r_mask shape {r_mask.shape} != ({n + 2 * m},)")

    def norm_blocks(arrays):
        th, f, l = arrays
        return (
            (th - nz.theta_mean) / nz.theta_std,
            (f - nz.f_mean) / nz.f_std,
            (l - nz.l_mean) / nz.l_std,
        )

    new_arrays = _as_arrays(new_batch, n, m)
    pseudo_arrays = _as_arrays(pseudo_batch, n, m)
    n_new_rows = new_arrays[0].shape[0]
    n_pseudo_rows = pseudo_arrays[0].shape[0]
    if n_new_rows == 0 and n_pseudo_rows == 0:
        raise ValueError("both batches are empty")
    if w_loss != 0.0 and n_pseudo_rows == 0:
        raise ValueError("pseudo batch is empty but w_loss is nonzero")

    loss_new = 0.0
    enc_g = dec_g = None
    if n_new_rows:
        loss_new, enc_g, dec_g = _masked_norm_term(
            net_new, *norm_blocks(new_arrays), ones, 1.0
        )
    loss_old = 0.0
    if w_loss != 0.0:
        loss_old, enc_go, dec_go = _masked_norm_term(
            net_new, *norm_blocks(pseudo_arrays), r_mask, w_loss
        )
        enc_g = enc_go if enc_g is None else enc_g.add(enc_go)
        dec_g = dec_go if dec_g is None else dec_g.add(dec_go)
    if enc_g is None:
        zero_e = netcore.Gradients(
            [np.zeros_like(w) for w in net_new.encoder.weights],
            [np.zeros_like(b) for b in net_new.encoder.biases],
        )
        zero_d = netcore.Gradients(
            [np.zeros_like(w) for w in net_new.decoder.weights],
            [np.zeros_like(b) for b in net_new.decoder.biases],
        )
        enc_g, dec_g = zero_e, zero_d

    total = loss_new + w_loss * loss_old
    if not np.isfinite(total):
        raise FloatingPointError("non-finite retraining loss")
    return total, loss_new, loss_old, enc_g, dec_g


def retrain(
    net_new: BodySchemaNet,
    net_old: BodySchemaNet,
    d_new: list[SensorSample],
    cfg: RetrainConfig,
    sampler_ranges: SamplerRanges,
):
    """Train net_new on d_new plus per-epoch fresh pseudo-data from the
    frozen net_old, weighted by the configured schedule.

    Returns (trained net, history) where history rows are
    (epoch, L, L_new, L_old, w_loss). net_old is never modified.
    """
    if not d_new:
        raise ValueError("empty new dataset")
    if net_new.n_joints != net_old.n_joints:
        raise ValueError("joint count mismatch between old and new nets")
    if net_new.n_muscles <= net_old.n_muscles:
        raise ValueError("net_new must have more muscles than net_old")
    for s in d_new:
        s.validate(net_new.n_joints, net_new.n_muscles)

    m_new = net_new.n_muscles
    r = make_r_mask(net_old.n_joints, net_old.n_muscles, m_new)
    pad_width = m_new - net_old.n_muscles
    rng = np.random.default_rng(cfg.seed)

    d_theta = np.array([s.theta for s in d_new])
    d_f = np.array([s.tension for s in d_new])
    d_l = np.array([s.length for s in d_new])
    n_data = len(d_new)

    out = net_new.clone()
    enc_state = OptimizerState(learning_rate=cfg.learning_rate)
    dec_state = OptimizerState(learning_rate=cfg.learning_rate)
    history = []
    best = np.inf
    since_best = 0
    for e in range(cfg.n_epoch):
        w = w_loss_value(cfg.method, e, cfg.n_epoch)
        if n_data <= cfg.new_batch:
            new_arrays = (d_theta, d_f, d_l)
        else:
            idx = rng.choice(n_data, size=cfg.new_batch, replace=False)
            new_arrays = (d_theta[idx], d_f[idx], d_l[idx])
        if w != 0.0:
            th_p, f_p, l_p = _pseudo_arrays(net_old, sampler_ranges, cfg.pseudo_batch, rng)
            pad = np.zeros((cfg.pseudo_batch, pad_width))
            pseudo_arrays = (th_p, np.hstack([f_p, pad]), np.hstack([l_p, pad]))
        else:
            # schedule weight is zero: pseudo term would be a no-op
            pseudo_arrays = (
                np.zeros((0, out.n_joints)), np.zeros((0, m_new)), np.zeros((0, m_new)),
            )
        loss, loss_new, loss_old, enc_g, dec_g = retrain_loss(
            out, new_arrays, pseudo_arrays, r, w
        )
        out.encoder, enc_state = netcore.apply_update(out.encoder, enc_g, enc_state)
        out.decoder, dec_state = netcore.apply_update(out.decoder, dec_g, dec_state)
        history.append((e, loss, loss_new, loss_old, w))

        if loss < best * (1.0 - cfg.early_stop_rel):
            best = loss
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    return out, history


def save_history_csv(history, path) -> None:
    with open(path, "w") as out:
        out.write("epoch,loss,loss_new,loss_old,w_loss\n")
        for e, loss, ln, lo, w in history:
            out.write(f"{e},{loss:.10g},{ln:.10g},{lo:.10g},{w:.10g}\n")
