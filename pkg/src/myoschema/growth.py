"""Grow a body schema net to more muscles by weight transplant.

All weights touching the original channels are copied into their widened
index positions; every weight or bias touching a new-muscle channel starts
at exactly zero. Before any retraining the grown net therefore behaves
identically to the old one on the original channels, no matter what is fed
into the new-muscle inputs.
"""

from __future__ import annotations

import numpy as np

from .mae import BodySchemaNet, Normalizer
from .netcore import DenseNet

__all__ = [
    "grow_network",
    "grow_normalizer",
    "encoder_input_map",
    "decoder_output_map",
]


def encoder_input_map(n_joints: int, m_old: int, m_new: int) -> list[int]:
    """Old encoder-input index -> new index (theta, f, l blocks, then mask)."""
    theta = list(range(n_joints))
    f = [n_joints + j for j in range(m_old)]
    l = [n_joints + m_new + j for j in range(m_old)]
    mask = [n_joints + 2 * m_new + k for k in range(3)]
    return theta + f + l + mask


def decoder_output_map(n_joints: int, m_old: int, m_new: int) -> list[int]:
    """Old decoder-output index -> new index (theta, f, l blocks)."""
    theta = list(range(n_joints))
    f = [n_joints + j for j in range(m_old)]
    l = [n_joints + m_new + j for j in range(m_old)]
    return theta + f + l


def _embed(w_old: np.ndarray, shape, row_map, col_map) -> np.ndarray:
    w_new = np.zeros(shape)
    w_new[np.ix_(row_map, col_map)] = w_old
    return w_new


def _grow_densenet(net: DenseNet, in_map, in_width, out_map, out_width,
                   hidden_growth: int) -> DenseNet:
    """Re-index first-layer columns / last-layer rows; optionally append
    zero-coupled hidden units."""
    old_sizes = net.layer_sizes
    new_sizes = list(old_sizes)
    new_sizes[0] = in_width
    new_sizes[-1] = out_width
    for k in range(1, len(new_sizes) - 1):
        new_sizes[k] = old_sizes[k] + hidden_growth

    weights = []
    biases = []
    last = net.n_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        cols = in_map if k == 0 else list(range(old_sizes[k]))
        rows = out_map if k == last else list(range(old_sizes[k + 1]))
        weights.append(_embed(w, (new_sizes[k + 1], new_sizes[k]), rows, cols))
        b_new = np.zeros(new_sizes[k + 1])
        b_new[rows] = b
        biases.append(b_new)
    grown = DenseNet(new_sizes, weights, biases, net.activation)
    grown.check_shapes()
    return grown


def grow_network(net_old: BodySchemaNet, m_new: int, hidden_growth: int = 0) -> BodySchemaNet:
    """Widen a net from M_old to m_new muscles, copying all old weights.

    New-muscle channel stats in the returned normalizer are placeholders
    (mean 0, std 1); compute real ones with grow_normalizer and assign.
    Hidden layers keep their width unless hidden_growth > 0, in which case
    the extra units get zero in/out weights (behavior is preserved either
    way).
    """
    n = net_old.n_joints
    m_old = net_old.n_muscles
    if m_new <= m_old:
        raise ValueError(f"m_new ({m_new}) must exceed current muscle count ({m_old})")
    if hidden_growth < 0:
        raise ValueError("hidden_growth must be >= 0")

    in_map = encoder_input_map(n, m_old, m_new)
    out_map = decoder_output_map(n, m_old, m_new)
    enc = _grow_densenet(
        net_old.encoder, in_map, n + 2 * m_new + 3,
        list(range(net_old.latent)), net_old.latent, hidden_growth,
    )
    dec = _grow_densenet(
        net_old.decoder, list(range(net_old.latent)), net_old.latent,
        out_map, n + 2 * m_new, hidden_growth,
    )

    pad = m_new - m_old
    nz_old = net_old.normalizer
    nz_new = Normalizer(
        nz_old.theta_mean.copy(), nz_old.theta_std.copy(),
        np.concatenate([nz_old.f_mean, np.zeros(pad)]),
        np.concatenate([nz_old.f_std, np.ones(pad)]),
        np.concatenate([nz_old.l_mean, np.zeros(pad)]),
        np.concatenate([nz_old.l_std, np.ones(pad)]),
    )
    return BodySchemaNet(n, m_new, net_old.latent, enc, dec, nz_new)


def grow_normalizer(normalizer_old: Normalizer, new_f_data, new_l_data,
                    floor: float = 1e-6) -> Normalizer:
    """Extend per-channel stats: old channels copied unchanged, new channels
    from the supplied per-channel value arrays (std floored).

    new_f_data / new_l_data: one 1-D array per added muscle.
    """
    if len(new_f_data) != len(new_l_data) or not new_f_data:
        raise ValueError("need matching nonempty f and l data per added channel")

    def stats(values):
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            raise ValueError("empty data for a new channel")
        return float(v.mean()), max(float(v.std()), floor)

    f_stats = [stats(v) for v in new_f_data]
    l_stats = [stats(v) for v in new_l_data]
    return Normalizer(
        normalizer_old.theta_mean.copy(), normalizer_old.theta_std.copy(),
        np.concatenate([normalizer_old.f_mean, [m for m, _ in f_stats]]),
        np.concatenate([normalizer_old.f_std, [s for _, s in f_stats]]),
        np.concatenate([normalizer_old.l_mean, [m for m, _ in l_stats]]),
        np.concatenate([normalizer_old.l_std, [s for _, s in l_stats]]),
    )
