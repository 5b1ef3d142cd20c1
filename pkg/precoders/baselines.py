# precoders/baselines.py
"""
Closed-form linear precoders for initialization and comparison.

Each baseline works per UT on the channels restricted to that UT's serving
cluster (H_j W_i for every UT j), splits power equally over the UT's streams,
and is then pushed onto the per-BS power manifold by scaling every BS's
blocks to its budget.
"""
import enum
import logging
from typing import Callable, Dict, List

import numpy as np
from scipy.linalg import null_space

from precoders import hermitian
from precoders.errors import BaselineInfeasibleError, ConfigurationError
from precoders.geometry import PerBSPowerManifold, Precoder
from precoders.network_model import ChannelSet, ClusterMap, NetworkConfig

log = logging.getLogger(__name__)

RANK_TOL = 1e-12


class BaselineKind(str, enum.Enum):
    MRT = "mrt"
    ZF = "zf"
    MMSE = "mmse"
    BD = "bd"
    EZF = "ezf"

    @classmethod
    def parse(cls, name: str) -> "BaselineKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ConfigurationError(f"unknown baseline {name!r}; expected one of {[k.value for k in cls]}") from None


# ---------------------------------------------------------------------
# HELPERS
# ---------------------------------------------------------------------
def _orthonormal_complement(basis: np.ndarray, count: int) -> np.ndarray:
    """`count` orthonormal columns orthogonal to the (orthonormal) columns of `basis`."""
    if basis.shape[1] == 0:
        return np.eye(basis.shape[0], count, dtype=np.complex128)
    return null_space(basis.conj().T)[:, :count]


def _equal_power_columns(t: np.ndarray) -> np.ndarray:
    """Unit-norm columns scaled by 1/sqrt(d) so every stream gets the same share."""
    norms = np.linalg.norm(t, axis=0)
    if np.any(norms <= RANK_TOL):
        raise BaselineInfeasibleError("precoder has a zero column (stream gets no transmit direction)")
    return t / norms / np.sqrt(t.shape[1])


def _stacked(channels: ChannelSet, cluster: ClusterMap, j: int, i: int) -> np.ndarray:
    """H_j W_i: UT j's channel from UT i's serving BSs, (M_r, B_i M_t)."""
    blocks = channels.blocks[j][cluster.slot_bs(i)]
    return np.concatenate(list(blocks), axis=1)


def _split(t: np.ndarray, num_slots: int, mt: int) -> np.ndarray:
    return t.reshape(num_slots, mt, t.shape[1])


def _select_streams(t_i: np.ndarray, d: int) -> np.ndarray:
    """
    Reduce an (N, M_r) inverse-channel block to d columns: keep the
    combinations of smallest norm, i.e. the right singular vectors of t_i
    with the smallest singular values.
    """
    if t_i.shape[1] == d:
        return t_i
    _, _, vh = hermitian.svd(t_i, full_matrices=False)
    return t_i @ vh.conj().T[:, -d:]


# ---------------------------------------------------------------------
# MRT
# ---------------------------------------------------------------------
def _mrt_block(h: np.ndarray, d: int) -> np.ndarray:
    """
    Top-d right singular directions of H (M_r x M_t), found from the
    M_r x M_r Gram matrix, scaled to ||H||_F / sqrt(d) per stream. A silent
    link (H = 0) gets an arbitrary orthonormal block at 1 / sqrt(d) so the BS
    still has power to renormalize.
    """
    vals, u = hermitian.hermitian_eigh(h @ h.conj().T)
    keep = vals[:d] > RANK_TOL * max(vals[0], RANK_TOL)
    v = h.conj().T @ u[:, :d][:, keep] / np.sqrt(vals[:d][keep])
    if v.shape[1] < d:
        v = np.concatenate([v, _orthonormal_complement(v, d - v.shape[1])], axis=1)
    gain = np.linalg.norm(h)
    if gain <= RANK_TOL:
        gain = 1.0
    return v * (gain / np.sqrt(d))


def mrt_precoder(channels: ChannelSet, cluster: ClusterMap, config: NetworkConfig) -> Precoder:
    blocks = []
    for i in range(cluster.num_ut):
        d = config.streams[i]
        if d > channels.mr:
            raise BaselineInfeasibleError(f"UT {i}: {d} streams exceed M_r={channels.mr}")
        h_i = channels.blocks[i][cluster.slot_bs(i)]
        blocks.append(np.stack([_mrt_block(h, d) for h in h_i]))
    manifold = PerBSPowerManifold(cluster, config.bs_power)
    return manifold.normalize(Precoder(blocks, cluster))[0]


# ---------------------------------------------------------------------
# ZF / MMSE / BD / EZF
# ---------------------------------------------------------------------
def _zf_like(channels, cluster, config, i, regularization: float) -> np.ndarray:
    num_ut = cluster.num_ut
    stacked = np.concatenate([_stacked(channels, cluster, j, i) for j in range(num_ut)], axis=0)
    n_r, n_t = stacked.shape
    mr = channels.mr
    if regularization == 0.0:
        if n_t < n_r:
            raise BaselineInfeasibleError(f"UT {i}: ZF needs {n_r} transmit dimensions, cluster has {n_t}")
        t = np.linalg.pinv(stacked)
    else:
        gram = stacked @ stacked.conj().T + regularization * np.eye(n_r)
        t = stacked.conj().T @ np.linalg.solve(gram, np.eye(n_r))
    t_i = t[:, i * mr:(i + 1) * mr]
    return _select_streams(t_i, config.streams[i])


def _zf(channels, cluster, config, i):
    return _zf_like(channels, cluster, config, i, 0.0)


def _mmse(channels, cluster, config, i):
    cluster_power = float(sum(config.bs_power[k] for k in cluster.slots[i]))
    n_r = cluster.num_ut * channels.mr
    return _zf_like(channels, cluster, config, i, config.noise_power * n_r / cluster_power)


def _bd(channels, cluster, config, i):
    d = config.streams[i]
    others = [_stacked(channels, cluster, j, i) for j in range(cluster.num_ut) if j != i]
    own = _stacked(channels, cluster, i, i)
    n_t = own.shape[1]
    if others:
        tilde = np.concatenate(others, axis=0)
        s, vh = hermitian.svd(tilde, full_matrices=True)[1:]
        rank = int(np.sum(s > RANK_TOL * max(s[0] if s.size else 0.0, RANK_TOL)))
        null = vh.conj().T[:, rank:]
    else:
        null = np.eye(n_t, dtype=np.complex128)
    if null.shape[1] < d:
        raise BaselineInfeasibleError(f"UT {i}: BD null space has dimension {null.shape[1]} < {d} streams")
    _, _, vh_eff = hermitian.svd(own @ null, full_matrices=True)
    return null @ vh_eff.conj().T[:, :d]


def _ezf(channels, cluster, config, i):
    rows = []
    for j in range(cluster.num_ut):
        d_j = config.streams[j]
        # receive eigenmodes of UT j over its own serving cluster
        u_j = hermitian.svd(_stacked(channels, cluster, j, j), full_matrices=False)[0][:, :d_j]
        rows.append(u_j.conj().T @ _stacked(channels, cluster, j, i))
    stacked = np.concatenate(rows, axis=0)
    n_s, n_t = stacked.shape
    if n_t < n_s:
        raise BaselineInfeasibleError(f"UT {i}: EZF needs {n_s} transmit dimensions, cluster has {n_t}")
    offset = sum(config.streams[:i])
    return np.linalg.pinv(stacked)[:, offset:offset + config.streams[i]]


_STACKED_BASELINES: Dict[BaselineKind, Callable[..., np.ndarray]] = {
    BaselineKind.ZF: _zf,
    BaselineKind.MMSE: _mmse,
    BaselineKind.BD: _bd,
    BaselineKind.EZF: _ezf,
}


def linear_baseline(kind, channels: ChannelSet, cluster: ClusterMap, config: NetworkConfig) -> Precoder:
    if not isinstance(kind, BaselineKind):
        kind = BaselineKind.parse(kind)
    if kind is BaselineKind.MRT:
        return mrt_precoder(channels, cluster, config)

    build = _STACKED_BASELINES[kind]
    blocks: List[np.ndarray] = []
    for i in range(cluster.num_ut):
        t = _equal_power_columns(build(channels, cluster, config, i))
        blocks.append(_split(t, len(cluster.slots[i]), channels.mt))

    manifold = PerBSPowerManifold(cluster, config.bs_power)
    log.debug("%s baseline built for %d UTs", kind.value, cluster.num_ut)
    return manifold.normalize(Precoder(blocks, cluster))[0]
