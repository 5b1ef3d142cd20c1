# precoders/wsr_objective.py
"""
Weighted sum rate of the user-centric downlink and its gradients.

Rates are natural-log (nats). The minimization objective is f = -WSR.

The cache keeps the per-BS received contributions V_{i,j,l} = H_{i,l} P_{j,l}
(and U_{i,j,l} = H_{i,l} eta_{j,l} for a search direction) so that a line
search over the retraction needs no channel products: every trial point only
rescales and adds cached M_r x d_j blocks. The only systems solved are
M_r x M_r (R_i) and d_i x d_i (C_i^{-1}).
"""
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from precoders import hermitian
from precoders.errors import DimensionError
from precoders.geometry import PerBSPowerManifold, Precoder, TangentVector
from precoders.network_model import ChannelSet, ClusterMap, check_conforms, per_bs_inner

log = logging.getLogger(__name__)

LN2 = np.log(2.0)


def nats_to_bits(x: float) -> float:
    return float(x) / LN2


@dataclass(frozen=True)
class ObjectiveCache:
    """
    v_single[i][j]  (B_j, M_r, d_j)  slot-ordered H_{i,l} P_{j,l}
    v[i][j]         (M_r, d_j)       sum over l of v_single[i][j]
    u_single, u     same for the search direction (None until attached)
    r[i]            R_i = noise I + sum_{j != i} v[i][j] v[i][j]^H
    c[i]            (I + v[i][i]^H R_i^{-1} v[i][i])^{-1}
    rates[i]        log det(R_i + v_ii v_ii^H) - log det R_i
    power_terms     (a, b, c) per BS: ||P||^2, Re<P, eta>, ||eta||^2
    """
    v_single: List[List[np.ndarray]]
    v: List[List[np.ndarray]]
    r: List[np.ndarray]
    r_factor: list
    r_inv_v: List[np.ndarray]
    c: List[np.ndarray]
    rates: np.ndarray
    u_single: Optional[List[List[np.ndarray]]] = None
    u: Optional[List[List[np.ndarray]]] = None
    power_terms: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    @property
    def has_direction(self) -> bool:
        return self.u_single is not None


@dataclass(frozen=True)
class PhiEvaluation:
    alpha: float
    value: float
    gamma: np.ndarray
    cache: ObjectiveCache


class WsrObjective:
    def __init__(
            self,
            channels: ChannelSet,
            cluster: ClusterMap,
            noise_power: float,
            weights: Sequence[float],
            bs_power: Sequence[float],
    ):
        if cluster.num_ut != channels.num_ut or cluster.num_bs != channels.num_bs:
            raise DimensionError("cluster map and channel set disagree on network size")
        self.channels = channels
        self.cluster = cluster
        self.noise_power = float(noise_power)
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (cluster.num_ut,):
            raise DimensionError(f"expected {cluster.num_ut} weights, got shape {self.weights.shape}")
        self.manifold = PerBSPowerManifold(cluster, bs_power)
        # H[i] restricted to UT j's cluster, slot-ordered: (B_j, M_r, M_t)
        self._h_on = [
            [channels.blocks[i][cluster.slot_bs(j)] for j in range(cluster.num_ut)]
            for i in range(cluster.num_ut)
        ]

    @classmethod
    def from_config(cls, config, channels: ChannelSet, cluster: ClusterMap) -> "WsrObjective":
        check_conforms(config, channels, cluster)
        return cls(channels, cluster, config.noise_power, config.weights, config.bs_power)

    # --- cache construction -------------------------------------------
    def _received(self, x) -> List[List[np.ndarray]]:
        n = self.cluster.num_ut
        return [[self._h_on[i][j] @ x.blocks[j] for j in range(n)] for i in range(n)]

    def _finish(self, v_single: List[List[np.ndarray]], v: List[List[np.ndarray]]) -> ObjectiveCache:
        n = self.cluster.num_ut
        mr = self.channels.mr
        r_list, factors, r_inv_v, c_list = [], [], [], []
        rates = np.zeros(n)
        for i in range(n):
            r_i = self.noise_power * np.eye(mr, dtype=np.complex128)
            for j in range(n):
                if j != i:
                    r_i = r_i + v[i][j] @ v[i][j].conj().T
            r_i = hermitian.hermitize(r_i)
            factor = hermitian.hpd_factor(r_i)
            x_i = hermitian.hpd_solve(factor, v[i][i])
            c_inv = hermitian.hermitize(np.eye(v[i][i].shape[1]) + v[i][i].conj().T @ x_i)
            c_factor = hermitian.hpd_factor(c_inv)
            c_i = hermitian.hpd_solve(c_factor, np.eye(c_inv.shape[0], dtype=np.complex128))
            # Sylvester: log det(R + V V^H) - log det R = log det(I + V^H R^{-1} V)
            rates[i] = hermitian.hpd_logdet(c_factor)
            r_list.append(r_i)
            factors.append(factor)
            r_inv_v.append(x_i)
            c_list.append(hermitian.hermitize(c_i))
        return ObjectiveCache(
            v_single=v_single, v=v, r=r_list, r_factor=factors, r_inv_v=r_inv_v, c=c_list, rates=rates,
        )

    def build_cache(self, p: Precoder) -> ObjectiveCache:
        v_single = self._received(p)
        v = [[blk.sum(axis=0) for blk in row] for row in v_single]
        return self._finish(v_single, v)

    def with_direction(self, cache: ObjectiveCache, p: Precoder, eta: TangentVector) -> ObjectiveCache:
        u_single = self._received(eta)
        u = [[blk.sum(axis=0) for blk in row] for row in u_single]
        terms = (
            per_bs_inner(p, p, self.cluster),
            per_bs_inner(p, eta, self.cluster),
            per_bs_inner(eta, eta, self.cluster),
        )
        return replace(cache, u_single=u_single, u=u, power_terms=terms)

    # --- values --------------------------------------------------------
    def user_rate(self, cache: ObjectiveCache, i: int) -> float:
        return float(cache.rates[i])

    def wsr(self, cache: ObjectiveCache, weights: Optional[Sequence[float]] = None) -> float:
        w = self.weights if weights is None else np.asarray(weights, dtype=float)
        return float(np.dot(w, cache.rates))

    def value(self, cache: ObjectiveCache) -> float:
        return -self.wsr(cache)

    def evaluate(self, p: Precoder) -> float:
        return self.value(self.build_cache(p))

    # --- gradients -----------------------------------------------------
    def euclidean_gradient(self, cache: ObjectiveCache) -> TangentVector:
        """
        Block (i, k):
            -2 (H_{i,k}^H A_i - sum_{j != i} H_{j,k}^H B_j V_{j,i})
        with A_j = w_j R_j^{-1} V_{j,j} C_j and B_j = A_j (R_j^{-1} V_{j,j})^H,
        so that Df(P)[xi] = sum Re tr(G_{i,k}^H xi_{i,k}).
        """
        n = self.cluster.num_ut
        a = [self.weights[j] * cache.r_inv_v[j] @ cache.c[j] for j in range(n)]
        b = [a[j] @ cache.r_inv_v[j].conj().T for j in range(n)]
        blocks = []
        for i in range(n):
            acc = self._h_on[i][i].conj().transpose(0, 2, 1) @ a[i]
            for j in range(n):
                if j == i or self.weights[j] == 0.0:
                    continue
                acc = acc - self._h_on[j][i].conj().transpose(0, 2, 1) @ (b[j] @ cache.v[j][i])
            blocks.append(-2.0 * acc)
        return TangentVector(blocks, self.cluster)

    def riemannian_gradient(self, p: Precoder, egrad: TangentVector) -> TangentVector:
        return self.manifold.project_tangent(p, egrad)

    # --- line-search function ------------------------------------------
    def phi(self, cache: ObjectiveCache, alpha: float) -> PhiEvaluation:
        """
        f at R_P(alpha eta) from cached V and U blocks only:
            power_k(alpha) = a_k + 2 alpha b_k + alpha^2 c_k
            V_{i,j}(alpha) = sum_l gamma_l (V_{i,j,l} + alpha U_{i,j,l})
        """
        if not cache.has_direction:
            raise DimensionError("phi needs a cache with a search direction attached")
        a_k, b_k, c_k = cache.power_terms
        gamma = self.manifold.retraction_scales(a_k + 2.0 * alpha * b_k + alpha * alpha * c_k)

        n = self.cluster.num_ut
        v_single, v = [], []
        for i in range(n):
            row_single, row = [], []
            for j in range(n):
                g = gamma[self.cluster.slot_bs(j)][:, None, None]
                blk = g * (cache.v_single[i][j] + alpha * cache.u_single[i][j])
                row_single.append(blk)
                row.append(blk.sum(axis=0))
            v_single.append(row_single)
            v.append(row)
        candidate = self._finish(v_single, v)
        return PhiEvaluation(alpha=float(alpha), value=self.value(candidate), gamma=gamma, cache=candidate)
