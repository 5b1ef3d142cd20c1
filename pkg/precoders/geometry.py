# precoders/geometry.py
"""
The per-BS power-constraint manifold

    M = { P : sum_{i in U_k} ||P_{i,k}||_F^2 = P_k  for every BS k with U_k != {} }

seen as a Riemannian submanifold of the product of complex matrix spaces with
the metric g(xi, zeta) = sum Re tr(zeta_{i,k}^H xi_{i,k}).

Every operation is blockwise. A BS with an empty served group carries no
blocks, so it never shows up in a multiplier sum; its scale is reported as 1.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from precoders.errors import ConfigurationError, DegenerateRetractionError, DimensionError
from precoders.network_model import ClusterMap, NetworkConfig, per_bs_inner

log = logging.getLogger(__name__)

DEGENERATE_POWER = 1e-300
MEMBERSHIP_TOL = 1e-9


# ---------------------------------------------------------------------
# BLOCK CONTAINERS
# ---------------------------------------------------------------------
class BlockStack:
    """
    blocks[i] has shape (B_i, M_t, d_i); slot s holds the block of BS
    cluster.slots[i][s]. Arithmetic keeps the left operand's type.
    """

    __slots__ = ("blocks", "cluster")

    def __init__(self, blocks: Sequence[np.ndarray], cluster: ClusterMap):
        blocks = [np.asarray(b, dtype=np.complex128) for b in blocks]
        if len(blocks) != cluster.num_ut:
            raise DimensionError(f"expected {cluster.num_ut} per-UT block stacks, got {len(blocks)}")
        mt = None
        for i, b in enumerate(blocks):
            if b.ndim != 3 or b.shape[0] != len(cluster.slots[i]):
                raise DimensionError(
                    f"UT {i}: block stack of shape {b.shape} does not match cluster {cluster.slots[i]}"
                )
            if mt is not None and b.shape[1] != mt:
                raise DimensionError(f"UT {i}: M_t={b.shape[1]} differs from {mt}")
            mt = b.shape[1]
        self.blocks: List[np.ndarray] = blocks
        self.cluster = cluster

    @classmethod
    def zeros_like(cls, other: "BlockStack") -> "BlockStack":
        return cls([np.zeros_like(b) for b in other.blocks], other.cluster)

    @property
    def num_ut(self) -> int:
        return len(self.blocks)

    @property
    def mt(self) -> int:
        return self.blocks[0].shape[1]

    @property
    def streams(self) -> Tuple[int, ...]:
        return tuple(b.shape[2] for b in self.blocks)

    def block(self, i: int, k: int) -> np.ndarray:
        return self.blocks[i][self.cluster.slot_of(i, k)]

    def norm_sq(self) -> float:
        return float(sum(np.sum(np.abs(b) ** 2) for b in self.blocks))

    def _check_peer(self, other: "BlockStack") -> None:
        if other.cluster is not self.cluster and other.cluster != self.cluster:
            raise DimensionError("block stacks belong to different cluster maps")
        if any(a.shape != b.shape for a, b in zip(self.blocks, other.blocks)):
            raise DimensionError("block stacks have different shapes")

    def _like(self, blocks: List[np.ndarray]) -> "BlockStack":
        return type(self)(blocks, self.cluster)

    def __add__(self, other: "BlockStack") -> "BlockStack":
        self._check_peer(other)
        return self._like([a + b for a, b in zip(self.blocks, other.blocks)])

    def __sub__(self, other: "BlockStack") -> "BlockStack":
        self._check_peer(other)
        return self._like([a - b for a, b in zip(self.blocks, other.blocks)])

    def __mul__(self, scalar) -> "BlockStack":
        return self._like([scalar * b for b in self.blocks])

    __rmul__ = __mul__

    def __neg__(self) -> "BlockStack":
        return self._like([-b for b in self.blocks])

    def __repr__(self) -> str:
        return f"{type(self).__name__}(num_ut={self.num_ut}, mt={self.mt}, streams={self.streams})"


class Precoder(BlockStack):
    __slots__ = ()


class TangentVector(BlockStack):
    __slots__ = ()

    @classmethod
    def from_stack(cls, other: BlockStack) -> "TangentVector":
        return cls(other.blocks, other.cluster)


@dataclass(frozen=True)
class Multipliers:
    """Per-BS real coefficients of one solver step (None when not computed)."""
    mu: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None


# ---------------------------------------------------------------------
# MANIFOLD
# ---------------------------------------------------------------------
class PerBSPowerManifold:
    def __init__(self, cluster: ClusterMap, bs_power: Sequence[float]):
        power = np.asarray(bs_power, dtype=float)
        if power.shape != (cluster.num_bs,):
            raise DimensionError(f"expected {cluster.num_bs} BS powers, got shape {power.shape}")
        active = cluster.active_bs
        bad = [k for k in np.flatnonzero(active) if not power[k] > 0]
        if bad:
            raise ConfigurationError(f"BSs {bad} serve UTs but have power budget <= 0")
        self.cluster = cluster
        self.bs_power = power
        self.active = active

    # --- metric and residuals ----------------------------------------
    def metric(self, p: Optional[BlockStack], xi: BlockStack, zeta: BlockStack) -> float:
        xi._check_peer(zeta)
        return float(sum(np.real(np.vdot(z, x)) for x, z in zip(xi.blocks, zeta.blocks)))

    def norm(self, p: Optional[BlockStack], xi: BlockStack) -> float:
        return float(np.sqrt(max(self.metric(p, xi, xi), 0.0)))

    def feasibility_residual(self, p: BlockStack) -> np.ndarray:
        res = per_bs_inner(p, p, self.cluster) - self.bs_power
        res[~self.active] = 0.0
        return res

    def tangency_residual(self, p: BlockStack, xi: BlockStack) -> np.ndarray:
        return 2.0 * per_bs_inner(p, xi, self.cluster)

    def is_feasible(self, p: BlockStack, tol: float = MEMBERSHIP_TOL) -> bool:
        res = self.feasibility_residual(p)
        return bool(np.all(np.abs(res) <= tol * self.bs_power))

    # --- blockwise scaling -------------------------------------------
    def scale_blocks(self, x: BlockStack, coeffs: np.ndarray, cls=None) -> BlockStack:
        """Block (i, k) multiplied by coeffs[k]."""
        cls = cls or type(x)
        return cls(
            [coeffs[self.cluster.slot_bs(i)][:, None, None] * b for i, b in enumerate(x.blocks)],
            self.cluster,
        )

    def normal_coefficients(self, p: BlockStack, xi: BlockStack) -> np.ndarray:
        """
        (1/P_k) sum_{i in U_k} Re tr(P_{i,k}^H xi_{i,k}); zero for idle BSs.
        This is mu for a projection, lambda for a gradient and rho for a
        transport (evaluated at the destination point).
        """
        coeffs = np.zeros(self.cluster.num_bs)
        inner = per_bs_inner(p, xi, self.cluster)
        coeffs[self.active] = inner[self.active] / self.bs_power[self.active]
        return coeffs

    # --- projection / retraction / transport -------------------------
    def project_tangent(self, p: BlockStack, xi: BlockStack) -> TangentVector:
        mu = self.normal_coefficients(p, xi)
        return TangentVector.from_stack(xi - self.scale_blocks(p, mu, cls=type(xi)))

    def retraction_scales(self, candidate_power: np.ndarray) -> np.ndarray:
        gamma = np.ones(self.cluster.num_bs)
        for k in np.flatnonzero(self.active):
            if not candidate_power[k] >= DEGENERATE_POWER:
                raise DegenerateRetractionError(int(k), float(candidate_power[k]))
            gamma[k] = np.sqrt(self.bs_power[k] / candidate_power[k])
        return gamma

    def normalize(self, candidate: BlockStack) -> Tuple[Precoder, np.ndarray]:
        """Scale every BS's blocks so its transmit power equals P_k."""
        gamma = self.retraction_scales(per_bs_inner(candidate, candidate, self.cluster))
        return self.scale_blocks(candidate, gamma, cls=Precoder), gamma

    def retract(self, p: BlockStack, xi: BlockStack) -> Tuple[Precoder, np.ndarray]:
        return self.normalize(p + xi)

    def transport(self, p: BlockStack, p_new: BlockStack, xi: BlockStack) -> TangentVector:
        rho = self.normal_coefficients(p_new, xi)
        return TangentVector.from_stack(xi - self.scale_blocks(p_new, rho, cls=type(xi)))

    def step_multipliers(self, p: Precoder, egrad: BlockStack, eta: BlockStack, alpha: float) -> Multipliers:
        """All per-BS coefficients of one retraction step p -> R_p(alpha eta), for inspection."""
        lam = self.normal_coefficients(p, egrad)
        p_new, gamma = self.retract(p, alpha * eta)
        return Multipliers(
            mu=self.normal_coefficients(p, eta),
            lam=lam,
            rho=self.normal_coefficients(p_new, eta),
            gamma=gamma,
        )


def random_blocks(cluster: ClusterMap, mt: int, streams: Sequence[int], rng: np.random.Generator) -> List[np.ndarray]:
    out = []
    for i in range(cluster.num_ut):
        shape = (len(cluster.slots[i]), mt, int(streams[i]))
        out.append((rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0))
    return out


def random_on_manifold(config: NetworkConfig, cluster: ClusterMap, seed: int, max_draws: int = 16) -> Precoder:
    manifold = PerBSPowerManifold(cluster, config.bs_power)
    rng = np.random.default_rng(int(seed))
    for _ in range(max_draws):
        sample = Precoder(random_blocks(cluster, config.mt, config.streams, rng), cluster)
        try:
            return manifold.normalize(sample)[0]
        except DegenerateRetractionError as exc:
            log.debug("resampling random precoder: %s", exc)
    raise DegenerateRetractionError(-1, 0.0)


def random_tangent(manifold: PerBSPowerManifold, p: Precoder, rng: np.random.Generator) -> TangentVector:
    ambient = TangentVector(random_blocks(manifold.cluster, p.mt, p.streams, rng), manifold.cluster)
    return manifold.project_tangent(p, ambient)
