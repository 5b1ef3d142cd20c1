# precoders/network_model.py
"""
Network topology, channel realizations and user-centric clusters.

The selection matrices W_i (scatter UT i's cluster blocks into the full BS
stack) and Q_k (mask BS k's rows) are never built here. ClusterMap keeps the
index sets instead and the helpers below work directly on per-cluster blocks.

Block layout convention: UT i's precoder is an array of shape
(B_i, M_t, d_i) whose slot s belongs to BS `cluster.slots[i][s]`. Slots are
always in ascending BS order, whatever order `serving` ranks the BSs in.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from precoders.errors import ConfigurationError, DimensionError, ParseError

log = logging.getLogger(__name__)

CLUSTER_POLICIES = ("large_scale", "received_power")


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def _as_tuple(value, n: int, cast) -> tuple:
    if np.isscalar(value):
        return tuple(cast(value) for _ in range(n))
    out = tuple(cast(v) for v in value)
    if len(out) != n:
        raise ConfigurationError(f"expected {n} values, got {len(out)}")
    return out


# ---------------------------------------------------------------------
# CONFIG
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class NetworkConfig:
    """
    Everything one experiment cell needs: dimensions, powers, noise, weights,
    cluster size and solver knobs.

    `streams`, `bs_power` and `weights` accept a scalar (broadcast to every
    UT/BS) or a per-UT/per-BS sequence; they are stored as tuples. Powers are
    linear watts.
    """
    num_bs: int
    num_ut: int
    mt: int
    mr: int
    streams: Union[int, Tuple[int, ...]]
    bs_power: Union[float, Tuple[float, ...]]
    noise_power: float
    cluster_size: int
    weights: Optional[Union[float, Tuple[float, ...]]] = None

    # solver knobs
    max_outer: int = 500
    max_inner: int = 40
    grad_tol: float = 1e-6
    alpha0: float = 1e-3
    r: float = 0.5
    c: float = 1e-4

    rng_seed: int = 0

    # synthetic large-scale model
    cell_radius: float = 500.0
    d0: float = 50.0
    pathloss_exp: float = 3.5
    ref_gain_db: float = -100.0

    def __post_init__(self):
        for name in ("num_bs", "num_ut", "mt", "mr"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive count, got {getattr(self, name)}")

        object.__setattr__(self, "streams", _as_tuple(self.streams, self.num_ut, int))
        object.__setattr__(self, "bs_power", _as_tuple(self.bs_power, self.num_bs, float))
        weights = 1.0 if self.weights is None else self.weights
        object.__setattr__(self, "weights", _as_tuple(weights, self.num_ut, float))

        if not 1 <= self.cluster_size <= self.num_bs:
            raise ConfigurationError(f"cluster_size must be in [1, {self.num_bs}], got {self.cluster_size}")
        for i, d in enumerate(self.streams):
            if d < 1 or d > self.mr:
                raise ConfigurationError(f"UT {i}: streams={d} must satisfy 1 <= d <= mr={self.mr}")
            if d > self.cluster_size * self.mt:
                raise ConfigurationError(f"UT {i}: streams={d} exceed cluster transmit dimensions")
        if any(not p > 0 for p in self.bs_power):
            raise ConfigurationError(f"every BS power must be > 0, got {self.bs_power}")
        if not self.noise_power > 0:
            raise ConfigurationError(f"noise_power must be > 0, got {self.noise_power}")
        if any(w < 0 for w in self.weights) or not any(w > 0 for w in self.weights):
            raise ConfigurationError("weights must be nonnegative with at least one positive entry")

        if self.max_outer < 0 or self.max_inner < 1:
            raise ConfigurationError("max_outer must be >= 0 and max_inner >= 1")
        if not self.grad_tol >= 0:
            raise ConfigurationError(f"grad_tol must be >= 0, got {self.grad_tol}")
        if not self.alpha0 > 0:
            raise ConfigurationError(f"alpha0 must be > 0, got {self.alpha0}")
        if not 0 < self.r < 1 or not 0 < self.c < 1:
            raise ConfigurationError(f"backtracking needs r, c in (0, 1), got r={self.r}, c={self.c}")
        if not 0 <= int(self.rng_seed) < 2 ** 64:
            raise ConfigurationError(f"rng_seed must fit in 64 bits, got {self.rng_seed}")
        if self.cell_radius <= 0 or self.d0 <= 0 or self.pathloss_exp < 0:
            raise ConfigurationError("cell_radius and d0 must be > 0, pathloss_exp >= 0")

    @property
    def power_array(self) -> np.ndarray:
        return np.asarray(self.bs_power, dtype=float)


# ---------------------------------------------------------------------
# CHANNELS
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class ChannelSet:
    """
    blocks[i, k] is the M_r x M_t channel from BS k to UT i.
    large_scale[i, k] is the gain beta_{i,k} the block was drawn with.
    """
    blocks: np.ndarray
    large_scale: np.ndarray
    bs_xy: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    ut_xy: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        blocks = np.array(self.blocks, dtype=np.complex128)
        beta = np.array(self.large_scale, dtype=float)
        if blocks.ndim != 4:
            raise DimensionError(f"channel blocks must be (U, B, Mr, Mt), got shape {blocks.shape}")
        if beta.shape != blocks.shape[:2]:
            raise DimensionError(f"large_scale shape {beta.shape} does not match blocks {blocks.shape[:2]}")
        if not np.all(np.isfinite(blocks)):
            raise ConfigurationError("channel blocks contain non-finite entries")
        if np.any(beta < 0):
            raise ConfigurationError("large-scale gains must be nonnegative")
        blocks.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "large_scale", beta)

    @property
    def num_ut(self) -> int:
        return self.blocks.shape[0]

    @property
    def num_bs(self) -> int:
        return self.blocks.shape[1]

    @property
    def mr(self) -> int:
        return self.blocks.shape[2]

    @property
    def mt(self) -> int:
        return self.blocks.shape[3]

    def block(self, i: int, k: int) -> np.ndarray:
        return self.blocks[i, k]


def _uniform_disc(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    rho = radius * np.sqrt(rng.uniform(size=n))
    theta = 2.0 * np.pi * rng.uniform(size=n)
    return np.stack([rho * np.cos(theta), rho * np.sin(theta)], axis=1)


def pathloss_gain(dist: np.ndarray, d0: float, exponent: float, ref_gain_db: float = 0.0) -> np.ndarray:
    """beta = g0 * (1 + dist/d0)^(-exponent), g0 given in dB."""
    return 10.0 ** (ref_gain_db / 10.0) * (1.0 + np.asarray(dist, dtype=float) / d0) ** (-exponent)


def rayleigh_blocks(large_scale: np.ndarray, mr: int, mt: int, rng: np.random.Generator) -> np.ndarray:
    """
    i.i.d. circularly-symmetric complex Gaussian entries with variance
    large_scale[i, k] for every entry of block (i, k).
    """
    shape = large_scale.shape + (mr, mt)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    scale = np.sqrt(large_scale / 2.0)[..., None, None]
    return scale * (re + 1j * im)


def generate_channels(config: NetworkConfig, seed: int) -> ChannelSet:
    """Draw one channel realization. Same (config, seed) gives a bit-identical ChannelSet."""
    if not 0 <= int(seed) < 2 ** 64:
        raise ConfigurationError(f"seed must fit in 64 bits, got {seed}")
    rng = np.random.default_rng(int(seed))

    bs_xy = _uniform_disc(rng, config.num_bs, config.cell_radius)
    ut_xy = _uniform_disc(rng, config.num_ut, config.cell_radius)
    dist = np.linalg.norm(ut_xy[:, None, :] - bs_xy[None, :, :], axis=-1)
    beta = pathloss_gain(dist, config.d0, config.pathloss_exp, config.ref_gain_db)

    blocks = rayleigh_blocks(beta, config.mr, config.mt, rng)
    return ChannelSet(blocks=blocks, large_scale=beta, bs_xy=bs_xy, ut_xy=ut_xy)


# ---------------------------------------------------------------------
# CLUSTERS
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class ClusterMap:
    """
    serving[i]  BSs serving UT i, ranked (best first).
    served[k]   UTs served by BS k, ascending (derived).
    slots[i]    serving[i] in ascending BS order; the block layout order.
    """
    num_bs: int
    serving: Tuple[Tuple[int, ...], ...]
    served: Tuple[Tuple[int, ...], ...] = field(init=False)
    slots: Tuple[Tuple[int, ...], ...] = field(init=False)
    _slot_arrays: Tuple[np.ndarray, ...] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        serving = tuple(tuple(int(k) for k in row) for row in self.serving)
        if not serving:
            raise ConfigurationError("cluster map needs at least one UT")
        sizes = {len(row) for row in serving}
        if len(sizes) != 1:
            raise ConfigurationError(f"every serving cluster must have the same size, got sizes {sorted(sizes)}")
        for i, row in enumerate(serving):
            if not row:
                raise ConfigurationError(f"UT {i} has an empty serving cluster")
            if len(set(row)) != len(row):
                raise ConfigurationError(f"UT {i} has duplicate BSs in its cluster: {row}")
            if any(k < 0 or k >= self.num_bs for k in row):
                raise ConfigurationError(f"UT {i} cluster {row} has BS indices outside [0, {self.num_bs})")

        served = [[] for _ in range(self.num_bs)]
        for i, row in enumerate(serving):
            for k in row:
                served[k].append(i)

        slots = tuple(tuple(sorted(row)) for row in serving)
        object.__setattr__(self, "serving", serving)
        object.__setattr__(self, "served", tuple(tuple(g) for g in served))
        object.__setattr__(self, "slots", slots)
        object.__setattr__(self, "_slot_arrays", tuple(np.asarray(row, dtype=np.intp) for row in slots))

    @classmethod
    def full(cls, num_bs: int, num_ut: int) -> "ClusterMap":
        """Conventional network MIMO: every UT served by every BS."""
        return cls(num_bs=num_bs, serving=tuple(tuple(range(num_bs)) for _ in range(num_ut)))

    @property
    def num_ut(self) -> int:
        return len(self.serving)

    @property
    def cluster_size(self) -> int:
        return len(self.serving[0])

    @property
    def active_bs(self) -> np.ndarray:
        return np.array([len(g) > 0 for g in self.served], dtype=bool)

    def slot_bs(self, i: int) -> np.ndarray:
        return self._slot_arrays[i]

    def slot_of(self, i: int, k: int) -> int:
        try:
            return self.slots[i].index(k)
        except ValueError:
            raise DimensionError(f"BS {k} does not serve UT {i}") from None


def select_clusters(
        channels: ChannelSet,
        cluster_size: int,
        policy: str = "large_scale",
        bs_power: Optional[Sequence[float]] = None,
) -> ClusterMap:
    """
    Keep, for every UT, the `cluster_size` BSs with the best channel conditions.

    "large_scale" ranks by beta_{i,k}; "received_power" ranks by P_k * beta_{i,k}.
    Ties fall back to ||H_{i,k}||_F^2, then to the lower BS index.
    """
    num_ut, num_bs = channels.num_ut, channels.num_bs
    if not 1 <= cluster_size <= num_bs:
        raise ConfigurationError(f"cluster_size must be in [1, {num_bs}], got {cluster_size}")
    if policy not in CLUSTER_POLICIES:
        raise ConfigurationError(f"unknown cluster policy {policy!r}; expected one of {CLUSTER_POLICIES}")

    metric = channels.large_scale
    if policy == "received_power":
        if bs_power is None:
            raise ConfigurationError("received_power clustering needs the BS powers")
        metric = metric * np.asarray(bs_power, dtype=float)[None, :]
    fro = np.sum(np.abs(channels.blocks) ** 2, axis=(2, 3))
    index = np.arange(num_bs)

    serving = []
    for i in range(num_ut):
        # lexsort: last key is primary
        order = np.lexsort((index, -fro[i], -metric[i]))
        serving.append(tuple(int(k) for k in order[:cluster_size]))

    cluster = ClusterMap(num_bs=num_bs, serving=tuple(serving))
    idle = [k for k, g in enumerate(cluster.served) if not g]
    if idle:
        log.debug("BSs with empty served group (zero precoder): %s", idle)
    return cluster


# ---------------------------------------------------------------------
# SELECTION-MATRIX MACHINERY
# ---------------------------------------------------------------------
def embed(p_i: np.ndarray, cluster: ClusterMap, i: int, mt: Optional[int] = None) -> np.ndarray:
    """
    W_i P_i without W_i: scatter UT i's (B_i, M_t, d_i) blocks into the full
    (B*M_t, d_i) stack. Rows of non-serving BSs stay zero.
    """
    p_i = np.asarray(p_i)
    slots = cluster.slot_bs(i)
    if p_i.ndim != 3 or p_i.shape[0] != len(slots) or (mt is not None and p_i.shape[1] != mt):
        raise DimensionError(f"UT {i}: blocks of shape {p_i.shape} do not match cluster {cluster.slots[i]}")
    n_t, d = p_i.shape[1], p_i.shape[2]
    full = np.zeros((cluster.num_bs, n_t, d), dtype=p_i.dtype)
    full[slots] = p_i
    return full.reshape(cluster.num_bs * n_t, d)


def extract(full: np.ndarray, cluster: ClusterMap, i: int, mt: int) -> np.ndarray:
    """Inverse of `embed`: gather UT i's cluster blocks out of a (B*M_t, d_i) stack."""
    full = np.asarray(full)
    if full.ndim != 2 or full.shape[0] != cluster.num_bs * mt:
        raise DimensionError(f"UT {i}: stacked precoder of shape {full.shape} is not ({cluster.num_bs * mt}, d)")
    return full.reshape(cluster.num_bs, mt, full.shape[1])[cluster.slot_bs(i)].copy()


def _blocks_of(p) -> Sequence[np.ndarray]:
    return getattr(p, "blocks", p)


def per_bs_inner(a, b, cluster: ClusterMap) -> np.ndarray:
    """
    Component k is sum_{i in U_k} Re tr(A_{i,k}^H B_{i,k}), the Q_k-masked
    inner product of two block stacks.
    """
    a_blocks, b_blocks = _blocks_of(a), _blocks_of(b)
    if len(a_blocks) != cluster.num_ut or len(b_blocks) != cluster.num_ut:
        raise DimensionError(f"expected {cluster.num_ut} per-UT block stacks")
    out = np.zeros(cluster.num_bs)
    for i in range(cluster.num_ut):
        a_i, b_i = a_blocks[i], b_blocks[i]
        if a_i.shape != b_i.shape or a_i.shape[0] != len(cluster.slots[i]):
            raise DimensionError(f"UT {i}: block shapes {a_i.shape} / {b_i.shape} do not conform to the cluster")
        slot_vals = np.real(np.sum(a_i.conj() * b_i, axis=(1, 2)))
        np.add.at(out, cluster.slot_bs(i), slot_vals)
    return out


def per_bs_power(p, cluster: ClusterMap) -> np.ndarray:
    """Transmit power of every BS; BSs with an empty served group report 0."""
    return per_bs_inner(p, p, cluster)


# ---------------------------------------------------------------------
# DUMP / LOAD
# ---------------------------------------------------------------------
def _fmt(x: float) -> str:
    return f"{x:.17g}"


def dump_channels(channels: ChannelSet, path: Union[str, Path]) -> None:
    """
    Text format:
        B U Mt Mr
        one line per (i, k, row): Mt entries "re,im" separated by spaces
        beta
        U lines of B large-scale gains
    """
    u, b, mr, mt = channels.blocks.shape
    lines = [f"{b} {u} {mt} {mr}"]
    for i in range(u):
        for k in range(b):
            for row in channels.blocks[i, k]:
                lines.append(" ".join(f"{_fmt(z.real)},{_fmt(z.imag)}" for z in row))
    lines.append("beta")
    for i in range(u):
        lines.append(" ".join(_fmt(x) for x in channels.large_scale[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_channels(path: Union[str, Path]) -> ChannelSet:
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty channel file")

    try:
        b, u, mt, mr = (int(x) for x in lines[0].split())
    except ValueError:
        raise ParseError(path, 1, f"bad header {lines[0]!r}, expected 'B U Mt Mr'") from None
    if min(b, u, mt, mr) < 1:
        raise DimensionError(f"{path}: header dimensions must be positive, got B={b} U={u} Mt={mt} Mr={mr}")

    n_rows = u * b * mr
    expected = 1 + n_rows + 1 + u
    if len(lines) < expected:
        raise ParseError(path, len(lines), f"truncated file: expected {expected} lines, found {len(lines)}")

    blocks = np.zeros((u, b, mr, mt), dtype=np.complex128)
    for n in range(n_rows):
        line_no = n + 2
        fields = lines[n + 1].split()
        if len(fields) != mt:
            raise ParseError(path, line_no, f"expected {mt} entries, found {len(fields)}")
        try:
            row = [complex(float(re), float(im)) for re, im in (f.split(",") for f in fields)]
        except ValueError:
            raise ParseError(path, line_no, "entries must be 're,im' pairs") from None
        i, rest = divmod(n, b * mr)
        k, r = divmod(rest, mr)
        blocks[i, k, r] = row

    if lines[1 + n_rows].strip() != "beta":
        raise ParseError(path, n_rows + 2, "missing 'beta' section marker")
    beta = np.zeros((u, b))
    for i in range(u):
        line_no = n_rows + 3 + i
        try:
            vals = [float(x) for x in lines[n_rows + 2 + i].split()]
        except ValueError:
            raise ParseError(path, line_no, "large-scale gains must be real numbers") from None
        if len(vals) != b:
            raise ParseError(path, line_no, f"expected {b} gains, found {len(vals)}")
        beta[i] = vals

    return ChannelSet(blocks=blocks, large_scale=beta)


def check_conforms(config: NetworkConfig, channels: ChannelSet, cluster: ClusterMap) -> None:
    if channels.blocks.shape != (config.num_ut, config.num_bs, config.mr, config.mt):
        raise DimensionError(
            f"channels {channels.blocks.shape} do not match config "
            f"(U={config.num_ut}, B={config.num_bs}, Mr={config.mr}, Mt={config.mt})"
        )
    if cluster.num_bs != config.num_bs or cluster.num_ut != config.num_ut:
        raise DimensionError("cluster map does not match the configured network size")


def snr_db(config: NetworkConfig, channels: ChannelSet) -> float:
    """Mean per-link receive SNR (dB) over the strongest BS of every UT; a log helper."""
    best = channels.large_scale.max(axis=1)
    snr = float(np.mean(best)) * float(np.mean(config.power_array)) * config.mt / config.noise_power
    return 10.0 * math.log10(snr) if snr > 0 else float("-inf")
