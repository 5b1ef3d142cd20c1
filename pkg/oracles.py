"""
Dense reference implementations for the tests.

Everything here materializes the selection matrices W_i (B M_t x B_i M_t) and
the BS masks Q_k (B M_t x B M_t) and uses plain numpy; none of the dense helpers
share a code path with the precoders package. `small_instance` builds fixtures.
"""
import numpy as np

from precoders.network_model import NetworkConfig, generate_channels, select_clusters
from precoders.wsr_objective import WsrObjective


def selection_matrix(cluster, i, mt):
    slots = cluster.slots[i]
    w = np.zeros((cluster.num_bs * mt, len(slots) * mt))
    for s, k in enumerate(slots):
        w[k * mt:(k + 1) * mt, s * mt:(s + 1) * mt] = np.eye(mt)
    return w


def bs_mask(num_bs, k, mt):
    q = np.zeros((num_bs * mt, num_bs * mt))
    q[k * mt:(k + 1) * mt, k * mt:(k + 1) * mt] = np.eye(mt)
    return q


def stacked(blocks_i):
    """(B_i, M_t, d) -> (B_i M_t, d)."""
    return blocks_i.reshape(-1, blocks_i.shape[2])


def stacked_channel(channels, i):
    """H_i = [H_{i,1} ... H_{i,B}], (M_r, B M_t)."""
    return np.concatenate(list(channels.blocks[i]), axis=1)


def masked_inner(p, xi, cluster, mt):
    """sum_i Re tr(P_i^H W_i^H Q_k W_i xi_i) for every k."""
    out = np.zeros(cluster.num_bs)
    for k in range(cluster.num_bs):
        q = bs_mask(cluster.num_bs, k, mt)
        for i in range(cluster.num_ut):
            w = selection_matrix(cluster, i, mt)
            p_i, xi_i = stacked(p.blocks[i]), stacked(xi.blocks[i])
            out[k] += np.real(np.trace(p_i.conj().T @ w.T @ q @ w @ xi_i))
    return out


def dense_per_bs_power(p, cluster, mt):
    return masked_inner(p, p, cluster, mt)


def dense_coefficients(p, xi, cluster, mt, bs_power):
    """mu / lambda / rho: (1/P_k) sum_{i in U_k} Re tr(P_i^H W_i^H Q_k W_i xi_i)."""
    inner = masked_inner(p, xi, cluster, mt)
    out = np.zeros(cluster.num_bs)
    for k in range(cluster.num_bs):
        if cluster.served[k]:
            out[k] = inner[k] / bs_power[k]
    return out


def dense_gamma(p, xi, cluster, mt, bs_power):
    cand = p + xi
    power = masked_inner(cand, cand, cluster, mt)
    return np.array([
        np.sqrt(bs_power[k] / power[k]) if cluster.served[k] else 1.0
        for k in range(cluster.num_bs)
    ])


def dense_received(channels, p, i, j, mt):
    """H_i W_j P_j."""
    w = selection_matrix(p.cluster, j, mt)
    return stacked_channel(channels, i) @ w @ stacked(p.blocks[j])


def dense_rates(channels, p, noise_power):
    """log det(R_i + V_ii V_ii^H) - log det(R_i) with everything built densely."""
    num_ut, mt, mr = channels.num_ut, channels.mt, channels.mr
    rates = np.zeros(num_ut)
    for i in range(num_ut):
        r = noise_power * np.eye(mr, dtype=complex)
        for j in range(num_ut):
            if j != i:
                v = dense_received(channels, p, i, j, mt)
                r = r + v @ v.conj().T
        v_ii = dense_received(channels, p, i, i, mt)
        rates[i] = np.linalg.slogdet(r + v_ii @ v_ii.conj().T)[1] - np.linalg.slogdet(r)[1]
    return rates


def dense_objective(channels, p, noise_power, weights):
    return -float(np.dot(weights, dense_rates(channels, p, noise_power)))


def small_instance(num_bs=3, num_ut=4, mt=4, mr=2, streams=1, bsc=2, seed=0,
                   power=1.0, noise=0.1, weights=None, pathloss_exp=3.5, **knobs):
    """(config, channels, cluster, objective) for a desk-sized random network at 0 dB reference gain."""
    config = NetworkConfig(
        num_bs=num_bs, num_ut=num_ut, mt=mt, mr=mr, streams=streams, bs_power=power,
        noise_power=noise, cluster_size=bsc, weights=weights, ref_gain_db=0.0,
        pathloss_exp=pathloss_exp, rng_seed=seed, **knobs,
    )
    channels = generate_channels(config, seed)
    cluster = select_clusters(channels, bsc)
    return config, channels, cluster, WsrObjective.from_config(config, channels, cluster)
