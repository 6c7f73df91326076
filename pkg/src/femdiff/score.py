"""Denoiser models: the analytic Gaussian oracle and a trainable multiscale
FEM-convolution network (encoder, V-cycle with FiLM time conditioning,
decoder), plus the denoising training loop.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse import coo_matrix

from . import autodiff as ad
from .errors import NonFiniteLoss, SingularSystem
from .fem import Field, build_neighbor_table
from .mesh import MeshHierarchy
from .randfield import CovarianceFactor
from .sde import NoiseSchedule


class DenoiserModel(abc.ABC):
    """Contract: denoise(a_t, sigma) estimates E[A0 | A_t = a_t]; vjp pulls a
    cotangent back through that map."""

    channels: int = 1

    @abc.abstractmethod
    def denoise(self, a_t: Field, sigma: float) -> Field: ...

    @abc.abstractmethod
    def vjp(self, a_t: Field, sigma: float, upstream: Field) -> Field: ...


class GaussianOracleDenoiser(DenoiserModel):
    """Exact conditional expectation for a Gaussian data distribution
    N(mean, prior_cov) under noise sigma^2 * noise_cov:
    a0_hat = m + S (S + sigma^2 K)^-1 (a - m), applied per channel."""

    def __init__(self, mean, prior_cov, noise_cov, jitter: float = 1e-12):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1)
        self.prior_cov = np.asarray(prior_cov, dtype=np.float64)
        self.noise_cov = np.asarray(noise_cov, dtype=np.float64)
        self.jitter = float(jitter)
        n = len(self.mean)
        if self.prior_cov.shape != (n, n) or self.noise_cov.shape != (n, n):
            raise ValueError("covariance shapes do not match the mean")
        self._factors: dict[float, object] = {}

    def _factor(self, sigma: float):
        key = float(sigma)
        fac = self._factors.get(key)
        if fac is None:
            mat = self.prior_cov + sigma**2 * self.noise_cov
            mat = mat + self.jitter * np.eye(len(mat))
            try:
                fac = cho_factor(mat)
            except np.linalg.LinAlgError as exc:
                raise SingularSystem(f"denoiser factorization at sigma={sigma}: {exc}") from exc
            self._factors[key] = fac
        return fac

    def denoise(self, a_t: Field, sigma: float) -> Field:
        if sigma == 0.0:
            return a_t
        resid = a_t.values - self.mean
        x = cho_solve(self._factor(sigma), resid)
        return Field(self.mean + self.prior_cov @ x, a_t.graph_ref)

    def vjp(self, a_t: Field, sigma: float, upstream: Field) -> Field:
        if sigma == 0.0:
            return upstream
        out = cho_solve(self._factor(sigma), self.prior_cov @ upstream.values)
        return Field(out, a_t.graph_ref)


def time_embedding(
    sigma: float, frequencies: np.ndarray, sigma_min: float, sigma_max: float
) -> np.ndarray:
    """Random Fourier features of the noise level: log sigma is mapped
    affinely onto [0, 1] and expanded as [sin(2 pi w t); cos(2 pi w t)]."""
    tau = (np.log(sigma) - np.log(sigma_min)) / (np.log(sigma_max) - np.log(sigma_min))
    phase = 2.0 * np.pi * np.asarray(frequencies, dtype=np.float64) * tau
    return np.concatenate([np.sin(phase), np.cos(phase)])


def film_modulate(h: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Feature-wise modulation h * (1 + alpha) + beta."""
    h = np.asarray(h, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if h.shape[-1] != alpha.shape[-1] or h.shape[-1] != beta.shape[-1]:
        raise ValueError("channel dimensions do not match")
    return h * (1.0 + alpha) + beta


@dataclass(frozen=True)
class TransferParams:
    """One-hidden-layer residual map used by restriction and prolongation."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _transfer_tape(base: ad.Var, inp: ad.Var, params: list[ad.Var]) -> ad.Var:
    w1, b1, w2, b2 = params
    hidden = ad.silu(ad.add(ad.matmul(inp, w1), b1))
    return ad.add(ad.add(base, ad.matmul(hidden, w2)), b2)


def restrict(h_fine: np.ndarray, assign: np.ndarray, params: TransferParams) -> np.ndarray:
    """Average each coarse pre-image, then apply the residual map."""
    mean = _pool_matrix(assign, int(assign.max()) + 1) @ np.asarray(h_fine, float)
    base = ad.leaf(mean)
    return _transfer_tape(base, base, [ad.leaf(p) for p in
                                       (params.w1, params.b1, params.w2, params.b2)]).value


def prolong(
    h_coarse: np.ndarray, assign: np.ndarray, skip: np.ndarray, params: TransferParams
) -> np.ndarray:
    """Broadcast coarse features to their pre-images and combine with the
    down-pass skip through the residual map."""
    bc = np.asarray(h_coarse, float)[assign]
    base = ad.leaf(bc)
    cat = ad.concat_cols([base, ad.leaf(np.asarray(skip, float))])
    return _transfer_tape(base, cat, [ad.leaf(p) for p in
                                      (params.w1, params.b1, params.w2, params.b2)]).value


def _pool_matrix(assign: np.ndarray, n_coarse: int):
    counts = np.bincount(assign, minlength=n_coarse).astype(np.float64)
    vals = 1.0 / counts[assign]
    rows = assign
    cols = np.arange(len(assign), dtype=np.int64)
    return coo_matrix((vals, (rows, cols)), shape=(n_coarse, len(assign))).tocsr()


def _broadcast_matrix(assign: np.ndarray, n_coarse: int):
    vals = np.ones(len(assign))
    rows = np.arange(len(assign), dtype=np.int64)
    return coo_matrix((vals, (rows, assign)), shape=(len(assign), n_coarse)).tocsr()


@dataclass(frozen=True)
class NetConfig:
    hidden: int = 32
    convs_per_level: int = 2
    patch: int = 5
    time_dim: int = 16
    freq_scale: float = 10.0
    mixing: str = "dense"  # "dense" or "vector"
    in_channels: int = 1
    sigma_min: float = 1e-3
    sigma_max: float = 40.0

    def __post_init__(self):
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.mixing not in ("dense", "vector"):
            raise ValueError(f"unknown mixing mode {self.mixing!r}")


class FemUNet(DenoiserModel):
    """Reduced multiscale denoiser: affine encoder on [a_t; x; gamma(sigma)],
    per level K FEM convolutions with zero-initialised FiLM and coordinate
    re-injection, residual restriction to the coarsest level, prolongation
    back through the skips, and a zero-initialised affine decoder (so the
    untrained network outputs exactly zero).
    """

    def __init__(self, hierarchy: MeshHierarchy, config: NetConfig, rng: np.random.Generator):
        self.hierarchy = hierarchy
        self.config = config
        self.channels = config.in_channels
        self.frequencies = config.freq_scale * rng.standard_normal(config.time_dim // 2)

        self.tables = [
            build_neighbor_table(g.node_positions, r, g.ref)
            for g, r in zip(hierarchy.levels, hierarchy.radii)
        ]
        self.stencils = [t.patch_stencil(config.patch) for t in self.tables]
        self.pool_mats = [
            _pool_matrix(a, hierarchy.levels[l + 1].n_nodes)
            for l, a in enumerate(hierarchy.assigns)
        ]
        self.bcast_mats = [
            _broadcast_matrix(a, hierarchy.levels[l + 1].n_nodes)
            for l, a in enumerate(hierarchy.assigns)
        ]

        h, dt, p = config.hidden, config.time_dim, config.patch
        cin = config.in_channels + 2 + dt
        levels = hierarchy.n_levels

        def dense(shape, fan_in):
            return rng.standard_normal(shape) / np.sqrt(fan_in)

        self.params: dict[str, np.ndarray] = {}
        prm = self.params
        prm["enc_w"] = dense((cin, h), cin)
        prm["enc_b"] = np.zeros(h)
        for l in range(levels):
            prm[f"lvl{l}_pos_w"] = dense((2, h), 2)
            prm[f"lvl{l}_pos_b"] = np.zeros(h)
            for k in range(config.convs_per_level):
                tag = f"lvl{l}_conv{k}"
                if config.mixing == "dense":
                    prm[f"{tag}_w"] = dense((h, h, p, p), h)
                else:
                    prm[f"{tag}_gate"] = dense((h, p * p), 4)
                    prm[f"{tag}_mix"] = dense((h, h), h)
                prm[f"{tag}_film_w1"] = dense((dt, dt), dt)
                prm[f"{tag}_film_b1"] = np.zeros(dt)
                prm[f"{tag}_film_aw"] = np.zeros((dt, h))
                prm[f"{tag}_film_ab"] = np.zeros(h)
                prm[f"{tag}_film_bw"] = np.zeros((dt, h))
                prm[f"{tag}_film_bb"] = np.zeros(h)
        for l in range(levels - 1):
            prm[f"down{l}_w1"] = dense((h, h), h)
            prm[f"down{l}_b1"] = np.zeros(h)
            prm[f"down{l}_w2"] = np.zeros((h, h))
            prm[f"down{l}_b2"] = np.zeros(h)
            prm[f"up{l}_w1"] = dense((2 * h, h), 2 * h)
            prm[f"up{l}_b1"] = np.zeros(h)
            prm[f"up{l}_w2"] = np.zeros((h, h))
            prm[f"up{l}_b2"] = np.zeros(h)
        prm["dec_w"] = np.zeros((h, config.in_channels))
        prm["dec_b"] = np.zeros(config.in_channels)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def params_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_params_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for name, v in self.params.items():
            self.params[name] = vec[pos : pos + v.size].reshape(v.shape).copy()
            pos += v.size

    def _forward_graph(self, a_values: np.ndarray, sigma: float):
        cfg = self.config
        leaves = {name: ad.leaf(v) for name, v in self.params.items()}
        a_in = ad.leaf(a_values)

        gamma = time_embedding(sigma, self.frequencies, cfg.sigma_min, cfg.sigma_max)
        gamma_row = ad.leaf(gamma[None, :])
        n0 = self.hierarchy.levels[0].n_nodes
        x0 = ad.leaf(self.hierarchy.levels[0].node_positions)
        gamma_tile = ad.leaf(np.tile(gamma, (n0, 1)))

        h = ad.add(
            ad.matmul(ad.concat_cols([a_in, x0, gamma_tile]), leaves["enc_w"]),
            leaves["enc_b"],
        )

        skips = []
        levels = self.hierarchy.n_levels
        for l in range(levels):
            pos = ad.leaf(self.hierarchy.levels[l].node_positions)
            h = ad.add(h, ad.add(ad.matmul(pos, leaves[f"lvl{l}_pos_w"]), leaves[f"lvl{l}_pos_b"]))
            for k in range(cfg.convs_per_level):
                tag = f"lvl{l}_conv{k}"
                if cfg.mixing == "dense":
                    z = ad.patch_gather(self.stencils[l], h)
                    w = ad.reshape(leaves[f"{tag}_w"], (cfg.hidden, cfg.hidden, cfg.patch**2))
                    hc = ad.mix_dense(z, w)
                else:
                    v = ad.matmul(h, leaves[f"{tag}_mix"])
                    z = ad.patch_gather(self.stencils[l], v)
                    hc = ad.mix_vector(z, leaves[f"{tag}_gate"])
                emb = ad.silu(ad.add(ad.matmul(gamma_row, leaves[f"{tag}_film_w1"]),
                                     leaves[f"{tag}_film_b1"]))
                alpha = ad.add(ad.matmul(emb, leaves[f"{tag}_film_aw"]), leaves[f"{tag}_film_ab"])
                beta = ad.add(ad.matmul(emb, leaves[f"{tag}_film_bw"]), leaves[f"{tag}_film_bb"])
                h = ad.add(ad.mul(hc, ad.add(alpha, 1.0)), beta)
            if l < levels - 1:
                skips.append(h)
                base = ad.sparse_apply(self.pool_mats[l], h)
                h = _transfer_tape(base, base, [leaves[f"down{l}_{n}"] for n in ("w1", "b1", "w2", "b2")])
        for l in reversed(range(levels - 1)):
            bc = ad.sparse_apply(self.bcast_mats[l], h)
            cat = ad.concat_cols([bc, skips[l]])
            h = _transfer_tape(bc, cat, [leaves[f"up{l}_{n}"] for n in ("w1", "b1", "w2", "b2")])

        out = ad.add(ad.matmul(h, leaves["dec_w"]), leaves["dec_b"])
        return out, a_in, leaves

    def denoise(self, a_t: Field, sigma: float) -> Field:
        out, _, _ = self._forward_graph(a_t.values, sigma)
        return Field(out.value, a_t.graph_ref)

    def vjp(self, a_t: Field, sigma: float, upstream: Field) -> Field:
        out, a_in, _ = self._forward_graph(a_t.values, sigma)
        ad.backward(ad.inner(out, upstream.values))
        return Field(a_in.grad, a_t.graph_ref)

    def value_and_grads(self, a_t: np.ndarray, sigma: float, target: np.ndarray):
        """Mean squared error against a clean field, with gradients for
        every parameter and the input."""
        out, a_in, leaves = self._forward_graph(a_t, sigma)
        loss = ad.mse(out, target)
        ad.backward(loss)
        grads = {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in leaves.items()
        }
        return float(loss.value), grads, a_in.grad


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    iterations: int = 1000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.iterations) < 1 or self.learning_rate < 0:
            raise ValueError("hyperparameters must be positive")


def train_denoiser(
    net: FemUNet,
    dataset: list[Field],
    factor: CovarianceFactor,
    schedule: NoiseSchedule,
    config: TrainConfig,
) -> np.ndarray:
    """Denoising objective: E || net(a0 + sigma L z, sigma) - a0 ||^2 with
    sigma log-uniform on [sigma_min, sigma_max]. Adam, single-threaded,
    deterministic per seed. Returns the per-iteration loss trace."""
    if not dataset:
        raise ValueError("dataset is empty")
    data = np.stack([f.values for f in dataset])
    rng = np.random.default_rng(config.seed)
    log_lo, log_hi = np.log(schedule.sigma_min), np.log(schedule.sigma_max)

    m = {k: np.zeros_like(v) for k, v in net.params.items()}
    v = {k: np.zeros_like(vv) for k, vv in net.params.items()}
    trace = np.empty(config.iterations)

    for it in range(config.iterations):
        idx = rng.integers(0, len(data), size=config.batch_size)
        sigmas = np.exp(rng.uniform(log_lo, log_hi, size=config.batch_size))
        loss_acc = 0.0
        grad_acc = {k: np.zeros_like(p) for k, p in net.params.items()}
        for j, sigma in zip(idx, sigmas):
            a0 = data[j]
            noise = factor.chol @ rng.standard_normal(a0.shape)
            loss, grads, _ = net.value_and_grads(a0 + sigma * noise, float(sigma), a0)
            loss_acc += loss
            for k, g in grads.items():
                grad_acc[k] += g
        loss_acc /= config.batch_size
        if not np.isfinite(loss_acc):
            raise NonFiniteLoss(it)
        trace[it] = loss_acc

        if config.learning_rate > 0:
            t = it + 1
            corr1 = 1.0 - config.beta1**t
            corr2 = 1.0 - config.beta2**t
            for k, p in net.params.items():
                g = grad_acc[k] / config.batch_size
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g
                step = config.learning_rate * (m[k] / corr1) / (np.sqrt(v[k] / corr2) + config.eps)
                net.params[k] = p - step
    return trace


def clone_to_hierarchy(net: FemUNet, hierarchy: MeshHierarchy) -> FemUNet:
    """Rebind trained parameters to a different discretisation; the physical
    filters are resolution invariant, so only the geometry changes."""
    fresh = FemUNet(hierarchy, net.config, np.random.default_rng(0))
    fresh.params = {k: v.copy() for k, v in net.params.items()}
    fresh.frequencies = net.frequencies.copy()
    return fresh
