"""Modality-aware advantage learning with the sparse value-regression losses.

A(s, a[, z]) = Q(s, a[, z]) - V(s[, z]), trained by alternating the sparse
V objective and a squared Bellman residual for Q. The modality-free variant
(z absent from every input) is the same machinery and serves as the
baseline's pre-training stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .difffn import autodiff as ad
from .difffn.nets import MLPApproximator, ParamVector, build_params, gradient
from .difffn.optim import MomentState, sgd_step
from .errors import ConfigError, DivergenceError
from .rng import generator


@dataclass
class AdvantageConfig:
    alpha: float = 2.0
    gamma: float = 0.99
    hidden: tuple = (64,)
    lr: float = 3e-4
    batch_size: int = 128
    n_steps: int = 50_000
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")


class AdvantageModel:
    """Q and V approximators over (s, a[, z]) / (s[, z]) inputs.

    The latent columns are standardized with statistics frozen at training
    time, so their scale matches the one-hot state/action features.
    """

    def __init__(self, d_state: int, d_action: int, d_z: int, cfg: AdvantageConfig,
                 modality_aware: bool = True, init_rng=None):
        self.d_state = d_state
        self.d_action = d_action
        self.d_z = d_z if modality_aware else 0
        self.modality_aware = modality_aware
        self.cfg = cfg
        q_in = d_state + d_action + self.d_z
        v_in = d_state + self.d_z
        self.q_net = MLPApproximator((q_in, *cfg.hidden, 1), "q")
        self.v_net = MLPApproximator((v_in, *cfg.hidden, 1), "v")
        rng = init_rng if init_rng is not None else generator(cfg.seed, "advantage-init")
        self.q_params = build_params([self.q_net], rng)
        self.v_params = build_params([self.v_net], rng)
        self.z_mu = np.zeros(self.d_z)
        self.z_sigma = np.ones(self.d_z)

    def fit_z_stats(self, z_rows: np.ndarray):
        if self.modality_aware and z_rows is not None and len(z_rows):
            self.z_mu = z_rows.mean(axis=0)
            self.z_sigma = np.maximum(z_rows.std(axis=0), 1e-6)

    def _norm_z(self, z):
        return (np.atleast_2d(z) - self.z_mu) / self.z_sigma

    def _check_z(self, z):
        if self.modality_aware and z is None:
            raise ConfigError("modality-aware model requires z")
        if not self.modality_aware and z is not None:
            raise ConfigError("modality-free model must not receive z")

    def _q_input(self, s, a, z):
        parts = [np.atleast_2d(s), np.atleast_2d(a)]
        if self.modality_aware:
            parts.append(self._norm_z(z))
        return np.concatenate(parts, axis=1)

    def _v_input(self, s, z):
        parts = [np.atleast_2d(s)]
        if self.modality_aware:
            parts.append(self._norm_z(z))
        return np.concatenate(parts, axis=1)

    def q_values(self, s, a, z=None) -> np.ndarray:
        self._check_z(z)
        return self.q_net.forward(self.q_params, self._q_input(s, a, z))[:, 0]

    def v_values(self, s, z=None) -> np.ndarray:
        self._check_z(z)
        return self.v_net.forward(self.v_params, self._v_input(s, z))[:, 0]


def advantage(model: AdvantageModel, s, a, z=None):
    """A = Q - V under the trained model; z must match the modality flag."""
    out = model.q_values(s, a, z) - model.v_values(s, z)
    return float(out[0]) if out.size == 1 else out


def sparse_v_terms(q: np.ndarray, v: np.ndarray, alpha: float) -> np.ndarray:
    """Per-sample sparse value objective: I(1 + (Q-V)/2a > 0)(1 + (Q-V)/2a)^2 + V/a."""
    gate = 1.0 + (q - v) / (2.0 * alpha)
    return np.where(gate > 0.0, gate * gate, 0.0) + v / alpha


def sparse_q_terms(q: np.ndarray, target: np.ndarray) -> np.ndarray:
    return (target - q) ** 2


def bellman_target(r: np.ndarray, v_next: np.ndarray, done: np.ndarray, gamma: float) -> np.ndarray:
    """r + gamma * V(s'), with terminal transitions using r alone."""
    return r + gamma * v_next * (1.0 - done.astype(np.float64))


def sparse_v_loss(model: AdvantageModel, batch: dict) -> float:
    """Batch value of the sparse V objective; Q is detached."""
    z = batch.get("z") if model.modality_aware else None
    q = model.q_values(batch["s"], batch["a"], z)
    v = model.v_values(batch["s"], z)
    return float(np.mean(sparse_v_terms(q, v, model.cfg.alpha)))


def sparse_q_loss(model: AdvantageModel, batch: dict) -> float:
    """Batch squared Bellman residual against V(s'); V is detached."""
    z = batch.get("z") if model.modality_aware else None
    q = model.q_values(batch["s"], batch["a"], z)
    v_next = model.v_values(batch["s_next"], z)
    target = bellman_target(batch["r"], v_next, batch["done"], model.cfg.gamma)
    return float(np.mean(sparse_q_terms(q, target)))


def train_advantage(flat_data: dict, cfg: AdvantageConfig, modality_aware: bool = True,
                    log_every: int = 0) -> AdvantageModel:
    """Alternating sparse V / Bellman Q updates on a relabeled dataset."""
    d_state = flat_data["s"].shape[1]
    d_action = flat_data["a"].shape[1]
    d_z = flat_data["z"].shape[1] if (modality_aware and "z" in flat_data) else 0
    if modality_aware and d_z == 0:
        raise ConfigError("modality-aware advantage training needs a relabeled dataset")
    model = AdvantageModel(d_state, d_action, d_z, cfg, modality_aware=modality_aware)
    if modality_aware:
        model.fit_z_stats(flat_data["z"])
    rng = generator(cfg.seed, "advantage-train")
    n = flat_data["s"].shape[0]

    z_all = flat_data["z"] if modality_aware else None
    s_all, a_all = flat_data["s"], flat_data["a"]
    sn_all, r_all, d_all = flat_data["s_next"], flat_data["r"], flat_data["done"]

    opt_v = MomentState.for_params(model.v_params)
    opt_q = MomentState.for_params(model.q_params)
    alpha = cfg.alpha

    for step_i in range(cfg.n_steps):
        idx = rng.integers(n, size=min(cfg.batch_size, n))
        s, a, r = s_all[idx], a_all[idx], r_all[idx]
        s_next, done = sn_all[idx], d_all[idx]
        z = z_all[idx] if modality_aware else None

        # V step: Q frozen
        q_const = model.q_values(s, a, z)
        v_in = model._v_input(s, z)

        def v_loss(flatp, layout):
            v = model.v_net.forward_rows(flatp, layout, v_in)
            vv = ad.value(v)
            gate = 1.0 + (q_const - vv) / (2.0 * alpha)
            active = gate > 0.0
            # d/dv of the gated square is -(gate)/alpha on the active set
            sq = ad.weighted_mse(v, q_const + 2.0 * alpha, weights=active / (2.0 * alpha) ** 2)
            lin = ad.mul(ad.vmean(v), 1.0 / alpha)
            return ad.add(sq, lin)

        g = gradient(v_loss, model.v_params)
        sgd_step(model.v_params, g, cfg.lr, opt_v)

        # Q step: V frozen
        v_next = model.v_values(s_next, z)
        target = bellman_target(r, v_next, done, cfg.gamma)
        q_in = model._q_input(s, a, z)

        def q_loss(flatp, layout):
            q = model.q_net.forward_rows(flatp, layout, q_in)
            return ad.weighted_mse(q, target)

        g = gradient(q_loss, model.q_params)
        sgd_step(model.q_params, g, cfg.lr, opt_q)

        if not np.all(np.isfinite(model.q_params.values)) or not np.all(
            np.isfinite(model.v_params.values)
        ):
            raise DivergenceError(f"advantage training diverged at step {step_i}")
    return model


def export_advantages_csv(path, flat_data: dict, model: AdvantageModel):
    """Per-sample advantage table for density analysis."""
    import csv

    z = flat_data.get("z") if model.modality_aware else None
    adv = advantage(model, flat_data["s"], flat_data["a"], z)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj_idx", "step_idx", "advantage", "modality", "quality"])
        for i in range(len(adv)):
            writer.writerow(
                [
                    int(flat_data["traj_idx"][i]),
                    int(flat_data["step_idx"][i]),
                    "%.17g" % adv[i],
                    int(flat_data["modality"][i]),
                    int(flat_data["quality"][i]),
                ]
            )
