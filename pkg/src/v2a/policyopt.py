"""Target-policy learning: expectile value regression, filtered Q learning,
advantage-weighted policy extraction, and target-domain evaluation.

The Q loss follows the two-term form: a plain squared Bellman residual on
target batches plus a source term where each sample is weighted by its
selection mask times its composite score. The value net trains on the pooled
batches without weights; the policy is extracted by exponential
advantage-weighted behavior cloning over the pooled batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .difffn import autodiff as ad
from .difffn.nets import MLPApproximator, build_params, gradient
from .difffn.optim import MomentState, sgd_step
from .envsuite import PointMassEnv, TabularDomain, step
from .errors import ConfigError, DivergenceError
from .oracle import policy_evaluation, value_iteration
from .alignment import quantile_filter
from .rng import generator

POLICY_LOGVAR_MIN = -10.0
POLICY_LOGVAR_MAX = 4.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PolicyConfig:
    gamma: float = 0.99
    expectile_tau: float = 0.7
    awr_beta: float = 3.0
    polyak_mu: float = 0.005
    w_max: float = 100.0
    hidden: tuple = (64,)
    lr: float = 3e-4
    batch_src: int = 128
    batch_tar: int = 128
    n_steps: int = 100_000
    xi: float = 0.5
    filtered_pi: bool = False
    seed: int = 0
    metrics_every: int = 0  # 0 disables periodic metric rows

    def __post_init__(self):
        if not 0.0 < self.expectile_tau < 1.0:
            raise ConfigError("expectile tau must be in (0, 1)")
        if not 0.0 < self.polyak_mu < 1.0:
            raise ConfigError("polyak mu must be in (0, 1)")
        if self.awr_beta < 0:
            raise ConfigError("awr beta must be non-negative")


class PolicyModel:
    """Policy, value, Q, and target-Q approximators."""

    def __init__(self, d_state: int, d_action: int, cfg: PolicyConfig,
                 continuous: bool, init_rng=None):
        self.d_state = d_state
        self.d_action = d_action
        self.continuous = continuous
        self.cfg = cfg
        pi_out = 2 * d_action if continuous else d_action
        self.pi_net = MLPApproximator((d_state, *cfg.hidden, pi_out), "pi")
        self.v_net = MLPApproximator((d_state, *cfg.hidden, 1), "v")
        self.q_net = MLPApproximator((d_state + d_action, *cfg.hidden, 1), "q")
        rng = init_rng if init_rng is not None else generator(cfg.seed, "policy-init")
        self.pi_params = build_params([self.pi_net], rng)
        self.v_params = build_params([self.v_net], rng)
        self.q_params = build_params([self.q_net], rng)
        self.q_target_params = self.q_params.copy()

    def v_values(self, s) -> np.ndarray:
        return self.v_net.forward(self.v_params, np.atleast_2d(s))[:, 0]

    def q_values(self, s, a, target_net: bool = False) -> np.ndarray:
        params = self.q_target_params if target_net else self.q_params
        return self.q_net.forward(params, np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1))[:, 0]

    def greedy_action(self, s) -> np.ndarray:
        out = self.pi_net.forward(self.pi_params, np.atleast_2d(s))
        if self.continuous:
            return np.clip(out[:, : self.d_action], -1.0, 1.0)
        return out.argmax(axis=1)

    def log_prob_graph(self, flat, layout, s, a):
        """log pi(a | s) rows as a differentiable graph."""
        out = self.pi_net.forward_graph(flat, layout, s)
        if self.continuous:
            mean = ad.narrow(out, 0, self.d_action, axis=1)
            lv = ad.clip(
                ad.narrow(out, self.d_action, self.d_action, axis=1),
                POLICY_LOGVAR_MIN,
                POLICY_LOGVAR_MAX,
            )
            diff = ad.sub(mean, a)
            quad = ad.mul(ad.square(diff), ad.exp(ad.mul(lv, -1.0)))
            row = ad.mul(ad.add(ad.vsum(lv, axis=1), ad.vsum(quad, axis=1)), -0.5)
            return ad.add(row, -0.5 * self.d_action * LOG_2PI)
        idx = a.argmax(axis=1)
        picked = ad.select_columns(out, idx)
        return ad.sub(picked, ad.logsumexp(out, axis=1))


def expectile_loss(u, tau: float):
    """|tau - I(u < 0)| * u^2, elementwise."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"expectile tau must be in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    w = np.abs(tau - (u < 0).astype(np.float64))
    out = w * u * u
    return float(out) if out.ndim == 0 else out


def filtered_q_loss(model: PolicyModel, target_batch: dict, source_batch: dict) -> float:
    """Two-term Q loss; source samples weighted by selection * score.

    source_batch carries precomputed per-sample scores under "f" and the
    selection mask under "w"; unselected samples contribute zero.
    """
    gamma = model.cfg.gamma
    y_tar = bellman_targets(model, target_batch, gamma)
    y_src = bellman_targets(model, source_batch, gamma)
    q_tar = model.q_values(target_batch["s"], target_batch["a"])
    q_src = model.q_values(source_batch["s"], source_batch["a"])
    w = source_batch["w"].astype(np.float64) * source_batch["f"]
    return float(0.5 * np.mean((q_tar - y_tar) ** 2) + 0.5 * np.mean(w * (q_src - y_src) ** 2))


def bellman_targets(model: PolicyModel, batch: dict, gamma: float) -> np.ndarray:
    v_next = model.v_values(batch["s_next"])
    return batch["r"] + gamma * v_next * (1.0 - batch["done"].astype(np.float64))


def awr_policy_loss(model: PolicyModel, batch: dict) -> float:
    """Negative advantage-weighted log likelihood (value view, no gradients)."""
    adv = model.q_values(batch["s"], batch["a"]) - model.v_values(batch["s"])
    weights = np.clip(np.exp(model.cfg.awr_beta * adv), 0.0, model.cfg.w_max)

    def loss_fn(flat, layout):
        logp = model.log_prob_graph(flat, layout, batch["s"], batch["a"])
        return ad.mul(ad.vmean(ad.mul(logp, weights)), -1.0)

    tape = ad.Tape()
    flat = ad.leaf(model.pi_params.values, tape)
    return float(ad.value(loss_fn(flat, model.pi_params.layout)))


@dataclass
class EvalReport:
    mean_return: float
    std_return: float
    normalized_score: float
    n_episodes: int
    degenerate: bool = False


def _rollout_returns(domain, act_fn, n_episodes: int, seed: int, horizon: int) -> np.ndarray:
    """Discounted returns of greedy rollouts; per-episode seeded streams."""
    gamma = domain.mdp.gamma if isinstance(domain, TabularDomain) else domain.gamma
    returns = np.zeros(n_episodes)
    for e in range(n_episodes):
        rng = generator(seed, "eval-episode", e)
        s = domain.initial_state(rng)
        total, disc = 0.0, 1.0
        for _ in range(horizon):
            a = act_fn(s)
            s, r = step(domain, s, a, rng)
            total += disc * r
            disc *= gamma
        returns[e] = total
    return returns


def _eval_horizon(gamma: float, cap: int = 2000) -> int:
    if gamma == 0.0:
        return 1
    return min(cap, int(np.ceil(np.log(1e-8 * (1.0 - gamma)) / np.log(gamma))) + 1)


def normalization_anchors(domain, seed: int = 0, n_episodes: int = 100) -> tuple[float, float]:
    """(J_random, J_expert) anchors for the normalized score."""
    if isinstance(domain, TabularDomain):
        mdp = domain.mdp
        uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
        return policy_evaluation(mdp, uniform), value_iteration(mdp).j
    from .datagen import _pd_action

    horizon = _eval_horizon(domain.gamma)

    def random_action(s, rng=generator(seed, "anchor-random")):
        return rng.uniform(-1.0, 1.0, size=2)

    j_random = float(np.mean(_rollout_returns(domain, random_action, n_episodes, seed, horizon)))
    j_expert = float(
        np.mean(_rollout_returns(domain, lambda s: _pd_action(domain, s), n_episodes, seed, horizon))
    )
    return j_random, j_expert


def evaluate(model: PolicyModel, domain, n_episodes: int, seed: int,
             anchors: tuple[float, float] | None = None) -> EvalReport:
    """Greedy rollouts plus the normalized score against the domain anchors."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be at least 1")
    gamma = domain.mdp.gamma if isinstance(domain, TabularDomain) else domain.gamma
    horizon = _eval_horizon(gamma)
    if isinstance(domain, TabularDomain):
        n_states = domain.mdp.n_states
        eye = np.eye(n_states)

        def act(s):
            return int(model.greedy_action(eye[s][None, :])[0])

    else:

        def act(s):
            return model.greedy_action(s[None, :])[0]

    returns = _rollout_returns(domain, act, n_episodes, seed, horizon)
    j_random, j_expert = anchors if anchors is not None else normalization_anchors(domain, seed)
    denom = j_expert - j_random
    score = 100.0 * (float(returns.mean()) - j_random) / denom if denom != 0 else 0.0
    return EvalReport(
        mean_return=float(returns.mean()),
        std_return=float(returns.std()),
        normalized_score=float(score),
        n_episodes=n_episodes,
        degenerate=n_episodes == 1,
    )


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def to_csv(self, path):
        import csv

        cols = ["step", "v_loss", "q_loss", "pi_loss", "selected_expert_fraction",
                "eval_return", "normalized_score"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in cols})


def train_policy(target_flat: dict, source_flat: dict, cfg: PolicyConfig,
                 source_scores: np.ndarray | None = None,
                 continuous: bool = False) -> tuple[PolicyModel, TrainLog]:
    """Filtered TD learning plus AWR extraction.

    source_scores holds the per-sample composite score used for both ranking
    and loss weighting; None disables filtering (plain pooled training).
    """
    d_state = target_flat["s"].shape[1]
    d_action = target_flat["a"].shape[1]
    model = PolicyModel(d_state, d_action, cfg, continuous=continuous)
    if cfg.n_steps == 0:
        return model, TrainLog()
    rng = generator(cfg.seed, "policy-train")
    n_tar = target_flat["s"].shape[0]
    n_src = source_flat["s"].shape[0]
    tau, gamma, beta = cfg.expectile_tau, cfg.gamma, cfg.awr_beta

    opt_v = MomentState.for_params(model.v_params)
    opt_q = MomentState.for_params(model.q_params)
    opt_pi = MomentState.for_params(model.pi_params)
    log = TrainLog()
    from .datagen import QUALITY_CODE

    expert_code = QUALITY_CODE["expert"]
    src_quality = source_flat.get("quality")

    for step_i in range(cfg.n_steps):
        ti = rng.integers(n_tar, size=min(cfg.batch_tar, n_tar))
        si = rng.integers(n_src, size=min(cfg.batch_src, n_src))
        s_t, a_t = target_flat["s"][ti], target_flat["a"][ti]
        s_s, a_s = source_flat["s"][si], source_flat["a"][si]

        if source_scores is not None:
            f_batch = source_scores[si]
            w_batch = quantile_filter(f_batch, cfg.xi)
        else:
            f_batch = np.ones(len(si))
            w_batch = np.ones(len(si), dtype=bool)

        # --- V update on the pooled batch, no weights
        s_pool = np.concatenate([s_s, s_t])
        a_pool = np.concatenate([a_s, a_t])
        q_t_pool = model.q_values(s_pool, a_pool, target_net=True)
        v_in = s_pool

        def v_loss_fn(flat, layout):
            v = model.v_net.forward_rows(flat, layout, v_in)
            u = q_t_pool - ad.value(v)
            w_exp = np.abs(tau - (u < 0.0).astype(np.float64))
            return ad.weighted_mse(v, q_t_pool, weights=w_exp)

        g = gradient(v_loss_fn, model.v_params)
        sgd_step(model.v_params, g, cfg.lr, opt_v)

        # --- Q update with the filtered two-term loss
        y_tar = target_flat["r"][ti] + gamma * model.v_values(target_flat["s_next"][ti]) * (
            1.0 - target_flat["done"][ti].astype(np.float64)
        )
        y_src = source_flat["r"][si] + gamma * model.v_values(source_flat["s_next"][si]) * (
            1.0 - source_flat["done"][si].astype(np.float64)
        )
        w_src = w_batch.astype(np.float64) * f_batch
        q_in_tar = np.concatenate([s_t, a_t], axis=1)
        q_in_src = np.concatenate([s_s, a_s], axis=1)

        def q_loss_fn(flat, layout):
            q_tar = model.q_net.forward_rows(flat, layout, q_in_tar)
            q_src = model.q_net.forward_rows(flat, layout, q_in_src)
            return ad.add(
                ad.weighted_mse(q_tar, y_tar, scale=0.5),
                ad.weighted_mse(q_src, y_src, weights=w_src, scale=0.5),
            )

        g = gradient(q_loss_fn, model.q_params)
        sgd_step(model.q_params, g, cfg.lr, opt_q)

        # --- target-network tracking
        model.q_target_params.values *= cfg.polyak_mu
        model.q_target_params.values += (1.0 - cfg.polyak_mu) * model.q_params.values

        # --- policy extraction over the pooled batch
        if cfg.filtered_pi and source_scores is not None:
            keep = np.where(w_batch)[0]
            s_pi = np.concatenate([s_s[keep], s_t])
            a_pi = np.concatenate([a_s[keep], a_t])
        else:
            s_pi, a_pi = s_pool, a_pool
        adv = model.q_values(s_pi, a_pi) - model.v_values(s_pi)
        weights = np.clip(np.exp(beta * adv), 0.0, cfg.w_max)

        def pi_loss_fn(flat, layout):
            logp = model.log_prob_graph(flat, layout, s_pi, a_pi)
            return ad.mul(ad.vmean(ad.mul(logp, weights)), -1.0)

        g = gradient(pi_loss_fn, model.pi_params)
        sgd_step(model.pi_params, g, cfg.lr, opt_pi)

        if cfg.metrics_every and (step_i % cfg.metrics_every == 0 or step_i == cfg.n_steps - 1):
            sel_frac = (
                float(np.mean(src_quality[si][w_batch] == expert_code))
                if src_quality is not None and w_batch.any()
                else 0.0
            )
            log.rows.append(
                {
                    "step": step_i,
                    "v_loss": _scalar_v_loss(model, s_pool, q_t_pool, tau),
                    "q_loss": filtered_q_loss(
                        model,
                        {"s": s_t, "a": a_t, "r": target_flat["r"][ti],
                         "s_next": target_flat["s_next"][ti], "done": target_flat["done"][ti]},
                        {"s": s_s, "a": a_s, "r": source_flat["r"][si],
                         "s_next": source_flat["s_next"][si], "done": source_flat["done"][si],
                         "f": f_batch, "w": w_batch},
                    ),
                    "pi_loss": awr_policy_loss(model, {"s": s_pi, "a": a_pi}),
                    "selected_expert_fraction": sel_frac,
                }
            )
        if step_i % 5000 == 0 and not np.all(np.isfinite(model.q_params.values)):
            raise DivergenceError(f"policy training diverged at step {step_i}")
    return model, log


def _scalar_v_loss(model: PolicyModel, s_pool, q_t_pool, tau) -> float:
    v = model.v_values(s_pool)
    return float(np.mean(expectile_loss(q_t_pool - v, tau)))
