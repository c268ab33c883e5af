"""Temporally-consistent modality representation learning.

A recurrent trajectory encoder infers one Gaussian dynamics code z per
trajectory; an ensemble of Gaussian next-state decoders conditions on z.
Training alternates encoder steps (decoder frozen) and decoder steps
(encoder frozen). The trajectory-level objective shares a single z across
all transitions of a trajectory; the per-transition objective (used by the
`sample` variant) deliberately does not.

Two optimization modes:
  stochastic  - minibatched, reparameterized one-sample estimates, random
                ensemble member per trajectory reassigned each epoch.
  full_batch  - deterministic common-random-number objective (fixed epsilon
                draws, ensemble members averaged) with backtracking ascent
                steps, giving a non-decreasing per-iteration history.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .difffn import autodiff as ad
from .difffn.nets import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    MLPApproximator,
    ParamVector,
    RecurrentEncoder,
    build_params,
    gradient,
)
from .difffn.optim import MomentState, sgd_step
from .errors import ConfigError, DivergenceError
from .rng import generator

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ModalityLatent:
    """Gaussian posterior over a trajectory's dynamics code."""

    mean: np.ndarray
    log_variance: np.ndarray


def kl_to_standard_normal(latent) -> float:
    """KL(N(m, diag(exp(lv))) || N(0, I)); zero iff the posterior is the prior."""
    m = np.asarray(latent.mean, dtype=np.float64)
    lv = np.asarray(latent.log_variance, dtype=np.float64)
    return float(0.5 * np.sum(np.exp(lv) + m * m - 1.0 - lv))


def _kl_rows(means: np.ndarray, logvars: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(np.exp(logvars) + means**2 - 1.0 - logvars, axis=1)


def step_features(traj) -> np.ndarray:
    """Per-step encoder input: concat(s_t, a_t, s_{t+1}) for each transition."""
    return np.concatenate([traj.states[:-1], traj.actions, traj.states[1:]], axis=1)


@dataclass
class EMConfig:
    d_z: int = 4
    hidden: int = 64
    ensemble_size: int = 3
    outer_iters: int = 30
    e_steps: int = 30
    m_steps: int = 30
    lr: float = 3e-4
    batch_traj: int = 16
    n_latent_samples: int = 1
    n_latent_samples_eval: int = 8
    kl_weight: float = 1.0
    mode: str = "stochastic"  # or "full_batch"
    tol_em: float = 1e-5
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("stochastic", "full_batch"):
            raise ConfigError(f"unknown EM mode {self.mode!r}")
        if self.ensemble_size < 1 or self.d_z < 1:
            raise ConfigError("ensemble_size and d_z must be positive")


class TrajectoryEncoder:
    """Recurrent posterior q(z | trajectory)."""

    def __init__(self, d_state: int, d_action: int, cfg: EMConfig, params: ParamVector | None = None,
                 init_rng=None):
        self.d_state = d_state
        self.d_action = d_action
        self.d_z = cfg.d_z
        self.net = RecurrentEncoder(2 * d_state + d_action, cfg.hidden, cfg.d_z, "encoder")
        self.params = params if params is not None else build_params([self.net], init_rng)

    def posterior(self, traj) -> ModalityLatent:
        head = self.net.forward(self.params, step_features(traj))
        return ModalityLatent(mean=head.mean, log_variance=head.log_variance)

    def posterior_batch(self, padded, lengths):
        return self.net.forward_batch(self.params, padded, lengths)


class TransitionEncoder:
    """Feed-forward posterior q(z | s, a, s') for the per-transition variant."""

    def __init__(self, d_state: int, d_action: int, cfg: EMConfig, params: ParamVector | None = None,
                 init_rng=None):
        self.d_state = d_state
        self.d_action = d_action
        self.d_z = cfg.d_z
        self.net = MLPApproximator(
            (2 * d_state + d_action, cfg.hidden, 2 * cfg.d_z), "encoder_sa"
        )
        self.params = params if params is not None else build_params([self.net], init_rng)

    def posterior_rows(self, rows: np.ndarray):
        out = self.net.forward(self.params, rows)
        means = out[:, : self.d_z]
        logvars = np.clip(out[:, self.d_z :], LOGVAR_MIN, LOGVAR_MAX)
        return means, logvars

    def posterior_steps(self, traj):
        return self.posterior_rows(step_features(traj))


class DynamicsDecoderEnsemble:
    """N Gaussian next-state decoders conditioned on (s, a, z)."""

    def __init__(self, d_state: int, d_action: int, cfg: EMConfig, params: ParamVector | None = None,
                 init_rng=None):
        self.d_state = d_state
        self.d_action = d_action
        self.d_z = cfg.d_z
        self.n_members = cfg.ensemble_size
        in_dim = d_state + d_action + cfg.d_z
        self.members = [
            MLPApproximator((in_dim, cfg.hidden, cfg.hidden, 2 * d_state), f"member{k}")
            for k in range(self.n_members)
        ]
        self.params = params if params is not None else build_params(self.members, init_rng)

    def member_heads(self, k: int, sa_rows: np.ndarray, z_rows: np.ndarray):
        x = np.concatenate([sa_rows, z_rows], axis=1)
        out = self.members[k].forward(self.params, x)
        return out[:, : self.d_state], np.clip(out[:, self.d_state :], LOGVAR_MIN, LOGVAR_MAX)

    def member_log_density_rows(self, k: int, sa_rows, z_rows, targets) -> np.ndarray:
        mean, lv = self.member_heads(k, sa_rows, z_rows)
        return np.sum(
            -0.5 * LOG_2PI - 0.5 * lv - (targets - mean) ** 2 / (2.0 * np.exp(lv)), axis=1
        )

    def log_density_rows(self, sa_rows, z_rows, targets) -> np.ndarray:
        """Ensemble score: mean member log density per row."""
        acc = np.zeros(sa_rows.shape[0])
        for k in range(self.n_members):
            acc += self.member_log_density_rows(k, sa_rows, z_rows, targets)
        return acc / self.n_members

    def log_likelihood(self, traj, z) -> float:
        sa = np.concatenate([traj.states[:-1], traj.actions], axis=1)
        z_rows = np.tile(np.asarray(z, dtype=np.float64), (len(traj), 1))
        return float(np.sum(self.log_density_rows(sa, z_rows, traj.states[1:])))


class OracleTabularDecoder:
    """Exact tabular dynamics log-likelihood; ignores z by construction."""

    def __init__(self, mdp):
        self.mdp = mdp

    def log_likelihood(self, traj, z) -> float:
        if traj.state_ids is None:
            raise ConfigError("oracle decoder needs tabular trajectories")
        p = self.mdp.transition[traj.state_ids[:-1], traj.action_ids, traj.state_ids[1:]]
        return float(np.sum(np.log(p)))


@dataclass
class EMState:
    encoder: TrajectoryEncoder
    decoder: DynamicsDecoderEnsemble
    cfg: EMConfig
    k: int = 0
    history: list = field(default_factory=list)
    e_opt: MomentState | None = None
    m_opt: MomentState | None = None


def tc_elbo(encoder, decoder, trajectories, n_latent_samples: int = 8, seed: int = 0) -> float:
    """Trajectory-level evidence lower bound, averaged over trajectories.

    One z draw is shared across all of a trajectory's transitions; the
    expectation over z uses reparameterized sampling with a seeded stream.
    """
    if not trajectories:
        raise ConfigError("tc_elbo needs at least one trajectory")
    rng = generator(seed, "tc-elbo")
    vals = []
    skipped = 0
    for traj in trajectories:
        if len(traj) == 0:
            skipped += 1
            continue
        post = encoder.posterior(traj)
        std = np.exp(0.5 * post.log_variance)
        recon = 0.0
        for _ in range(n_latent_samples):
            z = post.mean + std * rng.normal(size=post.mean.shape)
            recon += decoder.log_likelihood(traj, z)
        recon /= n_latent_samples
        vals.append(recon - kl_to_standard_normal(post))
    if skipped:
        warnings.warn(f"tc_elbo skipped {skipped} empty trajectories")
    return float(np.mean(vals))


def sample_elbo(encoder_sa, decoder, transitions, n_latent_samples: int = 8, seed: int = 0) -> float:
    """Per-transition evidence lower bound; each transition gets its own z."""
    rows, sa, targets = _transition_arrays(transitions)
    means, logvars = encoder_sa.posterior_rows(rows)
    rng = generator(seed, "sample-elbo")
    std = np.exp(0.5 * logvars)
    recon = np.zeros(rows.shape[0])
    for _ in range(n_latent_samples):
        z = means + std * rng.normal(size=means.shape)
        recon += decoder.log_density_rows(sa, z, targets)
    recon /= n_latent_samples
    return float(np.mean(recon - _kl_rows(means, logvars)))


def _transition_arrays(transitions):
    if isinstance(transitions, dict):  # flattened dataset
        s, a, s_next = transitions["s"], transitions["a"], transitions["s_next"]
    else:
        s = np.stack([t.s for t in transitions])
        a = np.stack([t.a for t in transitions])
        s_next = np.stack([t.s_next for t in transitions])
    rows = np.concatenate([s, a, s_next], axis=1)
    sa = np.concatenate([s, a], axis=1)
    return rows, sa, s_next


# ---------------------------------------------------------------------------
# Graph-building helpers


def _gaussian_logp_rows_graph(mean_var, logvar_var, targets):
    """Row-wise Gaussian log density as a tape graph (mean/logvar differentiable)."""
    d = targets.shape[1]
    diff = ad.sub(mean_var, targets)
    quad = ad.mul(ad.square(diff), ad.exp(ad.mul(logvar_var, -1.0)))
    row = ad.mul(ad.add(ad.vsum(logvar_var, axis=1), ad.vsum(quad, axis=1)), -0.5)
    return ad.add(row, -0.5 * d * LOG_2PI)


def _decoder_member_graph(decoder, k: int, sa_rows, z_var, targets):
    """Member log-density rows with constant weights and a differentiable z."""
    x = ad.concat([sa_rows, z_var], axis=1)
    out = _mlp_const_graph(decoder.members[k], decoder.params, x)
    mean = ad.narrow(out, 0, decoder.d_state, axis=1)
    lv = ad.clip(ad.narrow(out, decoder.d_state, decoder.d_state, axis=1), LOGVAR_MIN, LOGVAR_MAX)
    return _gaussian_logp_rows_graph(mean, lv, targets)


def _mlp_const_graph(net: MLPApproximator, params: ParamVector, x_var):
    """MLP forward with constant weights but a differentiable input."""
    theta = params.segment(net.name)
    h = x_var
    layers = list(net._layers(theta))
    for i, (w, b) in enumerate(layers):
        if i < len(layers) - 1:
            h = ad.affine_relu(h, w, b)
        else:
            h = ad.affine(h, w, b)
    return h


class _Corpus:
    """Precomputed per-trajectory arrays for EM training."""

    def __init__(self, trajectories):
        trajectories = [t for t in trajectories if len(t) > 0]
        if not trajectories:
            raise ConfigError("EM needs non-empty trajectories")
        self.trajs = trajectories
        self.n = len(trajectories)
        self.lengths = np.array([len(t) for t in trajectories])
        feats = [step_features(t) for t in trajectories]
        T_max = int(self.lengths.max())
        in_dim = feats[0].shape[1]
        self.padded = np.zeros((self.n, T_max, in_dim))
        for i, f in enumerate(feats):
            self.padded[i, : f.shape[0], :] = f
        self.sa = np.concatenate(
            [np.concatenate([t.states[:-1], t.actions], axis=1) for t in trajectories]
        )
        self.targets = np.concatenate([t.states[1:] for t in trajectories])
        self.row_traj = np.concatenate(
            [np.full(len(t), i) for i, t in enumerate(trajectories)]
        )


def _elbo_graph(encoder, decoder, corpus, idx, eps, members, kl_weight, theta_flat=None,
                psi_flat=None):
    """Differentiable minibatch TC objective.

    idx: trajectory indices; eps: (len(idx), n_samples, d_z) fixed noise;
    members: per-trajectory member index, or None for the ensemble mean.
    Exactly one of psi_flat / theta_flat is a leaf Var; the other side uses
    constant parameters.
    """
    padded = corpus.padded[idx]
    lengths = corpus.lengths[idx]
    rows_mask = np.isin(corpus.row_traj, idx)
    order = {t: j for j, t in enumerate(idx)}
    row_traj = np.array([order[t] for t in corpus.row_traj[rows_mask]])
    sa = corpus.sa[rows_mask]
    targets = corpus.targets[rows_mask]

    if psi_flat is not None:
        mean, logvar = encoder.net.forward_graph(psi_flat, encoder.params.layout, padded, lengths)
    else:
        m_np, lv_np = encoder.posterior_batch(padded, lengths)

    n_samples = eps.shape[1]
    recon_total = None
    for s_i in range(n_samples):
        if psi_flat is not None:
            std = ad.exp(ad.mul(logvar, 0.5))
            z_batch = ad.add(mean, ad.mul(std, eps[:, s_i, :]))
            z_rows = ad.gather_rows(z_batch, row_traj)
        else:
            z_np = m_np + np.exp(0.5 * lv_np) * eps[:, s_i, :]
            z_rows = z_np[row_traj]

        if members is None:
            member_sets = [(k, np.arange(sa.shape[0])) for k in range(decoder.n_members)]
            weight = 1.0 / decoder.n_members
        else:
            row_members = members[row_traj]
            member_sets = [(k, np.where(row_members == k)[0]) for k in range(decoder.n_members)]
            weight = 1.0

        for k, rows_k in member_sets:
            if rows_k.size == 0:
                continue
            if psi_flat is not None:
                z_k = ad.gather_rows(z_rows, rows_k) if rows_k.size != sa.shape[0] else z_rows
                logp = _decoder_member_graph(decoder, k, sa[rows_k], z_k, targets[rows_k])
            else:
                x = np.concatenate([sa[rows_k], z_rows[rows_k]], axis=1)
                out = decoder.members[k].forward_graph(theta_flat, decoder.params.layout, x)
                mean_k = ad.narrow(out, 0, decoder.d_state, axis=1)
                lv_k = ad.clip(
                    ad.narrow(out, decoder.d_state, decoder.d_state, axis=1),
                    LOGVAR_MIN,
                    LOGVAR_MAX,
                )
                logp = _gaussian_logp_rows_graph(mean_k, lv_k, targets[rows_k])
            contrib = ad.mul(ad.vsum(logp), weight)
            recon_total = contrib if recon_total is None else ad.add(recon_total, contrib)

    # mean over trajectories of (recon/n_samples - kl_weight * KL)
    obj = ad.mul(recon_total, 1.0 / (n_samples * len(idx)))
    if psi_flat is not None and kl_weight != 0.0:
        kl = ad.mul(
            ad.vsum(
                ad.mul(
                    ad.add(
                        ad.add(ad.exp(logvar), ad.square(mean)),
                        ad.mul(ad.add(logvar, 1.0), -1.0),
                    ),
                    0.5,
                )
            ),
            1.0 / len(idx),
        )
        obj = ad.sub(obj, ad.mul(kl, kl_weight))
    elif psi_flat is None and kl_weight != 0.0:
        obj = ad.sub(obj, float(np.mean(_kl_rows(m_np, lv_np)) * kl_weight))
    return obj


def _full_batch_objective(encoder, decoder, corpus, eps, kl_weight) -> float:
    """Deterministic common-random-number TC objective over the whole corpus."""
    m_np, lv_np = encoder.posterior_batch(corpus.padded, corpus.lengths)
    n_samples = eps.shape[1]
    recon = 0.0
    for s_i in range(n_samples):
        z = m_np + np.exp(0.5 * lv_np) * eps[:, s_i, :]
        z_rows = z[corpus.row_traj]
        recon += np.sum(decoder.log_density_rows(corpus.sa, z_rows, corpus.targets))
    recon /= n_samples * corpus.n
    kl = float(np.mean(_kl_rows(m_np, lv_np)))
    return float(recon - kl_weight * kl)


def _ascent_step(params: ParamVector, grad_values: np.ndarray, lr: float, evaluate) -> float:
    """Backtracking gradient-ascent step; never decreases the objective."""
    base = evaluate()
    step = lr
    for _ in range(14):
        params.values += step * grad_values
        new = evaluate()
        if new >= base:
            return new
        params.values -= step * grad_values
        step *= 0.5
    return base


def e_step(state: EMState, trajectories, n_grad_steps: int, epoch_seed: int = 0):
    """Update the encoder with the decoder frozen."""
    if n_grad_steps <= 0:
        return state.encoder.params
    cfg = state.cfg
    corpus = trajectories if isinstance(trajectories, _Corpus) else _Corpus(trajectories)
    enc, dec = state.encoder, state.decoder
    rng = generator(cfg.seed, "e-step", state.k, epoch_seed)

    if cfg.mode == "full_batch":
        eps = _fixed_eps(corpus, cfg)
        evaluate = lambda: _full_batch_objective(enc, dec, corpus, eps, cfg.kl_weight)
        idx = np.arange(corpus.n)
        for _ in range(n_grad_steps):

            def loss_fn(flat, layout):
                return ad.mul(
                    _elbo_graph(enc, dec, corpus, idx, eps, None, cfg.kl_weight, psi_flat=flat),
                    -1.0,
                )

            g = gradient(loss_fn, enc.params)
            _ascent_step(enc.params, -g.values, cfg.lr, evaluate)
        return enc.params

    if state.e_opt is None:
        state.e_opt = MomentState.for_params(enc.params)
    opt = state.e_opt
    steps_per_epoch = max(1, int(np.ceil(corpus.n / cfg.batch_traj)))
    members = rng.integers(dec.n_members, size=corpus.n)
    for step_i in range(n_grad_steps):
        if step_i % steps_per_epoch == 0 and step_i > 0:
            members = rng.integers(dec.n_members, size=corpus.n)
        idx = rng.choice(corpus.n, size=min(cfg.batch_traj, corpus.n), replace=False)
        eps = rng.normal(size=(len(idx), cfg.n_latent_samples, cfg.d_z))

        def loss_fn(flat, layout):
            return ad.mul(
                _elbo_graph(enc, dec, corpus, idx, eps, members, cfg.kl_weight, psi_flat=flat),
                -1.0,
            )

        g = gradient(loss_fn, enc.params)
        sgd_step(enc.params, g, cfg.lr, opt)
    return enc.params


def relabel_latents(dataset, encoder):
    """Posterior summaries for every trajectory; evaluation-side helper."""
    return [encoder.posterior(t) for t in dataset.trajectories]


def m_step(state: EMState, trajectories, n_grad_steps: int, epoch_seed: int = 0):
    """Update the decoder with the encoder frozen; the prior term drops out."""
    if n_grad_steps <= 0:
        return state.decoder.params
    cfg = state.cfg
    corpus = trajectories if isinstance(trajectories, _Corpus) else _Corpus(trajectories)
    enc, dec = state.encoder, state.decoder
    rng = generator(cfg.seed, "m-step", state.k, epoch_seed)

    if cfg.mode == "full_batch":
        eps = _fixed_eps(corpus, cfg)
        evaluate = lambda: _full_batch_objective(enc, dec, corpus, eps, cfg.kl_weight)
        idx = np.arange(corpus.n)
        for _ in range(n_grad_steps):

            def loss_fn(flat, layout):
                return ad.mul(
                    _elbo_graph(enc, dec, corpus, idx, eps, None, 0.0, theta_flat=flat),
                    -1.0,
                )

            g = gradient(loss_fn, dec.params)
            _ascent_step(dec.params, -g.values, cfg.lr, evaluate)
        return dec.params

    if state.m_opt is None:
        state.m_opt = MomentState.for_params(dec.params)
    opt = state.m_opt
    batch = min(cfg.batch_traj, corpus.n)
    for _ in range(n_grad_steps):
        # every member trains on all data, each with its own bootstrapped batch
        draws = []
        for k in range(dec.n_members):
            idx_k = rng.choice(corpus.n, size=batch, replace=False)
            eps_k = rng.normal(size=(batch, cfg.d_z))
            m_np, lv_np = enc.posterior_batch(corpus.padded[idx_k], corpus.lengths[idx_k])
            z_k = m_np + np.exp(0.5 * lv_np) * eps_k
            rows_mask = np.isin(corpus.row_traj, idx_k)
            order = {t: j for j, t in enumerate(idx_k)}
            row_map = np.array([order[t] for t in corpus.row_traj[rows_mask]])
            draws.append((z_k[row_map], corpus.sa[rows_mask], corpus.targets[rows_mask]))

        def loss_fn(flat, layout):
            total = None
            for k, (z_rows, sa, targets) in enumerate(draws):
                x = np.concatenate([sa, z_rows], axis=1)
                out = dec.members[k].forward_graph(flat, layout, x)
                mean_k = ad.narrow(out, 0, dec.d_state, axis=1)
                lv_k = ad.clip(
                    ad.narrow(out, dec.d_state, dec.d_state, axis=1), LOGVAR_MIN, LOGVAR_MAX
                )
                logp = ad.mul(ad.vsum(_gaussian_logp_rows_graph(mean_k, lv_k, targets)), 1.0 / batch)
                total = logp if total is None else ad.add(total, logp)
            return ad.mul(total, -1.0 / dec.n_members)

        g = gradient(loss_fn, dec.params)
        sgd_step(dec.params, g, cfg.lr, opt)
    return dec.params


def _fixed_eps(corpus: _Corpus, cfg: EMConfig) -> np.ndarray:
    """Common-random-number draws shared by every full-batch evaluation.

    In full_batch mode the same draws drive optimization and the history, so
    ascent steps provably never decrease the recorded objective. Stochastic
    mode uses the (larger) evaluation sample count for a steadier history.
    """
    rng = generator(cfg.seed, "fixed-eps")
    n_samples = cfg.n_latent_samples if cfg.mode == "full_batch" else cfg.n_latent_samples_eval
    return rng.normal(size=(corpus.n, max(1, n_samples), cfg.d_z))


def run_em(trajectories, cfg: EMConfig, d_state: int | None = None, d_action: int | None = None):
    """Alternate E and M steps until the objective plateaus.

    Returns (encoder, decoder, history); history has one record per outer
    iteration with the full-batch objective and its components.
    """
    corpus = _Corpus(trajectories)
    if d_state is None:
        d_state = corpus.trajs[0].states.shape[1]
    if d_action is None:
        d_action = corpus.trajs[0].actions.shape[1]
    init_rng = generator(cfg.seed, "em-init")
    encoder = TrajectoryEncoder(d_state, d_action, cfg, init_rng=init_rng)
    decoder = DynamicsDecoderEnsemble(d_state, d_action, cfg, init_rng=init_rng)
    state = EMState(encoder=encoder, decoder=decoder, cfg=cfg)

    eps = _fixed_eps(corpus, cfg)
    best = -np.inf
    best_snapshot = None
    plateau = 0
    prev = None
    for k in range(cfg.outer_iters):
        state.k = k
        e_step(state, corpus, cfg.e_steps, epoch_seed=k)
        m_step(state, corpus, cfg.m_steps, epoch_seed=k)
        value = _full_batch_objective(encoder, decoder, corpus, eps, cfg.kl_weight)
        m_np, lv_np = encoder.posterior_batch(corpus.padded, corpus.lengths)
        state.history.append(
            {
                "iteration": k,
                "tc_elbo": value,
                "mean_kl": float(np.mean(_kl_rows(m_np, lv_np))),
                "mean_recon": value + cfg.kl_weight * float(np.mean(_kl_rows(m_np, lv_np))),
            }
        )
        if value > best:
            best = value
            best_snapshot = (encoder.params.copy(), decoder.params.copy())
        if value < best - 0.1 * abs(best):
            raise DivergenceError(
                "EM objective dropped more than 10% from its best",
                best_params=best_snapshot,
                history=state.history,
            )
        if prev is not None:
            rel = (value - prev) / max(1.0, abs(prev))
            plateau = plateau + 1 if rel < cfg.tol_em else 0
            if plateau >= cfg.patience:
                break
        prev = value
    return encoder, decoder, state.history


def train_sample_encoder(trajectories, cfg: EMConfig, d_state=None, d_action=None):
    """Per-transition variant: jointly optimize the feed-forward posterior and
    a single Gaussian decoder on the sample-level objective."""
    corpus = _Corpus(trajectories)
    if d_state is None:
        d_state = corpus.trajs[0].states.shape[1]
    if d_action is None:
        d_action = corpus.trajs[0].actions.shape[1]
    init_rng = generator(cfg.seed, "sample-init")
    encoder = TransitionEncoder(d_state, d_action, cfg, init_rng=init_rng)
    decoder = DynamicsDecoderEnsemble(d_state, d_action, cfg, init_rng=init_rng)
    rows_all = np.concatenate([corpus.sa, corpus.targets], axis=1)
    n_rows = rows_all.shape[0]
    rng = generator(cfg.seed, "sample-train")
    opt_e = MomentState.for_params(encoder.params)
    opt_d = MomentState.for_params(decoder.params)
    total_steps = cfg.outer_iters * (cfg.e_steps + cfg.m_steps) // 2
    batch = cfg.batch_traj * 8
    history = []
    for step_i in range(total_steps):
        idx = rng.integers(n_rows, size=min(batch, n_rows))
        rows = rows_all[idx]
        sa = corpus.sa[idx]
        targets = corpus.targets[idx]
        eps = rng.normal(size=(len(idx), cfg.d_z))
        member = int(rng.integers(decoder.n_members))

        def enc_loss(flat, layout):
            out = encoder.net.forward_graph(flat, layout, rows)
            mean = ad.narrow(out, 0, cfg.d_z, axis=1)
            lv = ad.clip(ad.narrow(out, cfg.d_z, cfg.d_z, axis=1), LOGVAR_MIN, LOGVAR_MAX)
            z = ad.add(mean, ad.mul(ad.exp(ad.mul(lv, 0.5)), eps))
            logp = _decoder_member_graph(decoder, member, sa, z, targets)
            kl = ad.mul(
                ad.add(ad.add(ad.exp(lv), ad.square(mean)), ad.mul(ad.add(lv, 1.0), -1.0)), 0.5
            )
            return ad.mul(ad.sub(ad.vmean(logp), ad.vmean(ad.vsum(kl, axis=1))), -1.0)

        g = gradient(enc_loss, encoder.params)
        sgd_step(encoder.params, g, cfg.lr, opt_e)

        means, lvs = encoder.posterior_rows(rows)
        z_np = means + np.exp(0.5 * lvs) * eps

        def dec_loss(flat, layout):
            x = np.concatenate([sa, z_np], axis=1)
            total = None
            for k in range(decoder.n_members):
                out = decoder.members[k].forward_graph(flat, layout, x)
                mean_k = ad.narrow(out, 0, d_state, axis=1)
                lv_k = ad.clip(ad.narrow(out, d_state, d_state, axis=1), LOGVAR_MIN, LOGVAR_MAX)
                logp = ad.vmean(_gaussian_logp_rows_graph(mean_k, lv_k, targets))
                total = logp if total is None else ad.add(total, logp)
            return ad.mul(total, -1.0 / decoder.n_members)

        g = gradient(dec_loss, decoder.params)
        sgd_step(decoder.params, g, cfg.lr, opt_d)
        if step_i % 50 == 0:
            history.append({"iteration": step_i})
    return encoder, decoder, history


def export_history_csv(history, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "tc_elbo", "mean_kl", "mean_recon"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in writer.fieldnames})


def cluster_purity(latents: np.ndarray, labels: np.ndarray, k: int, seed: int = 0,
                   n_iter: int = 50, n_restarts: int = 5) -> float:
    """Purity of seeded k-means clusters against ground-truth labels."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    best_inertia = np.inf
    best_assign = None
    rng = generator(seed, "kmeans")
    for _ in range(n_restarts):
        centers = latents[rng.choice(len(latents), size=k, replace=False)]
        assign = np.zeros(len(latents), dtype=int)
        for _ in range(n_iter):
            dists = np.linalg.norm(latents[:, None, :] - centers[None, :, :], axis=2)
            assign = dists.argmin(axis=1)
            for c in range(k):
                pts = latents[assign == c]
                if len(pts):
                    centers[c] = pts.mean(axis=0)
        inertia = float(np.sum((latents - centers[assign]) ** 2))
        if inertia < best_inertia:
            best_inertia, best_assign = inertia, assign.copy()
    correct = 0
    for c in range(k):
        members = labels[best_assign == c]
        if len(members):
            _, counts = np.unique(members, return_counts=True)
            correct += counts.max()
    return correct / len(labels)
