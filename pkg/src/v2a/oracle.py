"""Exact tabular machinery: value iteration, TV distances, theory checks.

Everything here is pure and exact (up to the stated iteration tolerances):
value iteration, linear-solve policy evaluation, total-variation distances,
the mixture-TV inequality, return-gap bounds for MDP pairs, the suboptimality
bound decomposition, and the value-misassignment detector built on in-sample
(action-masked) value iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envsuite import TabularMDP
from .errors import ConfigError, V2AError


class MaskedMDPError(V2AError):
    """Dataset support too thin to build an in-sample MDP."""


@dataclass
class ExactSolution:
    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: np.ndarray  # greedy deterministic policy, lowest index on ties
    j: float


def value_iteration(mdp: TabularMDP, tol: float = 1e-12) -> ExactSolution:
    """Fixed-point iteration to sup-norm residual below tol."""
    if mdp.gamma >= 1.0:
        raise ConfigError("value iteration requires gamma < 1")
    P, R, gamma = mdp.transition, mdp.reward, mdp.gamma
    v = np.zeros(mdp.n_states)
    max_iter = 100 + int(np.ceil(np.log(max(tol, 1e-300)) / np.log(max(gamma, 1e-12))))
    for _ in range(max_iter):
        q = R + gamma * P @ v
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    q = R + gamma * P @ v
    v = q.max(axis=1)
    pi = q.argmax(axis=1)
    j = float(mdp.initial_dist @ v)
    return ExactSolution(v_star=v, q_star=q, pi_star=pi, j=j)


def _policy_matrix(mdp: TabularMDP, policy) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.ndim == 1:  # deterministic, integer actions
        mat = np.zeros((mdp.n_states, mdp.n_actions))
        mat[np.arange(mdp.n_states), policy.astype(int)] = 1.0
        return mat
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigError(f"policy shape {policy.shape} does not match the MDP")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-9:
        raise ConfigError("policy rows must be probability distributions")
    return policy.astype(np.float64)


def policy_state_values(mdp: TabularMDP, policy) -> np.ndarray:
    """Exact V^pi via the linear Bellman system."""
    mat = _policy_matrix(mdp, policy)
    P_pi = np.einsum("sa,sat->st", mat, mdp.transition)
    r_pi = np.sum(mat * mdp.reward, axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def policy_evaluation(mdp: TabularMDP, policy) -> float:
    """Expected discounted return J = rho . V^pi."""
    return float(mdp.initial_dist @ policy_state_values(mdp, policy))


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return float(0.5 * np.sum(np.abs(p - q)))


def sup_tv(P1, P2) -> float:
    P1 = np.asarray(P1, dtype=np.float64)
    P2 = np.asarray(P2, dtype=np.float64)
    if P1.shape != P2.shape:
        raise ConfigError(f"transition shapes differ: {P1.shape} vs {P2.shape}")
    return float(np.max(0.5 * np.sum(np.abs(P1 - P2), axis=-1)))


@dataclass
class MixtureTVReport:
    lhs_per_sa: np.ndarray
    rhs_per_sa: np.ndarray
    lhs_sup: float
    rhs_sup: float
    holds: bool


def check_mixture_tv(components, weights, P_tar) -> MixtureTVReport:
    """TV of a mixture against a reference never exceeds the mixed member TVs."""
    weights = np.asarray(weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigError("mixture weights must sum to 1")
    P_tar = np.asarray(P_tar, dtype=np.float64)
    mix = np.tensordot(weights, np.stack(components), axes=1)
    lhs = 0.5 * np.sum(np.abs(mix - P_tar), axis=-1)
    rhs = np.zeros_like(lhs)
    for w, P in zip(weights, components):
        rhs += w * 0.5 * np.sum(np.abs(np.asarray(P) - P_tar), axis=-1)
    holds = bool(np.all(lhs <= rhs + 1e-12))
    return MixtureTVReport(
        lhs_per_sa=lhs,
        rhs_per_sa=rhs,
        lhs_sup=float(lhs.max()),
        rhs_sup=float(rhs.max()),
        holds=holds,
    )


def _require_shared_structure(m1: TabularMDP, m2: TabularMDP):
    if (
        m1.transition.shape != m2.transition.shape
        or not np.array_equal(m1.reward, m2.reward)
        or not np.array_equal(m1.initial_dist, m2.initial_dist)
        or m1.gamma != m2.gamma
    ):
        raise ConfigError("MDP pair must share everything except transition dynamics")


def check_lemma_c1(m1: TabularMDP, m2: TabularMDP, policy):
    """Return gap of one policy across a dynamics change, against the TV bound."""
    _require_shared_structure(m1, m2)
    lhs = abs(policy_evaluation(m1, policy) - policy_evaluation(m2, policy))
    C = 2.0 * m1.gamma * m1.r_max / (1.0 - m1.gamma) ** 2
    rhs = C * sup_tv(m1.transition, m2.transition)
    return lhs, rhs, bool(lhs <= rhs + 1e-9)


def check_lemma_c2(m1: TabularMDP, m2: TabularMDP):
    """Gap between the two optimal returns, against the TV bound."""
    _require_shared_structure(m1, m2)
    lhs = abs(value_iteration(m1).j - value_iteration(m2).j)
    C2 = 2.0 * m1.r_max / (1.0 - m1.gamma) ** 2
    rhs = C2 * sup_tv(m1.transition, m2.transition)
    return lhs, rhs, bool(lhs <= rhs + 1e-9)


# ---------------------------------------------------------------------------
# In-sample (action-masked) machinery


def sa_counts_from_pairs(pairs, n_states: int, n_actions: int) -> np.ndarray:
    counts = np.zeros((n_states, n_actions), dtype=np.int64)
    for s, a in pairs:
        counts[int(s), int(a)] += 1
    return counts


@dataclass
class MaskedSolution:
    """Optimal values over the dataset-supported (s, a) pairs.

    Unseen states are absorbing with reward 0; at seen states the maximum runs
    over seen actions only. q_star is populated only where seen (NaN elsewhere)
    and pi_star never selects an unseen action at a seen state.
    """

    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: np.ndarray
    seen_sa: np.ndarray
    seen_state: np.ndarray


def masked_value_iteration(mdp: TabularMDP, sa_counts, tol: float = 1e-12) -> MaskedSolution:
    seen_sa = np.asarray(sa_counts) > 0
    seen_state = seen_sa.any(axis=1)
    if not seen_state.any():
        raise MaskedMDPError("dataset covers no states")
    P, R, gamma = mdp.transition, mdp.reward, mdp.gamma
    neg = np.where(seen_sa, 0.0, -np.inf)
    v = np.zeros(mdp.n_states)
    max_iter = 100 + int(np.ceil(np.log(max(tol, 1e-300)) / np.log(max(gamma, 1e-12))))
    for _ in range(max_iter):
        q = R + gamma * P @ v + neg
        v_new = np.where(seen_state, q.max(axis=1), 0.0)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    q = R + gamma * P @ v + neg
    v = np.where(seen_state, q.max(axis=1), 0.0)
    pi = np.where(seen_state, q.argmax(axis=1), 0)
    q_out = np.where(seen_sa, R + gamma * P @ v, np.nan)
    return MaskedSolution(v_star=v, q_star=q_out, pi_star=pi, seen_sa=seen_sa, seen_state=seen_state)


def empirical_policy(sa_counts) -> np.ndarray:
    """State-conditional action frequencies; uniform at unseen states."""
    counts = np.asarray(sa_counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / counts.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), uniform)
    return freq


def in_sample_advantage(mdp: TabularMDP, sa_counts) -> np.ndarray:
    """A(s, a) = Q*(s, a) - V*(s) of the masked MDP; NaN at unseen pairs."""
    sol = masked_value_iteration(mdp, sa_counts)
    return sol.q_star - sol.v_star[:, None]


# ---------------------------------------------------------------------------
# Suboptimality bound and misassignment


@dataclass
class SourceTerm:
    alpha: float
    value_misalignment: float
    dynamics_misalignment: float
    eps_insample: float
    eps_behavior: float


@dataclass
class BoundReport:
    subopt: float
    per_source: list
    delta: float
    C: float
    rhs: float
    holds: bool

    def recompose_rhs(self) -> float:
        return (
            sum(t.alpha * (t.value_misalignment + self.C * t.dynamics_misalignment) for t in self.per_source)
            + self.delta
        )

    def to_dict(self) -> dict:
        return {
            "subopt": self.subopt,
            "delta": self.delta,
            "C": self.C,
            "rhs": self.rhs,
            "holds": self.holds,
            "per_source": [
                {
                    "alpha": t.alpha,
                    "value_misalignment": t.value_misalignment,
                    "dynamics_misalignment": t.dynamics_misalignment,
                    "eps_insample": t.eps_insample,
                    "eps_behavior": t.eps_behavior,
                }
                for t in self.per_source
            ],
        }


def evaluate_prop_bound(target_mdp: TabularMDP, sources, policy_hat, alphas=None) -> BoundReport:
    """Exact decomposition of the suboptimality bound for a trained policy.

    `sources` is a list of (mdp_i, sa_counts_i). The reported gap is the
    magnitude J_tar(pi*_tar) - J_tar(pi_hat) >= 0. The holds flag is reported,
    never asserted: the bound's derivation needs local-convexity assumptions
    that arbitrary instances may violate.
    """
    counts = [np.asarray(c) for _, c in sources]
    n_samples = np.array([c.sum() for c in counts], dtype=np.float64)
    if alphas is None:
        alphas = n_samples / n_samples.sum()
    alphas = np.asarray(alphas, dtype=np.float64)

    tar_solution = value_iteration(target_mdp)
    j_hat = policy_evaluation(target_mdp, policy_hat)
    subopt = tar_solution.j - j_hat

    C = 2.0 * target_mdp.gamma * target_mdp.r_max / (1.0 - target_mdp.gamma) ** 2
    per_source = []
    for (mdp_i, sa_counts_i), alpha in zip(sources, alphas):
        masked = masked_value_iteration(mdp_i, sa_counts_i)
        mu_i = empirical_policy(sa_counts_i)
        j_mu = policy_evaluation(mdp_i, mu_i)
        j_insample = policy_evaluation(mdp_i, masked.pi_star)
        j_opt = value_iteration(mdp_i).j
        j_hat_i = policy_evaluation(mdp_i, policy_hat)
        per_source.append(
            SourceTerm(
                alpha=float(alpha),
                value_misalignment=abs(j_mu - j_insample),
                dynamics_misalignment=sup_tv(mdp_i.transition, target_mdp.transition),
                eps_insample=abs(j_insample - j_opt),
                eps_behavior=abs(j_hat_i - j_mu),
            )
        )
    delta = float(sum(t.alpha * (t.eps_insample + t.eps_behavior) for t in per_source))
    rhs = float(
        sum(t.alpha * (t.value_misalignment + C * t.dynamics_misalignment) for t in per_source) + delta
    )
    return BoundReport(
        subopt=float(subopt),
        per_source=per_source,
        delta=delta,
        C=float(C),
        rhs=rhs,
        holds=bool(subopt <= rhs + 1e-9),
    )


@dataclass
class MisassignmentRow:
    index: int
    per_modality: float
    global_expectation: float
    gap: float
    flagged: bool


def detect_misassignment(sources, tol_ma: float = 1e-6):
    """Per-sub-dataset in-sample advantage expectations, per-modality vs pooled.

    `sources` is a list of (mdp_i, sa_counts_i). The pooled quantities use the
    mixture dynamics sum_i alpha_i P_i with alpha from sample counts, and the
    union of all dataset supports.
    """
    counts = [np.asarray(c, dtype=np.float64) for _, c in sources]
    n = np.array([c.sum() for c in counts])
    if np.any(n == 0):
        raise MaskedMDPError("every sub-dataset must contain samples")
    alphas = n / n.sum()
    base = sources[0][0]
    P_mix = sum(a * m.transition for a, (m, _) in zip(alphas, sources))
    mix_mdp = TabularMDP(
        transition=P_mix,
        reward=base.reward,
        initial_dist=base.initial_dist,
        gamma=base.gamma,
        r_max=base.r_max,
    )
    pooled_counts = sum(counts)
    adv_global = in_sample_advantage(mix_mdp, pooled_counts)

    rows = []
    for i, ((mdp_i, _), c) in enumerate(zip(sources, counts)):
        adv_i = in_sample_advantage(mdp_i, c)
        w = c / c.sum()
        per_modality = float(np.nansum(np.where(c > 0, adv_i * w, 0.0)))
        global_exp = float(np.nansum(np.where(c > 0, adv_global * w, 0.0)))
        gap = per_modality - global_exp
        rows.append(
            MisassignmentRow(
                index=i,
                per_modality=per_modality,
                global_expectation=global_exp,
                gap=gap,
                flagged=bool(abs(gap) > tol_ma),
            )
        )
    return rows


def misassignment_showcase(seed: int = 11):
    """Constructed two-modality instance exhibiting value misassignment.

    Sub-dataset 0 is collected in a morphology-shifted domain by that domain's
    own optimal policy (so its in-sample optimum is itself); sub-dataset 1 is
    collected in the unshifted domain by a broader near-optimal policy. The
    pooled in-sample optimum then disagrees with sub-dataset 0's behavior.
    """
    from .envsuite import ShiftSpec, apply_tabular_shift, make_tabular_mdp

    target = make_tabular_mdp(seed, gamma=0.9)
    shifted = apply_tabular_shift(target, ShiftSpec(kind="morphology", level="medium"))
    sol_shifted = value_iteration(shifted)
    sol_target = value_iteration(target)

    # Support of D_0: exactly the shifted-optimal action at every state.
    counts0 = np.zeros((target.n_states, target.n_actions), dtype=np.int64)
    counts0[np.arange(target.n_states), sol_shifted.pi_star] = 50
    # Support of D_1: target-optimal plus one alternative action per state.
    counts1 = np.zeros_like(counts0)
    counts1[np.arange(target.n_states), sol_target.pi_star] = 40
    counts1[np.arange(target.n_states), (sol_target.pi_star + 1) % target.n_actions] = 10
    return [(shifted, counts0), (target, counts1)]
