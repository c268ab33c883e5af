"""Synthetic target/source environments with parametric dynamics shifts.

Families share everything except the transition dynamics: one target domain
plus one source domain per shift spec, all with identical state/action
spaces, rewards, initial distribution, and discount.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError
from .rng import generator

TV_ATOL = 1e-12


@dataclass
class TabularMDP:
    """Finite MDP with explicit transition tensor P[s, a, s']."""

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    gamma: float
    r_max: float = 1.0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self):
        P, R, rho = self.transition, self.reward, self.initial_dist
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise ConfigError(f"inconsistent MDP shapes P{P.shape} R{R.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > TV_ATOL:
            raise ConfigError("transition rows must be distributions")
        if abs(rho.sum() - 1.0) > TV_ATOL or np.any(rho < 0):
            raise ConfigError("initial distribution must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if np.max(np.abs(R)) > self.r_max + TV_ATOL:
            raise ConfigError("rewards exceed the declared bound")


@dataclass(frozen=True)
class ShiftSpec:
    """Dynamics shift descriptor; magnitudes derive from (kind, level)."""

    kind: str = "none"  # {kinematic, morphology, none}
    level: str = "medium"  # {easy, medium}

    KINDS = ("kinematic", "morphology", "none")
    LEVELS = ("easy", "medium")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}")
        if self.level not in self.LEVELS:
            raise ConfigError(f"unknown shift level {self.level!r}")

    @property
    def magnitude(self) -> float:
        """Suppression/blend strength in (0, 1]; medium is the stronger shift."""
        if self.kind == "none":
            return 0.0
        return {"easy": 0.5, "medium": 1.0}[self.level]

    @property
    def tag(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}-{self.level}"

    def to_dict(self):
        return {"kind": self.kind, "level": self.level}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], level=d["level"])


# Tabular shift structure: kinematic suppresses these actions onto action 0,
# morphology relabels next-state outcomes by swapping adjacent state pairs.
KINEMATIC_FROZEN_ACTIONS = (1, 2)
KINEMATIC_ANCHOR_ACTION = 0


def _morphology_permutation(n_states: int) -> np.ndarray:
    perm = np.arange(n_states)
    for i in range(0, n_states - 1, 2):
        perm[i], perm[i + 1] = perm[i + 1], perm[i]
    return perm


@dataclass
class TabularDomain:
    """Immutable tabular environment descriptor."""

    mdp: TabularMDP
    horizon: int
    modality_id: int
    shift: ShiftSpec
    family_seed: int

    @property
    def state_dim(self) -> int:
        return self.mdp.n_states

    @property
    def action_dim(self) -> int:
        return self.mdp.n_actions

    @property
    def kind(self) -> str:
        return "tabular"

    def initial_state(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.mdp.n_states, p=self.mdp.initial_dist))


@dataclass
class PointMassEnv:
    """Planar double-integrator with bounded box, goal reward, and shifts."""

    horizon: int = 200
    dt: float = 0.1
    goal: tuple = (0.8, 0.8)
    noise_scale: float = 0.01
    authority: tuple = (1.0, 1.0)
    vel_coeff: float = 1.0
    modality_id: int = 0
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    family_seed: int = 0
    gamma: float = 0.99

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def kind(self) -> str:
        return "pointmass"

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        pos = np.array([-0.8, -0.8]) + rng.uniform(-0.1, 0.1, size=2)
        return np.concatenate([pos, np.zeros(2)])

    def reward(self, state: np.ndarray) -> float:
        dist = float(np.linalg.norm(state[:2] - np.asarray(self.goal)))
        return -dist / (2.0 * np.sqrt(2.0))


def _random_transition_tensor(rng, n_states, n_actions, n_successors):
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=n_successors, replace=False)
            w = rng.exponential(size=n_successors)
            P[s, a, succ] = w / w.sum()
    return P


def make_tabular_mdp(
    seed: int,
    n_states: int = 20,
    n_actions: int = 4,
    n_successors: int = 3,
    gamma: float = 0.9,
    reward_style: str = "uniform",
    init_style: str = "uniform",
) -> TabularMDP:
    """Seeded sparse random MDP with rewards bounded by r_max = 1."""
    rng = generator(seed, "tabular-mdp")
    P = _random_transition_tensor(rng, n_states, n_actions, n_successors)
    if reward_style == "uniform":
        R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    elif reward_style == "sparse":
        # a few rewarding states, mildly costly elsewhere; sharpens quality gaps
        R = np.full((n_states, n_actions), -0.1)
        hot = rng.choice(n_states, size=max(2, n_states // 6), replace=False)
        R[hot, :] = 1.0
    else:
        raise ConfigError(f"unknown reward_style {reward_style!r}")
    if init_style == "uniform":
        rho = np.full(n_states, 1.0 / n_states)
    elif init_style == "point":
        rho = np.zeros(n_states)
        rho[0] = 1.0
    else:
        raise ConfigError(f"unknown init_style {init_style!r}")
    return TabularMDP(transition=P, reward=R, initial_dist=rho, gamma=gamma, r_max=1.0)


def apply_shift(target, shift: ShiftSpec):
    """Shifted copy of a domain's dynamics; everything else is shared."""
    if isinstance(target, TabularDomain):
        return replace(target, mdp=apply_tabular_shift(target.mdp, shift), shift=shift)
    if isinstance(target, TabularMDP):
        return apply_tabular_shift(target, shift)
    if isinstance(target, PointMassEnv):
        return apply_pointmass_shift(target, shift)
    raise ConfigError(f"cannot shift object of type {type(target).__name__}")


def apply_tabular_shift(mdp: TabularMDP, shift: ShiftSpec) -> TabularMDP:
    if shift.kind == "none":
        return TabularMDP(
            transition=mdp.transition.copy(),
            reward=mdp.reward,
            initial_dist=mdp.initial_dist,
            gamma=mdp.gamma,
            r_max=mdp.r_max,
        )
    m = shift.magnitude
    P = mdp.transition.copy()
    if shift.kind == "kinematic":
        anchor = P[:, KINEMATIC_ANCHOR_ACTION, :]
        for a in KINEMATIC_FROZEN_ACTIONS:
            P[:, a, :] = (1.0 - m) * P[:, a, :] + m * anchor
    else:  # morphology: blend toward the state-swapped outcome tensor
        perm = _morphology_permutation(mdp.n_states)
        P_perm = mdp.transition[:, :, np.argsort(perm)]
        P = (1.0 - m) * mdp.transition + m * P_perm
    return TabularMDP(
        transition=P,
        reward=mdp.reward,
        initial_dist=mdp.initial_dist,
        gamma=mdp.gamma,
        r_max=mdp.r_max,
    )


def apply_pointmass_shift(env: PointMassEnv, shift: ShiftSpec) -> PointMassEnv:
    if shift.kind == "none":
        return replace(env, shift=shift)
    if shift.kind == "kinematic":
        mult = {"easy": 0.5, "medium": 0.1}[shift.level]
        return replace(env, authority=(mult, env.authority[1]), shift=shift)
    coeff = {"easy": 0.8, "medium": 0.5}[shift.level]
    return replace(env, vel_coeff=coeff, shift=shift)


def make_domain_family(
    base_seed: int,
    family: str,
    shifts,
    horizon: int | None = None,
    **mdp_kwargs,
):
    """One target domain plus one shifted source domain per ShiftSpec."""
    shifts = list(shifts)
    if not shifts:
        raise ConfigError("shifts must be non-empty")
    if family == "tabular":
        mdp = make_tabular_mdp(base_seed, **mdp_kwargs)
        target = TabularDomain(
            mdp=mdp,
            horizon=horizon or 25,
            modality_id=0,
            shift=ShiftSpec(),
            family_seed=base_seed,
        )
        sources = [
            replace(target, mdp=apply_tabular_shift(mdp, sp), shift=sp, modality_id=i + 1)
            for i, sp in enumerate(shifts)
        ]
    elif family == "pointmass":
        target = PointMassEnv(
            horizon=horizon or 200, modality_id=0, shift=ShiftSpec(), family_seed=base_seed
        )
        sources = [
            replace(apply_pointmass_shift(target, sp), modality_id=i + 1, shift=sp)
            for i, sp in enumerate(shifts)
        ]
    else:
        raise ConfigError(f"unknown family {family!r}")
    return target, sources


def step(env, state, action, rng: np.random.Generator):
    """Sample (next_state, reward); reward is deterministic in (s, a)."""
    if isinstance(env, TabularDomain):
        s = int(state)
        a = int(action)
        if not 0 <= s < env.mdp.n_states:
            raise DomainError(f"state {s} outside [0, {env.mdp.n_states})")
        if not 0 <= a < env.mdp.n_actions:
            raise DomainError(f"action {a} outside [0, {env.mdp.n_actions})")
        s_next = int(rng.choice(env.mdp.n_states, p=env.mdp.transition[s, a]))
        return s_next, float(env.mdp.reward[s, a])
    if isinstance(env, PointMassEnv):
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        if state.shape != (4,):
            raise DomainError(f"pointmass state must be 4-dim, got {state.shape}")
        if action.shape != (2,):
            raise DomainError(f"pointmass action must be 2-dim, got {action.shape}")
        reward = env.reward(state)
        a = np.clip(action, -1.0, 1.0) * np.asarray(env.authority)
        vel = np.clip(state[2:] + env.dt * a, -1.0, 1.0)
        pos = np.clip(state[:2] + env.dt * env.vel_coeff * vel, -1.0, 1.0)
        nxt = np.concatenate([pos, vel])
        if env.noise_scale > 0:
            nxt = nxt + env.noise_scale * rng.normal(size=4)
            nxt = np.clip(nxt, -1.0, 1.0)
        return nxt, float(reward)
    raise ConfigError(f"cannot step object of type {type(env).__name__}")


def domain_descriptor(target, sources) -> dict:
    """JSON-serializable family descriptor; datasets are reproducible from it."""
    first = target if not isinstance(target, TabularDomain) else target
    desc = {
        "family": first.kind,
        "base_seed": int(first.family_seed),
        "horizon": int(first.horizon),
        "shifts": [s.shift.to_dict() for s in sources],
    }
    if isinstance(target, TabularDomain):
        desc["n_states"] = target.mdp.n_states
        desc["n_actions"] = target.mdp.n_actions
        desc["gamma"] = target.mdp.gamma
    else:
        desc["gamma"] = target.gamma
    return desc


def family_from_descriptor(desc: dict, **mdp_kwargs):
    shifts = [ShiftSpec.from_dict(d) for d in desc["shifts"]]
    kwargs = dict(mdp_kwargs)
    if desc["family"] == "tabular":
        kwargs.setdefault("n_states", desc.get("n_states", 20))
        kwargs.setdefault("n_actions", desc.get("n_actions", 4))
        kwargs.setdefault("gamma", desc.get("gamma", 0.9))
    return make_domain_family(
        desc["base_seed"], desc["family"], shifts, horizon=desc.get("horizon"), **kwargs
    )


def descriptor_hash(desc: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def mean_displacement(env_a: PointMassEnv, env_b: PointMassEnv, n_probe: int = 64) -> float:
    """Mean next-state gap between two pointmass dynamics on a fixed probe set."""
    rng = generator(env_a.family_seed, "shift-probe")
    gaps = []
    for _ in range(n_probe):
        state = np.concatenate([rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)])
        action = rng.uniform(-1, 1, 2)
        na, _ = step(replace(env_a, noise_scale=0.0), state, action, rng)
        nb, _ = step(replace(env_b, noise_scale=0.0), state, action, rng)
        gaps.append(np.linalg.norm(na - nb))
    return float(np.mean(gaps))
