"""Behavior policies, trajectory collection, heterogeneous mixing, datasets.

Tabular states/actions are stored as one-hot float vectors so every learner
sees a uniform array interface; integer ids are kept alongside for the exact
oracle machinery. Ground-truth modality ids ride along for evaluation only:
no learner operation reads them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envsuite import PointMassEnv, TabularDomain, step
from .errors import ConfigError
from .oracle import value_iteration
from .rng import generator

QUALITIES = ("medium", "expert", "medium_replay", "medium_expert")
MEDIUM_REPLAY_EPSILONS = (0.5, 0.3, 0.1)


@dataclass
class Transition:
    """One environment step; the atomic dataset record."""

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Trajectory:
    """Ordered transitions sharing one underlying dynamics."""

    states: np.ndarray  # (T+1, d_s)
    actions: np.ndarray  # (T, d_a)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) bool
    modality_id: int
    quality: str
    state_ids: np.ndarray | None = None  # (T+1,) ints, tabular only
    action_ids: np.ndarray | None = None  # (T,) ints, tabular only
    latent: np.ndarray | None = None  # trajectory-level z
    step_latents: np.ndarray | None = None  # (T, d_z), per-transition variant

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(
                s=self.states[t],
                a=self.actions[t],
                r=float(self.rewards[t]),
                s_next=self.states[t + 1],
                done=bool(self.dones[t]),
            )
            for t in range(len(self))
        ]

    def validate(self):
        T = len(self)
        if self.states.shape[0] != T + 1 or self.rewards.shape[0] != T:
            raise ConfigError("trajectory arrays are inconsistent")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.rewards))):
            raise ConfigError("trajectory contains non-finite entries")
        if self.quality not in QUALITIES:
            raise ConfigError(f"unknown quality tag {self.quality!r}")


@dataclass
class HeteroDataset:
    """Trajectories from multiple (dynamics, behavior) modes."""

    trajectories: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def sub_datasets(self) -> dict:
        """Partition of trajectory indices by (modality_id, quality)."""
        parts: dict = {}
        for i, traj in enumerate(self.trajectories):
            parts.setdefault((traj.modality_id, traj.quality), []).append(i)
        return parts

    @property
    def mixing(self) -> dict:
        """Transition-count fractions per sub-dataset; sums to 1."""
        total = self.n_transitions
        return {
            key: sum(len(self.trajectories[i]) for i in idx) / total
            for key, idx in self.sub_datasets.items()
        }

    @property
    def latents(self):
        out = [t.latent for t in self.trajectories]
        return None if all(z is None for z in out) else out

    def validate(self):
        for t in self.trajectories:
            t.validate()
        mix = self.mixing
        if abs(sum(mix.values()) - 1.0) > 1e-12:
            raise ConfigError("mixing coefficients must sum to 1")


@dataclass
class BehaviorPolicy:
    """Gaussian-perturbed / epsilon-perturbed controller around an optimum."""

    kind: str  # epsilon_optimal | noisy_expert | random_mix
    quality: str
    epsilon: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in ("epsilon_optimal", "noisy_expert", "random_mix"):
            raise ConfigError(f"unknown behavior kind {self.kind!r}")
        if self.quality not in QUALITIES:
            raise ConfigError(f"unknown quality {self.quality!r}")


# Default quality -> perturbation mapping, tuned for a visible return gap.
TABULAR_EPSILON = {"expert": 0.05, "medium": 0.45}
POINTMASS_NOISE = {"expert": 0.1, "medium": 0.7}


def make_policy(domain, quality: str) -> BehaviorPolicy:
    if quality == "medium_replay":
        return BehaviorPolicy(kind="epsilon_optimal", quality=quality)
    if isinstance(domain, TabularDomain):
        return BehaviorPolicy(
            kind="epsilon_optimal", quality=quality, epsilon=TABULAR_EPSILON[quality]
        )
    return BehaviorPolicy(kind="noisy_expert", quality=quality, noise=POINTMASS_NOISE[quality])


def one_hot(idx: int, dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[idx] = 1.0
    return v


def _pd_action(env: PointMassEnv, state: np.ndarray) -> np.ndarray:
    goal = np.asarray(env.goal)
    return np.clip(2.5 * (goal - state[:2]) - 1.2 * state[2:], -1.0, 1.0)


def _collect_tabular(domain: TabularDomain, greedy, eps: float, quality: str, i: int, seed) -> Trajectory:
    rng = generator(seed, "collect", i)
    mdp = domain.mdp
    s = domain.initial_state(rng)
    ids = [s]
    acts, rewards = [], []
    for _ in range(domain.horizon):
        if rng.uniform() < eps:
            a = int(rng.integers(mdp.n_actions))
        else:
            a = int(greedy[s])
        s_next, r = step(domain, s, a, rng)
        acts.append(a)
        rewards.append(r)
        ids.append(s_next)
        s = s_next
    ids = np.array(ids)
    acts = np.array(acts)
    return Trajectory(
        states=np.eye(mdp.n_states)[ids],
        actions=np.eye(mdp.n_actions)[acts],
        rewards=np.array(rewards),
        dones=np.zeros(len(acts), dtype=bool),
        modality_id=domain.modality_id,
        quality=quality,
        state_ids=ids,
        action_ids=acts,
    )


def _collect_pointmass(env: PointMassEnv, policy: BehaviorPolicy, i: int, seed) -> Trajectory:
    rng = generator(seed, "collect", i)
    s = env.initial_state(rng)
    states = [s]
    acts, rewards = [], []
    for _ in range(env.horizon):
        a = _pd_action(env, s)
        if policy.kind == "random_mix" and rng.uniform() < policy.epsilon:
            a = rng.uniform(-1.0, 1.0, size=2)
        else:
            a = np.clip(a + policy.noise * rng.normal(size=2), -1.0, 1.0)
        s_next, r = step(env, s, a, rng)
        acts.append(a)
        rewards.append(r)
        states.append(s_next)
        s = s_next
    return Trajectory(
        states=np.array(states),
        actions=np.array(acts),
        rewards=np.array(rewards),
        dones=np.zeros(len(acts), dtype=bool),
        modality_id=env.modality_id,
        quality=policy.quality,
    )


def collect(domain, policy: BehaviorPolicy, n_trajectories: int, seed: int) -> list:
    """Seeded trajectory collection; deterministic and order-stable."""
    if n_trajectories <= 0:
        raise ConfigError("n_trajectories must be positive")
    out = []
    if isinstance(domain, TabularDomain):
        greedy = value_iteration(domain.mdp).pi_star
        for i in range(n_trajectories):
            if policy.quality == "medium_replay":
                # fixed thirds of decreasing exploration, mimicking replay curricula
                eps = MEDIUM_REPLAY_EPSILONS[min(2, (3 * i) // n_trajectories)]
            else:
                eps = policy.epsilon
            out.append(_collect_tabular(domain, greedy, eps, policy.quality, i, seed))
    else:
        for i in range(n_trajectories):
            out.append(_collect_pointmass(domain, policy, i, seed))
    return out


def discounted_return(traj: Trajectory, gamma: float) -> float:
    return float(np.sum(traj.rewards * gamma ** np.arange(len(traj))))


def mix(parts, truncate: bool = False, seed: int = 0) -> HeteroDataset:
    """Combine (trajectories, weight) parts into one seeded-shuffled dataset."""
    cleaned = []
    for trajs, weight in parts:
        if not trajs:
            raise ConfigError("empty part passed to mix")
        if weight <= 0:
            raise ConfigError("part weights must be positive")
        cleaned.append((list(trajs), float(weight)))
    total_w = sum(w for _, w in cleaned)
    shares = [w / total_w for _, w in cleaned]
    # Largest dataset size such that every part can fill its share.
    total = min(int(len(t) / s) for (t, _), s in zip(cleaned, shares))
    takes = [int(round(s * total)) for s in shares]
    for (trajs, _), take, share in zip(cleaned, takes, shares):
        if take < len(trajs) and not truncate:
            raise ConfigError(
                "part sizes do not realize the requested weights; pass truncate=True"
            )
    chosen = []
    for (trajs, _), take in zip(cleaned, takes):
        chosen.extend(trajs[:take])
    order = generator(seed, "mix").permutation(len(chosen))
    return HeteroDataset(trajectories=[chosen[i] for i in order])


def make_motivating_mixture(
    seed: int,
    target_domain,
    shifted_domain,
    n_source_traj: int = 200,
    target_fraction: float = 0.1,
):
    """Half expert data under target dynamics, half medium data under a shift,
    plus a small medium-quality target dataset (one tenth of the source size).
    """
    n_half = n_source_traj // 2
    expert = collect(target_domain, make_policy(target_domain, "expert"), n_half, seed)
    for t in expert:
        t.modality_id = 0
    medium = collect(shifted_domain, make_policy(shifted_domain, "medium"), n_half, seed + 1)
    source = mix([(expert, 1.0), (medium, 1.0)], seed=seed)
    n_target = max(1, int(round(n_source_traj * target_fraction)))
    target_trajs = collect(
        target_domain, make_policy(target_domain, "medium"), n_target, seed + 2
    )
    target = HeteroDataset(trajectories=target_trajs)
    return source, target


def relabel(dataset: HeteroDataset, encoder, sample: bool = False, seed: int = 0) -> HeteroDataset:
    """Attach one dynamics-representation vector per trajectory.

    The stored z is the posterior mean by default; with sample=True a single
    reparameterized draw is used instead. Idempotent for the default mode.
    """
    rng = generator(seed, "relabel") if sample else None
    for traj in dataset.trajectories:
        post = encoder.posterior(traj)
        z = np.asarray(post.mean, dtype=np.float64)
        if sample:
            z = z + np.exp(0.5 * np.asarray(post.log_variance)) * rng.normal(size=z.shape)
        traj.latent = z
        traj.step_latents = None
    return dataset


def relabel_per_transition(dataset: HeteroDataset, encoder_sa) -> HeteroDataset:
    """Per-transition posteriors; deliberately lacks temporal consistency."""
    for traj in dataset.trajectories:
        means, _ = encoder_sa.posterior_steps(traj)
        traj.step_latents = np.asarray(means, dtype=np.float64)
        traj.latent = None
    return dataset


QUALITY_CODE = {q: i for i, q in enumerate(QUALITIES)}


def flatten(dataset: HeteroDataset, with_z: bool = False) -> dict:
    """Transition-level arrays for batched training.

    modality/quality columns are evaluation-side diagnostics; learner losses
    must not consume them.
    """
    s, a, r, s_next, done = [], [], [], [], []
    z, modality, quality, traj_idx, step_idx = [], [], [], [], []
    for i, traj in enumerate(dataset.trajectories):
        T = len(traj)
        s.append(traj.states[:-1])
        s_next.append(traj.states[1:])
        a.append(traj.actions)
        r.append(traj.rewards)
        done.append(traj.dones)
        modality.append(np.full(T, traj.modality_id))
        quality.append(np.full(T, QUALITY_CODE[traj.quality]))
        traj_idx.append(np.full(T, i))
        step_idx.append(np.arange(T))
        if with_z:
            if traj.step_latents is not None:
                z.append(traj.step_latents)
            elif traj.latent is not None:
                z.append(np.tile(traj.latent, (T, 1)))
            else:
                raise ConfigError("dataset is not relabeled; z unavailable")
    out = {
        "s": np.concatenate(s),
        "a": np.concatenate(a),
        "r": np.concatenate(r),
        "s_next": np.concatenate(s_next),
        "done": np.concatenate(done),
        "modality": np.concatenate(modality),
        "quality": np.concatenate(quality),
        "traj_idx": np.concatenate(traj_idx),
        "step_idx": np.concatenate(step_idx),
    }
    if with_z:
        out["z"] = np.concatenate(z)
    return out


def sa_counts(dataset: HeteroDataset, n_states: int, n_actions: int, modality=None) -> np.ndarray:
    """State-action visit counts, optionally restricted to one modality."""
    counts = np.zeros((n_states, n_actions), dtype=np.int64)
    for traj in dataset.trajectories:
        if modality is not None and traj.modality_id != modality:
            continue
        if traj.state_ids is None:
            raise ConfigError("sa_counts requires tabular trajectories")
        np.add.at(counts, (traj.state_ids[:-1], traj.action_ids), 1)
    return counts


# ---------------------------------------------------------------------------
# Serialization: JSON lines with %.17g floats, byte-stable across round trips.


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    if isinstance(x, dict):
        items = ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in x.items())
        return "{" + items + "}"
    if x is None:
        return "null"
    raise ConfigError(f"cannot serialize {type(x).__name__}")


def save_dataset(path, dataset: HeteroDataset, domain_hash: str = "", extra_header=None):
    dataset.validate()
    path = Path(path)
    header = {
        "format": "v2a-dataset",
        "version": 1,
        "domain_hash": domain_hash,
        "quality_tags": sorted({t.quality for t in dataset.trajectories}),
        "alpha": {f"{k[0]}:{k[1]}": v for k, v in sorted(dataset.mixing.items())},
    }
    if extra_header:
        header.update(extra_header)
    lines = [_fmt(header)]
    for traj in dataset.trajectories:
        rec = {
            "modality_id": traj.modality_id,
            "quality": traj.quality,
            "transitions": [
                [
                    traj.states[t],
                    traj.actions[t],
                    float(traj.rewards[t]),
                    traj.states[t + 1],
                    bool(traj.dones[t]),
                ]
                for t in range(len(traj))
            ],
        }
        if traj.latent is not None:
            rec["latent"] = traj.latent
        if traj.step_latents is not None:
            rec["step_latents"] = traj.step_latents
        lines.append(_fmt(rec))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path) -> tuple[HeteroDataset, dict]:
    path = Path(path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "v2a-dataset":
        raise ConfigError(f"{path}: not a dataset file")
    trajectories = []
    for line in lines[1:]:
        rec = json.loads(line)
        trans = rec["transitions"]
        states = [np.asarray(t[0], dtype=np.float64) for t in trans]
        states.append(np.asarray(trans[-1][3], dtype=np.float64))
        for t in range(len(trans) - 1):
            if not np.array_equal(np.asarray(trans[t][3]), np.asarray(trans[t + 1][0])):
                raise ConfigError(f"{path}: broken trajectory chain")
        states = np.array(states)
        actions = np.array([t[1] for t in trans], dtype=np.float64)
        traj = Trajectory(
            states=states,
            actions=actions,
            rewards=np.array([t[2] for t in trans], dtype=np.float64),
            dones=np.array([t[4] for t in trans], dtype=bool),
            modality_id=int(rec["modality_id"]),
            quality=rec["quality"],
        )
        # Recover integer ids when the vectors are exactly one-hot.
        if np.all(np.isin(states, (0.0, 1.0))) and np.all(states.sum(axis=1) == 1.0):
            traj.state_ids = states.argmax(axis=1)
            traj.action_ids = actions.argmax(axis=1)
        if "latent" in rec:
            traj.latent = np.asarray(rec["latent"], dtype=np.float64)
        if "step_latents" in rec:
            traj.step_latents = np.asarray(rec["step_latents"], dtype=np.float64)
        trajectories.append(traj)
    ds = HeteroDataset(trajectories=trajectories)
    ds.validate()
    return ds, header
