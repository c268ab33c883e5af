"""Dynamics-alignment scoring, advantage normalization, and data filtering.

The contrastive scorer rates a transition's agreement with the target
dynamics: h(s, a, s') = exp(<u(s, a), w(s')> / temperature), trained with an
InfoNCE objective whose positives are target-domain transitions and whose
negatives pair a target (s, a) with source next-states. Composite scores mix
the normalized h with a normalized advantage; the quantile filter keeps the
top ceil(xi * B) samples of each batch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .advantage import AdvantageModel, advantage
from .difffn import autodiff as ad
from .difffn.nets import MLPApproximator, build_params, gradient
from .difffn.optim import MomentState, sgd_step
from .errors import ConfigError, DivergenceError
from .rng import generator


@dataclass
class ScorerConfig:
    d_rep: int = 16
    hidden: tuple = (64,)
    temperature: float = 1.0
    n_negatives: int = 64
    lr: float = 3e-4
    batch_size: int = 128
    n_steps: int = 3000
    seed: int = 0


class ContrastiveScorer:
    """Two encoders whose inner product scores dynamics alignment; h > 0 always.

    Embeddings are scaled to unit norm, so the logits are cosine similarities
    over temperature and h stays within [exp(-1/T), exp(1/T)]; the min-max
    normalization downstream then keeps a usable spread.
    """

    def __init__(self, d_state: int, d_action: int, cfg: ScorerConfig, init_rng=None):
        self.cfg = cfg
        self.sa_encoder = MLPApproximator((d_state + d_action, *cfg.hidden, cfg.d_rep), "sa_enc")
        self.sn_encoder = MLPApproximator((d_state, *cfg.hidden, cfg.d_rep), "sn_enc")
        rng = init_rng if init_rng is not None else generator(cfg.seed, "scorer-init")
        self.params = build_params([self.sa_encoder, self.sn_encoder], rng)

    @staticmethod
    def _unit(rows: np.ndarray) -> np.ndarray:
        return rows / (np.linalg.norm(rows, axis=1, keepdims=True) + 1e-12)

    def logits(self, s, a, s_next) -> np.ndarray:
        """<u(s, a), w(s')> / temperature, row-wise."""
        u = self._unit(self.sa_encoder.forward(self.params, np.concatenate([s, a], axis=1)))
        w = self._unit(self.sn_encoder.forward(self.params, s_next))
        return np.sum(u * w, axis=1) / self.cfg.temperature

    def h_values(self, s, a, s_next) -> np.ndarray:
        return np.exp(self.logits(s, a, s_next))


def train_scorer(target_flat: dict, source_flat: dict, cfg: ScorerConfig) -> ContrastiveScorer:
    """InfoNCE training: positives from the target set, negatives pair the
    positive (s, a) with source next-states shared across the batch."""
    if target_flat["s"].shape[0] == 0 or source_flat["s"].shape[0] == 0:
        raise ConfigError("both datasets must be non-empty")
    d_state = target_flat["s"].shape[1]
    d_action = target_flat["a"].shape[1]
    scorer = ContrastiveScorer(d_state, d_action, cfg)
    rng = generator(cfg.seed, "scorer-train")
    n_tar = target_flat["s"].shape[0]
    n_src = source_flat["s"].shape[0]
    opt = MomentState.for_params(scorer.params)
    temp = cfg.temperature

    for step_i in range(cfg.n_steps):
        pos = rng.integers(n_tar, size=min(cfg.batch_size, n_tar))
        neg = rng.integers(n_src, size=cfg.n_negatives)
        s = target_flat["s"][pos]
        a = target_flat["a"][pos]
        sn_pos = target_flat["s_next"][pos]
        sn_neg = source_flat["s_next"][neg]

        def loss_fn(flat, layout):
            u = ad.l2_normalize_rows(
                scorer.sa_encoder.forward_graph(flat, layout, np.concatenate([s, a], axis=1))
            )
            w_pos = ad.l2_normalize_rows(scorer.sn_encoder.forward_graph(flat, layout, sn_pos))
            w_neg = ad.l2_normalize_rows(scorer.sn_encoder.forward_graph(flat, layout, sn_neg))
            pos_logit = ad.mul(ad.vsum(ad.mul(u, w_pos), axis=1), 1.0 / temp)
            neg_logits = ad.mul(ad.matmul(u, ad.transpose(w_neg)), 1.0 / temp)
            all_logits = ad.concat([ad.reshape(pos_logit, (len(pos), 1)), neg_logits], axis=1)
            return ad.vmean(ad.sub(ad.logsumexp(all_logits, axis=1), pos_logit))

        g = gradient(loss_fn, scorer.params)
        sgd_step(scorer.params, g, cfg.lr, opt)
        if not np.all(np.isfinite(scorer.params.values)):
            raise DivergenceError(f"contrastive training diverged at step {step_i}")
    return scorer


@dataclass
class NormStats:
    lo: float
    hi: float

    @classmethod
    def from_values(cls, values: np.ndarray) -> "NormStats":
        return cls(lo=float(np.min(values)), hi=float(np.max(values)))


def normalize_adv(values, stats: NormStats) -> np.ndarray:
    """Min-max map into [0, 1]; a flat range degenerates to 0.5 everywhere."""
    values = np.asarray(values, dtype=np.float64)
    if stats.hi == stats.lo:
        warnings.warn("degenerate normalization range; emitting 0.5")
        return np.full_like(values, 0.5)
    return np.clip((values - stats.lo) / (stats.hi - stats.lo), 0.0, 1.0)


@dataclass
class ScoreFunction:
    """Convex mix of normalized dynamics alignment and normalized advantage."""

    lam: float
    scorer: ContrastiveScorer
    adv_model: AdvantageModel
    adv_stats: NormStats
    h_stats: NormStats
    raw_h: bool = False  # skip h normalization (diagnostic mode)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")

    def h_norm(self, s, a, s_next) -> np.ndarray:
        h = self.scorer.h_values(s, a, s_next)
        return h if self.raw_h else normalize_adv(h, self.h_stats)

    def adv_norm(self, s, a, z=None) -> np.ndarray:
        vals = advantage(self.adv_model, s, a, z if self.adv_model.modality_aware else None)
        return normalize_adv(np.atleast_1d(vals), self.adv_stats)

    def __call__(self, s, a, s_next, z=None) -> np.ndarray:
        return self.lam * self.h_norm(s, a, s_next) + (1.0 - self.lam) * self.adv_norm(s, a, z)


def fit_score_function(scorer: ContrastiveScorer, adv_model: AdvantageModel,
                       source_flat: dict, lam: float, raw_h: bool = False) -> ScoreFunction:
    """Freeze normalization statistics over the full source dataset."""
    z = source_flat.get("z") if adv_model.modality_aware else None
    adv_vals = advantage(adv_model, source_flat["s"], source_flat["a"], z)
    h_vals = scorer.h_values(source_flat["s"], source_flat["a"], source_flat["s_next"])
    return ScoreFunction(
        lam=lam,
        scorer=scorer,
        adv_model=adv_model,
        adv_stats=NormStats.from_values(np.atleast_1d(adv_vals)),
        h_stats=NormStats.from_values(h_vals),
        raw_h=raw_h,
    )


def score_f(sf: ScoreFunction, s, a, s_next, z) -> np.ndarray:
    """Modality-aware composite score."""
    if not sf.adv_model.modality_aware:
        raise ConfigError("score_f requires a modality-aware advantage model")
    return sf(s, a, s_next, z)


def score_g(sf: ScoreFunction, s, a, s_next) -> np.ndarray:
    """Modality-free composite score (the baseline's form)."""
    if sf.adv_model.modality_aware:
        raise ConfigError("score_g requires a modality-free advantage model")
    return sf(s, a, s_next)


def quantile_filter(scores, xi: float) -> np.ndarray:
    """Boolean mask selecting exactly ceil(xi * B) highest scores.

    Ties break toward the lower index, so the selection is stable.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ConfigError("quantile_filter needs a non-empty 1-D score array")
    if not 0.0 < xi <= 1.0:
        raise ConfigError(f"xi must be in (0, 1], got {xi}")
    k = int(np.ceil(xi * scores.size))
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def score_table(sf_f: ScoreFunction, sf_g: ScoreFunction, source_flat: dict, xi: float) -> dict:
    """Columns for the score-table export and for filtered policy training."""
    s, a, sn = source_flat["s"], source_flat["a"], source_flat["s_next"]
    z = source_flat.get("z")
    h_norm = sf_f.h_norm(s, a, sn)
    f_vals = score_f(sf_f, s, a, sn, z)
    g_vals = score_g(sf_g, s, a, sn)
    return {
        "h_norm": h_norm,
        "adv_norm": sf_f.adv_norm(s, a, z),
        "f": f_vals,
        "g": g_vals,
        "selected_at_xi": quantile_filter(f_vals, xi),
        "modality": source_flat["modality"],
        "quality": source_flat["quality"],
        "traj_idx": source_flat["traj_idx"],
        "step_idx": source_flat["step_idx"],
    }


def export_score_table_csv(path, table: dict):
    import csv

    cols = ["traj_idx", "step_idx", "h_norm", "adv_norm", "f", "g", "selected_at_xi", "modality", "quality"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        n = len(table["f"])
        for i in range(n):
            row = []
            for c in cols:
                v = table[c][i]
                if isinstance(v, (float, np.floating)):
                    row.append("%.17g" % v)
                elif isinstance(v, (bool, np.bool_)):
                    row.append(int(v))
                else:
                    row.append(int(v))
            writer.writerow(row)
