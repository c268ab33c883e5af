"""Stage orchestration shared by the CLI, sweeps, and the acceptance suite.

Stages: data -> repr -> relabel -> adv -> score -> policy. Variants change
which stages run and which composite score feeds the filter:

  v2a        trajectory-level representation, modality-aware advantage, f
  sample_v2a per-transition representation, modality-aware advantage, f
  dvdf       modality-free advantage, g
  igdf       dynamics-alignment score only (lambda = 1)
  pooled     no filtering at all
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import advantage as adv_mod
from . import alignment as align_mod
from . import datagen
from . import envsuite
from . import modality
from . import policyopt
from .config import ExperimentConfig
from .errors import ConfigError

VARIANTS = ("v2a", "dvdf", "igdf", "pooled", "sample_v2a")
STAGES = ("repr", "adv", "score", "policy")


@dataclass
class DataBundle:
    target_domain: object
    source_domains: list
    source: datagen.HeteroDataset
    target: datagen.HeteroDataset
    descriptor: dict


def build_domains(cfg: ExperimentConfig):
    env = cfg.section("env")
    data = cfg.section("data")
    if data["preset"] == "hetero4":
        shifts = [
            envsuite.ShiftSpec(kind, level)
            for kind in ("kinematic", "morphology")
            for level in ("easy", "medium")
        ]
    else:
        shifts = [envsuite.ShiftSpec(data["shift_kind"], data["shift_level"])]
    kwargs = {}
    if env["family"] == "tabular":
        kwargs = {
            "n_states": env["n_states"],
            "n_actions": env["n_actions"],
            "n_successors": env["n_successors"],
            "gamma": env["gamma"],
            "reward_style": env["reward_style"],
            "init_style": env["init_style"],
        }
    return envsuite.make_domain_family(
        env["base_seed"], env["family"], shifts, horizon=env["horizon"], **kwargs
    )


def stage_data(cfg: ExperimentConfig, seed: int | None = None) -> DataBundle:
    seed = cfg.seed if seed is None else seed
    data = cfg.section("data")
    target_domain, source_domains = build_domains(cfg)
    if data["preset"] in ("motivating", "custom"):
        source, target = datagen.make_motivating_mixture(
            seed,
            target_domain,
            source_domains[0],
            n_source_traj=data["n_source_traj"],
            target_fraction=data["n_target_traj"] / max(1, data["n_source_traj"]),
        )
    elif data["preset"] == "hetero4":
        per_domain = data["n_source_traj"] // len(source_domains)
        parts = []
        for d_i, dom in enumerate(source_domains):
            if data["source_quality"] == "medium_expert":
                half = max(1, per_domain // 2)
                trajs = datagen.collect(
                    dom, datagen.make_policy(dom, "medium"), half, seed + 101 + d_i
                ) + datagen.collect(
                    dom, datagen.make_policy(dom, "expert"), half, seed + 201 + d_i
                )
            else:
                trajs = datagen.collect(
                    dom, datagen.make_policy(dom, data["source_quality"]), per_domain,
                    seed + 101 + d_i,
                )
            parts.append((trajs, 1.0))
        source = datagen.mix(parts, seed=seed)
        target = datagen.HeteroDataset(
            trajectories=datagen.collect(
                target_domain,
                datagen.make_policy(target_domain, data["target_quality"]),
                data["n_target_traj"],
                seed + 301,
            )
        )
    else:
        raise ConfigError(f"unknown preset {data['preset']!r}")
    desc = envsuite.domain_descriptor(target_domain, source_domains)
    return DataBundle(
        target_domain=target_domain,
        source_domains=source_domains,
        source=source,
        target=target,
        descriptor=desc,
    )


def em_config(cfg: ExperimentConfig, seed: int) -> modality.EMConfig:
    m = cfg.section("modality")
    return modality.EMConfig(
        d_z=m["d_z"],
        hidden=m["hidden"],
        ensemble_size=m["ensemble_size"],
        outer_iters=m["outer_iters"],
        e_steps=m["e_steps"],
        m_steps=m["m_steps"],
        lr=m["lr"],
        batch_traj=m["batch_traj"],
        n_latent_samples=m["n_latent_samples"],
        n_latent_samples_eval=m["n_latent_samples_eval"],
        kl_weight=m["kl_weight"],
        mode=m["mode"],
        tol_em=m["tol_em"],
        patience=m["patience"],
        seed=seed,
    )


def stage_repr(bundle: DataBundle, cfg: ExperimentConfig, variant: str, seed: int):
    """Representation learning + relabeling; returns (encoder, decoder, history)."""
    emc = em_config(cfg, seed)
    trajs = bundle.source.trajectories
    if variant == "sample_v2a":
        encoder, decoder, history = modality.train_sample_encoder(trajs, emc)
        datagen.relabel_per_transition(bundle.source, encoder)
    else:
        encoder, decoder, history = modality.run_em(trajs, emc)
        datagen.relabel(
            bundle.source, encoder, sample=cfg.section("modality")["sample_z"], seed=seed
        )
    return encoder, decoder, history


def stage_adv(bundle: DataBundle, cfg: ExperimentConfig, modality_aware: bool, seed: int):
    a = cfg.section("advantage")
    acfg = adv_mod.AdvantageConfig(
        alpha=a["alpha"],
        gamma=cfg.section("policy")["gamma"],
        hidden=tuple(a["hidden"]),
        lr=a["lr"],
        batch_size=a["batch_size"],
        n_steps=a["n_steps"],
        seed=seed,
    )
    flat = datagen.flatten(bundle.source, with_z=modality_aware)
    return adv_mod.train_advantage(flat, acfg, modality_aware=modality_aware)


def stage_scorer(bundle: DataBundle, cfg: ExperimentConfig, seed: int):
    al = cfg.section("alignment")
    scfg = align_mod.ScorerConfig(
        d_rep=al["d_rep"],
        hidden=tuple(al["hidden"]),
        temperature=al["temperature"],
        n_negatives=al["n_negatives"],
        lr=al["lr"],
        batch_size=al["batch_size"],
        n_steps=al["n_steps"],
        seed=seed,
    )
    target_flat = datagen.flatten(bundle.target)
    source_flat = datagen.flatten(bundle.source)
    return align_mod.train_scorer(target_flat, source_flat, scfg)


def variant_scores(variant: str, scorer, adv_model, bundle: DataBundle,
                   cfg: ExperimentConfig) -> np.ndarray | None:
    """Per-sample composite score driving the filter, or None for pooled."""
    al = cfg.section("alignment")
    if variant == "pooled":
        return None
    with_z = adv_model is not None and adv_model.modality_aware
    flat = datagen.flatten(bundle.source, with_z=with_z)
    if variant == "igdf":
        h = scorer.h_values(flat["s"], flat["a"], flat["s_next"])
        return align_mod.normalize_adv(h, align_mod.NormStats.from_values(h))
    lam = al["lambda_f"] if variant in ("v2a", "sample_v2a") else al["lambda_g"]
    sf = align_mod.fit_score_function(scorer, adv_model, flat, lam, raw_h=al["raw_h"])
    if variant in ("v2a", "sample_v2a"):
        return align_mod.score_f(sf, flat["s"], flat["a"], flat["s_next"], flat["z"])
    return align_mod.score_g(sf, flat["s"], flat["a"], flat["s_next"])


def stage_policy(bundle: DataBundle, cfg: ExperimentConfig, scores, seed: int):
    p = cfg.section("policy")
    pcfg = policyopt.PolicyConfig(
        gamma=p["gamma"],
        expectile_tau=p["expectile_tau"],
        awr_beta=p["awr_beta"],
        polyak_mu=p["polyak_mu"],
        w_max=p["w_max"],
        hidden=tuple(p["hidden"]),
        lr=p["lr"],
        batch_src=p["batch_src"],
        batch_tar=p["batch_tar"],
        n_steps=p["n_steps"],
        xi=cfg.section("alignment")["xi"],
        filtered_pi=p["filtered_pi"],
        seed=seed,
        metrics_every=p["metrics_every"],
    )
    target_flat = datagen.flatten(bundle.target)
    source_flat = datagen.flatten(bundle.source)
    continuous = isinstance(bundle.target_domain, envsuite.PointMassEnv)
    return policyopt.train_policy(
        target_flat, source_flat, pcfg, source_scores=scores, continuous=continuous
    )


def run_variant(variant: str, cfg: ExperimentConfig, seed: int,
                bundle: DataBundle | None = None) -> dict:
    """Full pipeline for one variant and seed; returns the evaluation record."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if bundle is None:
        bundle = stage_data(cfg, seed)
    encoder = adv_model = None
    if variant in ("v2a", "sample_v2a"):
        encoder, _, _ = stage_repr(bundle, cfg, variant, seed)
        adv_model = stage_adv(bundle, cfg, modality_aware=True, seed=seed)
    elif variant == "dvdf":
        adv_model = stage_adv(bundle, cfg, modality_aware=False, seed=seed)
    scorer = stage_scorer(bundle, cfg, seed) if variant != "pooled" else None
    scores = variant_scores(variant, scorer, adv_model, bundle, cfg)
    model, log = stage_policy(bundle, cfg, scores, seed)
    report = policyopt.evaluate(
        model,
        bundle.target_domain,
        cfg.section("policy")["n_eval_episodes"],
        seed,
    )
    out = {
        "variant": variant,
        "seed": seed,
        "normalized_score": report.normalized_score,
        "mean_return": report.mean_return,
        "std_return": report.std_return,
    }
    if scores is not None:
        xi = cfg.section("alignment")["xi"]
        sel = align_mod.quantile_filter(scores, xi)
        flat = datagen.flatten(bundle.source)
        expert_code = datagen.QUALITY_CODE["expert"]
        out["selected_expert_fraction"] = float(np.mean(flat["quality"][sel] == expert_code))
    return out
