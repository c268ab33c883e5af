"""Command-line pipeline: gen-data, train, eval, verify, sweep.

Stages write artifacts into a run directory and are glued together by a
manifest that hash-checks every declared input before a stage runs.
Exit codes: 0 success, 2 config error, 3 manifest error, 4 numeric
divergence, 5 verification failure.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import alignment as align_mod
from . import datagen, envsuite, modality, oracle, pipeline, policyopt
from .advantage import AdvantageModel, advantage
from .config import ExperimentConfig
from .difffn.checkpoint import load_params, save_params
from .difffn.nets import ParamVector
from .errors import (
    ConfigError,
    DivergenceError,
    ManifestError,
    NumericError,
    V2AError,
    VerificationError,
)
from .manifest import RunManifest

EXIT_CODES = [
    (ConfigError, 2),
    (ManifestError, 3),
    (NumericError, 4),
    (DivergenceError, 4),
    (VerificationError, 5),
]


def _exit_for(exc: V2AError) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def worker_count() -> int:
    return max(1, int(os.environ.get("V2A_THREADS", "1")))


def _merge_params(named: list) -> ParamVector:
    values = []
    layout = {}
    off = 0
    for prefix, pv in named:
        for name, (o, ln) in pv.layout.items():
            layout[f"{prefix}/{name}"] = (off + o, ln)
        values.append(pv.values)
        off += pv.values.size
    return ParamVector(np.concatenate(values), layout)


def _split_params(merged: ParamVector, prefix: str) -> ParamVector:
    names = [n for n in merged.layout if n.startswith(prefix + "/")]
    offs = [merged.layout[n] for n in names]
    base = min(o for o, _ in offs)
    size = sum(ln for _, ln in offs)
    layout = {n.split("/", 1)[1]: (o - base, ln) for n, (o, ln) in zip(names, offs)}
    return ParamVector(merged.values[base : base + size].copy(), layout)


@click.group()
def main():
    """Heterogeneous cross-domain offline RL laboratory."""


def _load_config(config_path) -> ExperimentConfig:
    if config_path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_file(config_path)


def _run_paths(run_dir: Path) -> dict:
    return {
        "source": run_dir / "source.jsonl",
        "target": run_dir / "target.jsonl",
        "domains": run_dir / "domains.json",
        "source_relabeled": run_dir / "source_relabeled.jsonl",
        "repr": run_dir / "repr.ckpt",
        "repr_history": run_dir / "repr_history.csv",
        "latents": run_dir / "latents.csv",
        "adv": run_dir / "adv.ckpt",
        "scorer": run_dir / "scorer.ckpt",
        "scores": run_dir / "scores.csv",
        "policy": run_dir / "policy.ckpt",
        "metrics": run_dir / "metrics.csv",
        "report": run_dir / "report.json",
    }


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--run", "run_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True)
def cmd_gen_data(config_path, run_dir, seed, force):
    """Write target and heterogeneous source datasets plus domain descriptors."""
    try:
        cfg = _load_config(config_path)
        if seed is not None:
            cfg = cfg.with_overrides(seed=seed)
        run_dir = Path(run_dir)
        paths = _run_paths(run_dir)
        if paths["source"].exists() and not force:
            raise ConfigError(f"{paths['source']} exists; pass --force to overwrite")
        run_dir.mkdir(parents=True, exist_ok=True)
        bundle = pipeline.stage_data(cfg)
        desc_hash = envsuite.descriptor_hash(bundle.descriptor)
        header = {"config_hash": cfg.hash, "seed": cfg.seed}
        datagen.save_dataset(paths["source"], bundle.source, desc_hash, extra_header=header)
        datagen.save_dataset(paths["target"], bundle.target, desc_hash, extra_header=header)
        paths["domains"].write_text(
            json.dumps(
                {"descriptor": bundle.descriptor, "config_hash": cfg.hash, "seed": cfg.seed},
                sort_keys=True,
                indent=1,
            )
            + "\n"
        )
        manifest = RunManifest(run_dir, config_hash=cfg.hash, seed=cfg.seed)
        manifest.record_stage(
            "data", [], [paths["source"], paths["target"], paths["domains"]]
        )
        click.echo(f"wrote {paths['source']} ({len(bundle.source)} trajectories)")
    except V2AError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_for(exc))


def _load_bundle(cfg: ExperimentConfig, run_dir: Path, relabeled: bool = False):
    paths = _run_paths(run_dir)
    src_path = paths["source_relabeled"] if relabeled else paths["source"]
    source, _ = datagen.load_dataset(src_path)
    target, _ = datagen.load_dataset(paths["target"])
    target_domain, source_domains = pipeline.build_domains(cfg)
    desc = envsuite.domain_descriptor(target_domain, source_domains)
    return pipeline.DataBundle(
        target_domain=target_domain,
        source_domains=source_domains,
        source=source,
        target=target,
        descriptor=desc,
    )


def _advantage_dims(cfg, bundle, modality_aware):
    flat = datagen.flatten(bundle.source)
    d_state = flat["s"].shape[1]
    d_action = flat["a"].shape[1]
    d_z = cfg.section("modality")["d_z"] if modality_aware else 0
    return d_state, d_action, d_z


@main.command("train")
@click.option("--stage", type=click.Choice(pipeline.STAGES), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--variant", type=click.Choice(pipeline.VARIANTS), default="v2a")
@click.option("--seed", type=int, default=None)
def cmd_train(stage, config_path, run_dir, variant, seed):
    """Run one training stage, checkpointing into the run directory."""
    try:
        cfg = _load_config(config_path)
        if seed is not None:
            cfg = cfg.with_overrides(seed=seed)
        run_dir = Path(run_dir)
        paths = _run_paths(run_dir)
        manifest = RunManifest(run_dir, config_hash=cfg.hash, seed=cfg.seed)
        _train_stage(stage, cfg, run_dir, paths, manifest, variant)
    except V2AError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_for(exc))


def _train_stage(stage, cfg, run_dir, paths, manifest, variant):
    seed = cfg.seed
    modality_aware = variant in ("v2a", "sample_v2a")
    if stage == "repr":
        if variant in ("dvdf", "igdf", "pooled"):
            raise ConfigError(f"variant {variant!r} has no representation stage")
        manifest.require_inputs("repr", [paths["source"]])
        bundle = _load_bundle(cfg, run_dir)
        encoder, decoder, history = pipeline.stage_repr(bundle, cfg, variant, seed)
        merged = _merge_params([("encoder", encoder.params), ("decoder", decoder.params)])
        save_params(paths["repr"], merged, cfg.hash, seed, {"variant": variant})
        datagen.save_dataset(
            paths["source_relabeled"],
            bundle.source,
            envsuite.descriptor_hash(bundle.descriptor),
            extra_header={"config_hash": cfg.hash, "seed": seed},
        )
        modality.export_history_csv(history, paths["repr_history"])
        _export_latents(paths["latents"], bundle.source)
        manifest.record_stage(
            "repr",
            [paths["source"]],
            [paths["repr"], paths["source_relabeled"], paths["repr_history"], paths["latents"]],
        )
    elif stage == "adv":
        if variant in ("igdf", "pooled"):
            raise ConfigError(f"variant {variant!r} has no advantage stage")
        src = paths["source_relabeled"] if modality_aware else paths["source"]
        manifest.require_inputs("adv", [src])
        bundle = _load_bundle(cfg, run_dir, relabeled=modality_aware)
        model = pipeline.stage_adv(bundle, cfg, modality_aware, seed)
        merged = _merge_params([("q", model.q_params), ("v", model.v_params)])
        save_params(
            paths["adv"], merged, cfg.hash, seed,
            {"variant": variant, "modality_aware": modality_aware,
             "z_mu": list(model.z_mu), "z_sigma": list(model.z_sigma)},
        )
        manifest.record_stage("adv", [src], [paths["adv"]])
    elif stage == "score":
        inputs = [paths["source"], paths["target"]]
        if variant not in ("igdf", "pooled"):
            inputs.append(paths["adv"])
        if variant == "pooled":
            raise ConfigError("variant 'pooled' has no scoring stage")
        manifest.require_inputs("score", inputs)
        bundle = _load_bundle(cfg, run_dir, relabeled=modality_aware)
        scorer = pipeline.stage_scorer(bundle, cfg, seed)
        save_params(paths["scorer"], scorer.params, cfg.hash, seed, {"variant": variant})
        adv_model = None
        if variant not in ("igdf",):
            adv_model = _load_advantage(cfg, bundle, paths["adv"], modality_aware)
        scores = pipeline.variant_scores(variant, scorer, adv_model, bundle, cfg)
        _export_scores(paths["scores"], scores)
        manifest.record_stage("score", inputs, [paths["scorer"], paths["scores"]])
    elif stage == "policy":
        if variant == "pooled":
            inputs = [paths["source"], paths["target"]]
        else:
            inputs = [paths["source"], paths["target"], paths["scores"]]
        manifest.require_inputs("policy", inputs)
        bundle = _load_bundle(cfg, run_dir, relabeled=False)
        scores = None if variant == "pooled" else _load_scores(paths["scores"])
        model, log = pipeline.stage_policy(bundle, cfg, scores, seed)
        merged = _merge_params(
            [("pi", model.pi_params), ("v", model.v_params), ("q", model.q_params),
             ("q_target", model.q_target_params)]
        )
        save_params(paths["policy"], merged, cfg.hash, seed, {"variant": variant})
        log.to_csv(paths["metrics"])
        report = policyopt.evaluate(
            model, bundle.target_domain, cfg.section("policy")["n_eval_episodes"], seed
        )
        paths["report"].write_text(
            json.dumps(
                {
                    "variant": variant,
                    "seed": seed,
                    "config_hash": cfg.hash,
                    "normalized_score": report.normalized_score,
                    "mean_return": report.mean_return,
                    "std_return": report.std_return,
                },
                sort_keys=True,
                indent=1,
            )
            + "\n"
        )
        manifest.record_stage(
            "policy", inputs, [paths["policy"], paths["metrics"], paths["report"]]
        )
    click.echo(f"stage {stage} done")


def _export_latents(path, dataset):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj_idx", "modality", "quality", "z"])
        for i, traj in enumerate(dataset.trajectories):
            z = traj.latent if traj.latent is not None else (
                traj.step_latents.mean(axis=0) if traj.step_latents is not None else None
            )
            if z is None:
                continue
            writer.writerow(
                [i, traj.modality_id, traj.quality, " ".join("%.17g" % v for v in z)]
            )


def _export_scores(path, scores):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "score"])
        for i, s in enumerate(scores):
            writer.writerow([i, "%.17g" % s])


def _load_scores(path) -> np.ndarray:
    with open(path) as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([float(row[1]) for row in reader])


def _load_advantage(cfg, bundle, path, modality_aware) -> AdvantageModel:
    from . import advantage as adv_mod
    from .difffn.checkpoint import load_sidecar

    d_state, d_action, d_z = _advantage_dims(cfg, bundle, modality_aware)
    a = cfg.section("advantage")
    acfg = adv_mod.AdvantageConfig(
        alpha=a["alpha"], gamma=cfg.section("policy")["gamma"], hidden=tuple(a["hidden"]),
        lr=a["lr"], batch_size=a["batch_size"], n_steps=a["n_steps"], seed=cfg.seed,
    )
    model = AdvantageModel(d_state, d_action, d_z, acfg, modality_aware=modality_aware)
    merged = load_params(path)
    model.q_params = _split_params(merged, "q")
    model.v_params = _split_params(merged, "v")
    meta = load_sidecar(path)
    if modality_aware and "z_mu" in meta:
        model.z_mu = np.asarray(meta["z_mu"])
        model.z_sigma = np.asarray(meta["z_sigma"])
    return model


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--run", "run_dir", type=click.Path(), required=True)
@click.option("--variant", type=click.Choice(pipeline.VARIANTS), multiple=True,
              default=("v2a", "dvdf"))
@click.option("--n-seeds", type=int, default=5)
@click.option("--seed", type=int, default=None)
def cmd_eval(config_path, run_dir, variant, n_seeds, seed):
    """Full per-seed pipeline evaluation; writes an aggregate report JSON."""
    try:
        cfg = _load_config(config_path)
        if seed is not None:
            cfg = cfg.with_overrides(seed=seed)
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        report = {"config_hash": cfg.hash, "base_seed": cfg.seed, "variants": {}}
        for var in variant:
            entries = []
            for s in range(n_seeds):
                run_seed = cfg.seed + s
                bundle = pipeline.stage_data(cfg, run_seed)
                entries.append(pipeline.run_variant(var, cfg, run_seed, bundle))
            scores = [e["normalized_score"] for e in entries]
            report["variants"][var] = {
                "per_seed": entries,
                "mean_normalized_score": float(np.mean(scores)),
                "std_normalized_score": float(np.std(scores)),
            }
        out = run_dir / "report.json"
        out.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
        click.echo(json.dumps(
            {v: report["variants"][v]["mean_normalized_score"] for v in report["variants"]},
            sort_keys=True,
        ))
    except V2AError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_for(exc))


@main.command("verify")
@click.option("--suite", type=click.Choice(["lemmas", "mixture_tv", "prop_bound", "misassignment"]),
              required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--run", "run_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
def cmd_verify(suite, config_path, run_dir, seed):
    """Theory-verification suites backed by exact dynamic programming."""
    try:
        cfg = _load_config(config_path)
        if seed is not None:
            cfg = cfg.with_overrides(seed=seed)
        report = run_verification(suite, cfg)
        if run_dir:
            out = Path(run_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"verify_{suite}.json").write_text(
                json.dumps(report, sort_keys=True, indent=1) + "\n"
            )
        click.echo(json.dumps({k: report[k] for k in ("suite", "passed")}, sort_keys=True))
        if not report["passed"]:
            raise VerificationError(f"suite {suite!r} failed")
    except V2AError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_for(exc))


def run_verification(suite: str, cfg: ExperimentConfig) -> dict:
    o = cfg.section("oracle")
    from .rng import generator as gen

    report = {"suite": suite, "config_hash": cfg.hash, "seed": cfg.seed}
    if suite in ("lemmas", "mixture_tv"):
        holds_c1 = holds_c2 = holds_mix = 0
        n = o["n_instances"]
        for i in range(n):
            m1 = envsuite.make_tabular_mdp(
                1000 + i, n_states=o["n_states"], n_actions=o["n_actions"], gamma=o["gamma"]
            )
            rng = gen(cfg.seed, "verify", i)
            if suite == "lemmas":
                m2 = envsuite.TabularMDP(
                    envsuite.make_tabular_mdp(
                        2000 + i, n_states=o["n_states"], n_actions=o["n_actions"],
                        gamma=o["gamma"],
                    ).transition,
                    m1.reward, m1.initial_dist, m1.gamma,
                )
                policy = rng.dirichlet(np.ones(o["n_actions"]), size=o["n_states"])
                holds_c1 += oracle.check_lemma_c1(m1, m2, policy)[2]
                holds_c2 += oracle.check_lemma_c2(m1, m2)[2]
            else:
                comps = [
                    envsuite.make_tabular_mdp(
                        3000 + 7 * i + j, n_states=o["n_states"], n_actions=o["n_actions"],
                        gamma=o["gamma"],
                    ).transition
                    for j in range(3)
                ]
                w = rng.dirichlet(np.ones(3))
                holds_mix += oracle.check_mixture_tv(comps, w, m1.transition).holds
        if suite == "lemmas":
            report.update(
                {"n": n, "holds_c1": holds_c1, "holds_c2": holds_c2,
                 "passed": holds_c1 == n and holds_c2 == n}
            )
        else:
            report.update({"n": n, "holds": holds_mix, "passed": holds_mix == n})
    elif suite == "prop_bound":
        n = min(o["n_instances"], 100)
        holds = 0
        rows = []
        for i in range(n):
            tar = envsuite.make_tabular_mdp(
                4000 + i, n_states=o["n_states"], n_actions=o["n_actions"], gamma=o["gamma"]
            )
            rng = gen(cfg.seed, "prop", i)
            sources = []
            for j in range(2):
                m = envsuite.apply_tabular_shift(
                    tar, envsuite.ShiftSpec("kinematic" if j == 0 else "morphology", "medium")
                )
                counts = np.zeros((tar.n_states, tar.n_actions), dtype=np.int64)
                sol = oracle.value_iteration(m)
                for s in range(tar.n_states):
                    counts[s, sol.pi_star[s]] += 20
                    counts[s, rng.integers(tar.n_actions)] += 5
                sources.append((m, counts))
            policy_hat = rng.dirichlet(np.ones(tar.n_actions), size=tar.n_states)
            rep = oracle.evaluate_prop_bound(tar, sources, policy_hat)
            holds += rep.holds
            rows.append(rep.to_dict())
        report.update({"n": n, "holds": holds, "holds_rate": holds / n, "rows": rows,
                       "passed": True})  # reported, never asserted
    elif suite == "misassignment":
        rows = oracle.detect_misassignment(
            oracle.misassignment_showcase(o["showcase_seed"]), tol_ma=o["tol_ma"]
        )
        report.update(
            {
                "rows": [
                    {"index": r.index, "per_modality": r.per_modality,
                     "global_expectation": r.global_expectation, "gap": r.gap,
                     "flagged": r.flagged}
                    for r in rows
                ],
                "passed": bool(
                    rows[0].flagged
                    and abs(rows[0].per_modality) < 1e-6
                    and rows[0].global_expectation < -0.01
                ),
            }
        )
    return report


@main.command("sweep")
@click.option("--param", type=click.Choice(["lambda", "xi"]), required=True)
@click.option("--values", type=str, default=None, help="comma-separated grid")
@click.option("--preset", "grid_preset", type=click.Choice(["paper-lambda", "paper-xi"]),
              default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--run", "run_dir", type=click.Path(), required=True)
@click.option("--variant", type=click.Choice(pipeline.VARIANTS), default="v2a")
@click.option("--n-seeds", type=int, default=5)
def cmd_sweep(param, values, grid_preset, config_path, run_dir, variant, n_seeds):
    """One full run per grid value per seed; writes a sweep table CSV."""
    try:
        cfg = _load_config(config_path)
        if grid_preset == "paper-lambda":
            grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
        elif grid_preset == "paper-xi":
            grid = [0.25, 0.5, 0.75, 1.0]
        elif values:
            grid = [float(v) for v in values.split(",")]
        else:
            raise ConfigError("pass --values or --preset")
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        jobs = []
        for v in grid:
            for s in range(n_seeds):
                jobs.append((param, v, cfg.seed + s))
        results = _run_sweep_jobs(cfg, variant, jobs)
        table_path = run_dir / f"sweep_{param}.csv"
        with open(table_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([param, "seed", "normalized_score", "config_hash"])
            for (p, v, s), score in zip(jobs, results):
                writer.writerow([v, s, "%.17g" % score, cfg.hash])
        click.echo(f"wrote {table_path} ({len(jobs)} rows)")
    except V2AError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_for(exc))


def _sweep_one(args) -> float:
    cfg_dict, variant, param, value, seed = args
    cfg = ExperimentConfig(cfg_dict)
    if param == "lambda":
        cfg = cfg.with_overrides(alignment={"lambda_f": value, "lambda_g": value})
    else:
        cfg = cfg.with_overrides(alignment={"xi": value})
    return pipeline.run_variant(variant, cfg, seed)["normalized_score"]


def _run_sweep_jobs(cfg, variant, jobs):
    args = [(cfg.to_dict(), variant, p, v, s) for p, v, s in jobs]
    n_workers = worker_count()
    if n_workers <= 1:
        return [_sweep_one(a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_sweep_one, args))


if __name__ == "__main__":
    main()
