"""End-to-end orchestration and the experiment harness.

The pipeline runs warmup generation, weight-network meta-training, generator
preference tuning, instance-level generation, downstream training, and
analysis, persisting every stage's artifacts under one run directory keyed
by the resolved config hash. Each stage reads its inputs from the run
directory, so stages can also be driven one at a time from the CLI.
"""

from __future__ import annotations

import csv
import shutil
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from taskaug import analysis as an
from taskaug import classifier as clf
from taskaug import diffusion as dg
from taskaug import ilpo as il
from taskaug import mlco as ml
from taskaug import todv as tv
from taskaug.config import config_hash, format_config, task_spec_from_config
from taskaug.data import (
    LabeledDataset,
    SplitBundle,
    concat_datasets,
    derive_seed,
    load_dataset,
    make_synthetic_task,
    mode_membership_fractions,
    save_dataset,
)
from taskaug.errors import ConfigError


@dataclass
class RunDir:
    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        for sub in ("checkpoints", "datasets", "metrics", "plots", "report"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / name

    def dataset(self, name: str) -> Path:
        return self.root / "datasets" / name

    def metric(self, name: str) -> Path:
        return self.root / "metrics" / name

    def plot(self, name: str) -> Path:
        return self.root / "plots" / name


def write_metrics(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    """Delimited metric records; floats via repr so re-runs are byte-comparable."""
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in (row[k] for k in keys)])


def read_metrics(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def budget_tag(budget: float) -> str:
    return f"{budget:g}x"


def _per_class_counts(total: int, num_classes: int) -> dict[int, int]:
    base, extra = divmod(total, num_classes)
    return {k: base + (1 if k < extra else 0) for k in range(num_classes)}


def init_run(cfg: dict[str, Any], out: str | Path) -> RunDir:
    run = RunDir(Path(out))
    (run.root / "resolved.txt").write_text(format_config(cfg), encoding="utf-8")
    (run.root / "config_hash.txt").write_text(config_hash(cfg) + "\n", encoding="utf-8")
    return run


def stage_task(cfg: dict[str, Any], run: RunDir) -> SplitBundle:
    """Materialize the task splits and the per-class few-shot subset."""
    spec = task_spec_from_config(cfg)
    bundle = make_synthetic_task(spec, (cfg["sizes.train"], cfg["sizes.val"], cfg["sizes.test"]),
                                 seed=cfg["seed"])
    save_dataset(bundle.real_train, run.dataset("real_train.csv"))
    save_dataset(bundle.validation, run.dataset("validation.csv"))
    save_dataset(bundle.test, run.dataset("test.csv"))
    np.savetxt(run.dataset("train_flipped.csv"), bundle.train_flipped, fmt="%d")

    rng = np.random.default_rng(derive_seed(cfg["seed"], "fewshot"))
    idx: list[int] = []
    for k in range(spec.num_classes):
        cls_idx = np.flatnonzero(bundle.real_train.labels == k)
        take = min(cfg["tokens.few_shot"], len(cls_idx))
        idx.extend(rng.choice(cls_idx, size=take, replace=False))
    few_shot = bundle.real_train.subset(np.array(sorted(idx)))
    save_dataset(few_shot, run.dataset("few_shot.csv"))
    return bundle


def _load_bundle(run: RunDir) -> SplitBundle:
    for name in ("real_train.csv", "validation.csv", "test.csv"):
        if not run.dataset(name).exists():
            raise ConfigError(f"missing {run.dataset(name)}; run the make-task stage first")
    flip_path = run.dataset("train_flipped.csv")
    flipped = np.zeros(0, dtype=np.int64)
    if flip_path.exists() and flip_path.stat().st_size > 0:
        flipped = np.loadtxt(flip_path, dtype=np.int64, ndmin=1)
    return SplitBundle(
        real_train=load_dataset(run.dataset("real_train.csv")).with_provenance("real"),
        validation=load_dataset(run.dataset("validation.csv")),
        test=load_dataset(run.dataset("test.csv")),
        train_flipped=flipped,
    )


def stage_generator(cfg: dict[str, Any], run: RunDir) -> None:
    """Train the base denoiser, then learn refined class tokens on the few-shot set."""
    bundle = _load_bundle(run)
    few_shot = load_dataset(run.dataset("few_shot.csv"))
    sched = dg.NoiseSchedule(cfg["generator.timesteps"], cfg["generator.beta_start"],
                             cfg["generator.beta_end"], cfg["generator.base_steps"])
    init_tokens = dg.init_class_tokens(bundle.real_train, cfg["generator.cond_dim"], cfg["seed"])
    train_cfg = dg.DenoiserTrainConfig(
        steps=cfg["generator.train_steps"], batch_size=cfg["generator.batch_size"],
        lr=cfg["generator.lr"], cond_dropout=cfg["generator.cond_dropout"],
        hidden=cfg["generator.hidden"], time_dim=cfg["generator.time_dim"],
        cond_dim=cfg["generator.cond_dim"], seed=derive_seed(cfg["seed"], "generator"),
    )
    state, report = dg.train_denoiser(bundle.real_train, init_tokens, sched, train_cfg)

    token_cfg = dg.TokenLearnConfig(lr=cfg["tokens.lr"], steps=cfg["tokens.steps"],
                                    seed=derive_seed(cfg["seed"], "tokens"))
    tokens = []
    for k in range(bundle.real_train.num_classes):
        shot_k = few_shot.restrict_to_class(k)
        tokens.append(dg.learn_class_token(k, shot_k, state, sched, token_cfg,
                                           init=init_tokens[k].embedding))
    dg.save_generator(run.checkpoint("generator_base.pt"), state, sched, tokens,
                      config_hash(cfg))
    write_metrics(run.metric("generator.csv"),
                  [{"step": i + 1, "loss": loss} for i, loss in enumerate(report.losses)])


def _plain_generate(state: dg.DenoiserState, tokens: Sequence[dg.ClassToken],
                    counts: dict[int, int], omega: float, sched: dg.NoiseSchedule,
                    seed: int, label: str) -> LabeledDataset:
    """Reference sampler: base tokens, raw noise, no per-instance optimization."""
    if not counts or all(n <= 0 for n in counts.values()):
        dims = state.model.feature_dim
        return LabeledDataset.empty(len(tokens), dims, "synthetic")
    tok = dg.token_matrix(tokens, len(tokens))
    feats, labels = [], []
    with torch.no_grad():
        for k in sorted(counts):
            n = counts[k]
            if n <= 0:
                continue
            g = torch.Generator().manual_seed(derive_seed(seed, f"{label}-{k}"))
            eps = torch.randn(n, state.model.feature_dim, generator=g, dtype=torch.float64)
            x = dg.ddim_sample(eps, tok[k], omega, sched, state)
            feats.append(x.numpy())
            labels.append(np.full(n, k, dtype=np.int64))
    return LabeledDataset(np.concatenate(feats), np.concatenate(labels), len(tokens), "synthetic")


def stage_warmup(cfg: dict[str, Any], run: RunDir) -> None:
    """Synthesize the distribution-shift buffer used during meta-training."""
    bundle = _load_bundle(run)
    state, sched, tokens, _ = dg.load_generator(run.checkpoint("generator_base.pt"))
    total = int(round(cfg["todv.warmup_multiplier"] * len(bundle.real_train)))
    counts = _per_class_counts(total, bundle.real_train.num_classes)
    warmup = _plain_generate(state, tokens, counts, cfg["generator.synthesis_guidance"],
                             sched, cfg["seed"], "warmup")
    save_dataset(warmup, run.dataset("warmup.csv"))


def stage_todv(cfg: dict[str, Any], run: RunDir) -> None:
    bundle = _load_bundle(run)
    warmup = load_dataset(run.dataset("warmup.csv"))
    todv_cfg = tv.TodvConfig(
        max_iters=cfg["todv.max_iters"], classifier_lr=cfg["todv.classifier_lr"],
        weightnet_lr=cfg["todv.weightnet_lr"], train_batch=cfg["todv.train_batch"],
        val_batch=cfg["todv.val_batch"], hidden=cfg["todv.hidden"],
        arch=cfg["classifier.arch"], eval_every=cfg["todv.eval_every"],
        seed=derive_seed(cfg["seed"], "todv"),
    )
    result = tv.run_todv(bundle, warmup, todv_cfg)
    tv.save_weight_net(run.checkpoint("weight_net.pt"), result.weight_net, config_hash(cfg))
    clf.save_classifier(run.checkpoint("scorer_classifier.pt"), result.classifier,
                        config_hash(cfg))
    write_metrics(run.metric("todv.csv"), result.history)


def stage_mlco(cfg: dict[str, Any], run: RunDir) -> None:
    """Preference-tune the generator; with the stage disabled, pass the base through."""
    state, sched, tokens, _ = dg.load_generator(run.checkpoint("generator_base.pt"))
    if not cfg["mlco.enabled"]:
        shutil.copyfile(run.checkpoint("generator_base.pt"), run.checkpoint("generator_mlco.pt"))
        write_metrics(run.metric("mlco.csv"), [])
        return
    phi = tv.load_weight_net(run.checkpoint("weight_net.pt"))
    scorer = clf.load_classifier(run.checkpoint("scorer_classifier.pt"))
    dpo_cfg = ml.DpoConfig(
        beta=cfg["mlco.beta"], lr=cfg["mlco.lr"], batch_per_class=cfg["mlco.batch_per_class"],
        iterations=cfg["mlco.iterations"], rho=cfg["mlco.rho"], pair_cap=cfg["mlco.pair_cap"],
        max_steps_per_class=cfg["mlco.max_steps_per_class"], guidance=cfg["mlco.guidance"],
        holdout_fraction=cfg["mlco.holdout_fraction"], seed=derive_seed(cfg["seed"], "mlco"),
    )
    tuned, report = ml.run_mlco(state, tokens, phi, scorer, dpo_cfg, sched)
    dg.save_generator(run.checkpoint("generator_mlco.pt"), tuned, sched, tokens, config_hash(cfg))
    ml.save_preferences(run.dataset("preferences.csv"), report.all_pairs)
    rows = list(report.iteration_stats)
    rows.append({"iteration": "final", "pairs": len(report.all_pairs),
                 "train_pairs": "", "mean_dpo_loss": "",
                 "mean_utility": report.post_mean_utility})
    write_metrics(run.metric("mlco.csv"), rows)
    write_metrics(run.metric("mlco_summary.csv"), [{
        "pre_mean_utility": report.pre_mean_utility,
        "post_mean_utility": report.post_mean_utility,
        "holdout_margin_fraction": report.holdout_margin_fraction,
        "holdout_pairs": len(report.holdout_pairs),
    }])


def _ilpo_config(cfg: dict[str, Any], budget: float) -> il.IlpoConfig:
    return il.IlpoConfig(
        prompt_lr=cfg["ilpo.prompt_lr"], prompt_epochs=cfg["ilpo.prompt_epochs"],
        omega_denoise=cfg["ilpo.omega_denoise"], omega_invert=cfg["ilpo.omega_invert"],
        chain_length=cfg["ilpo.chain_length"], noise_draws=cfg["ilpo.noise_draws"],
        reg_strength=cfg["ilpo.lambda"], synthesis_guidance=cfg["generator.synthesis_guidance"],
        round_trips=cfg["ilpo.round_trips"],
        seed=derive_seed(cfg["seed"], f"ilpo-{budget_tag(budget)}"),
    )


def stage_generate(cfg: dict[str, Any], run: RunDir) -> None:
    """Per budget: the tuned high-utility dataset plus a matched base-generator one."""
    bundle = _load_bundle(run)
    few_shot = load_dataset(run.dataset("few_shot.csv"))
    base_state, sched, tokens, _ = dg.load_generator(run.checkpoint("generator_base.pt"))
    tuned_state, _, _, _ = dg.load_generator(run.checkpoint("generator_mlco.pt"))
    phi = tv.load_weight_net(run.checkpoint("weight_net.pt"))
    scorer = clf.load_classifier(run.checkpoint("scorer_classifier.pt"))
    omega = cfg["generator.synthesis_guidance"]
    do_prompt = cfg["ilpo.enabled"] and cfg["ilpo.prompt_opt"]
    do_noise = cfg["ilpo.enabled"] and cfg["ilpo.noise_opt"]

    objective_rows = []
    for budget in cfg["pipeline.budgets"]:
        tag = budget_tag(budget)
        total = int(round(budget * len(bundle.real_train)))
        counts = _per_class_counts(total, bundle.real_train.num_classes)
        base_data = _plain_generate(base_state, tokens, counts, omega, sched,
                                    cfg["seed"], f"basegen-{tag}")
        save_dataset(base_data, run.dataset(f"synthetic_base_{tag}.csv"))

        if not (do_prompt or do_noise):
            # all instance-level optimization off: the pipeline output IS the
            # tuned-model plain sampler (identical to base when MLCO is off too)
            tuned_data = _plain_generate(tuned_state, tokens, counts, omega, sched,
                                         cfg["seed"], f"basegen-{tag}")
            save_dataset(tuned_data, run.dataset(f"synthetic_ilpo_{tag}.csv"))
            continue
        result = il.generate_high_utility(tokens, counts, tuned_state, phi, scorer, sched,
                                          _ilpo_config(cfg, budget), few_shot,
                                          prompt_opt=do_prompt, noise_opt=do_noise)
        save_dataset(result.dataset, run.dataset(f"synthetic_ilpo_{tag}.csv"))
        torch.save({"format_version": 1, "config_hash": config_hash(cfg),
                    "prompts": {k: p.embedding for k, p in result.prompts.items()},
                    "prototypes": {k: p.prototype for k, p in result.prompts.items()}},
                   run.checkpoint(f"prompts_{tag}.pt"))
        for k, traj in result.trajectories.items():
            objective_rows.extend(
                {"budget": tag, "class": k, "epoch": i + 1, "objective": v}
                for i, v in enumerate(traj))
    write_metrics(run.metric("ilpo_objective.csv"), objective_rows)


def _train_and_score(data: LabeledDataset, test: LabeledDataset, cfg: dict[str, Any],
                     arch: str, seed_label: str) -> float:
    state = clf.init_classifier(data.feature_dim, data.num_classes, arch,
                                seed=derive_seed(cfg["seed"], seed_label))
    train_cfg = clf.ClassifierTrainConfig(
        epochs=cfg["classifier.epochs"], batch_size=cfg["classifier.batch_size"],
        lr=cfg["classifier.lr"], momentum=cfg["classifier.momentum"],
        weight_decay=cfg["classifier.weight_decay"],
        seed=derive_seed(cfg["seed"], seed_label),
    )
    trained, _ = clf.train_classifier(state, data, train_cfg)
    return clf.evaluate(trained, test)


def stage_train_eval(cfg: dict[str, Any], run: RunDir) -> None:
    """Downstream accuracy for every budget, source, and training regime."""
    bundle = _load_bundle(run)
    arch = cfg["classifier.arch"]
    rows = [{"budget": "-", "source": "real_only", "regime": "real_only",
             "n_train": len(bundle.real_train),
             "accuracy": _train_and_score(bundle.real_train, bundle.test, cfg, arch,
                                          "final-real_only")}]
    for budget in cfg["pipeline.budgets"]:
        tag = budget_tag(budget)
        for source in ("base", "ilpo"):
            synth = load_dataset(run.dataset(f"synthetic_{source}_{tag}.csv"))
            for regime in ("joint", "synthetic_only"):
                if regime == "synthetic_only" and len(synth) == 0:
                    warnings.warn(f"budget {tag}: no synthetic data; skipping synthetic_only")
                    continue
                data = synth if regime == "synthetic_only" \
                    else concat_datasets([bundle.real_train, synth], "real")
                acc = _train_and_score(data, bundle.test, cfg, arch,
                                       f"final-{source}-{regime}-{tag}")
                rows.append({"budget": tag, "source": source, "regime": regime,
                             "n_train": len(data), "accuracy": acc})
    write_metrics(run.metric("accuracy.csv"), rows)


def stage_analyze(cfg: dict[str, Any], run: RunDir) -> None:
    """Weight distributions, influence fractions, diversity, mode membership."""
    bundle = _load_bundle(run)
    spec = task_spec_from_config(cfg)
    phi = tv.load_weight_net(run.checkpoint("weight_net.pt"))
    scorer = clf.load_classifier(run.checkpoint("scorer_classifier.pt"))
    tag = budget_tag(cfg["pipeline.budgets"][0])
    named = [("real_train", bundle.real_train),
             ("warmup", load_dataset(run.dataset("warmup.csv"))),
             ("synthetic_base", load_dataset(run.dataset(f"synthetic_base_{tag}.csv"))),
             ("synthetic_ilpo", load_dataset(run.dataset(f"synthetic_ilpo_{tag}.csv")))]
    named = [(n, d) for n, d in named if len(d) > 0]

    dists = an.weight_histogram(phi, scorer, [d for _, d in named], bins=cfg["analysis.bins"])
    write_metrics(run.metric("weight_stats.csv"), [
        {"dataset": name, "mean": d.mean, "std": d.std, "median": d.median, "size": d.size}
        for (name, _), d in zip(named, dists)])
    hist_rows = []
    for (name, _), d in zip(named, dists):
        hist_rows.extend({"dataset": name, "bin_lo": float(d.edges[i]),
                          "bin_hi": float(d.edges[i + 1]), "count": int(c)}
                         for i, c in enumerate(d.counts))
    write_metrics(run.metric("weight_hist.csv"), hist_rows)

    feature_map = lambda ds: clf.features_dataset(scorer, ds)  # noqa: E731
    rng = np.random.default_rng(derive_seed(cfg["seed"], "analysis"))
    test_cap = min(cfg["analysis.influence_test_cap"], len(bundle.test))
    test_sub = bundle.test.subset(np.sort(rng.choice(len(bundle.test), test_cap, replace=False)))
    influence_rows, infl_hist_rows = [], []
    for name, data in named:
        if name == "real_train":
            continue
        merged = concat_datasets([bundle.real_train, data], "real")
        cap = min(cfg["analysis.influence_train_cap"], len(merged))
        keep = np.sort(rng.choice(len(merged), cap, replace=False))
        # always keep the synthetic block visible in the capped subset
        synth_idx = np.arange(len(bundle.real_train), len(merged))
        keep = np.unique(np.concatenate([keep[:max(cap - len(synth_idx), 0)], synth_idx]))
        sub = merged.subset(keep)
        report = an.influence_scores(sub, test_sub, feature_map=feature_map,
                                     l2=cfg["analysis.probe_l2"], bins=cfg["analysis.bins"])
        synth_mask = keep >= len(bundle.real_train)
        frac = float(np.mean(report.scores[synth_mask] > 0)) if synth_mask.any() else float("nan")
        influence_rows.append({"dataset": name, "positive_fraction": frac,
                               "mean_score": float(report.scores[synth_mask].mean()),
                               "n_scored": int(synth_mask.sum())})
        counts, edges = np.histogram(report.scores[synth_mask], bins=cfg["analysis.bins"])
        infl_hist_rows.extend({"dataset": name, "bin_lo": float(edges[i]),
                               "bin_hi": float(edges[i + 1]), "count": int(c)}
                              for i, c in enumerate(counts))
    write_metrics(run.metric("influence.csv"), influence_rows)
    write_metrics(run.metric("influence_hist.csv"), infl_hist_rows)

    diversity_rows = []
    for name, data in named:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            per_class, mean = an.intra_class_diversity(data, scorer)
        diversity_rows.append({"dataset": name, "mean_diversity": mean,
                               **{f"class_{k}": v for k, v in per_class.items()}})
    write_metrics(run.metric("diversity.csv"), diversity_rows)

    mode_rows = []
    for name, data in named:
        fracs = mode_membership_fractions(data, spec)
        mode_rows.append({"dataset": name,
                          "mode0_mass": float(fracs[:, 0].mean()),
                          "mode1_mass": float(fracs[:, 1].mean()),
                          **{f"class{k}_mode0": float(fracs[k, 0])
                             for k in range(spec.num_classes)}})
    write_metrics(run.metric("mode_membership.csv"), mode_rows)


PIPELINE_STAGES = ("make-task", "generator", "warmup", "todv", "mlco", "generate",
                   "train-eval", "analyze", "report")


def run_pipeline(cfg: dict[str, Any], out: str | Path) -> RunDir:
    """Execute every stage in order under a fresh or existing run directory."""
    run = init_run(cfg, out)
    stage_task(cfg, run)
    stage_generator(cfg, run)
    stage_warmup(cfg, run)
    stage_todv(cfg, run)
    stage_mlco(cfg, run)
    stage_generate(cfg, run)
    stage_train_eval(cfg, run)
    stage_analyze(cfg, run)
    emit_report(run)
    return run


def scaling_experiment(cfg: dict[str, Any], budgets: Sequence[float],
                       out: str | Path) -> list[dict[str, str]]:
    """Accuracy-versus-budget table over both training regimes."""
    cfg = dict(cfg)
    cfg["pipeline.budgets"] = list(budgets)
    run = run_pipeline(cfg, out)
    rows = read_metrics(run.metric("accuracy.csv"))
    table = [r for r in rows if r["source"] == "ilpo"]
    write_metrics(run.metric("scaling.csv"), table)
    return table


def reusability_experiment(cfg: dict[str, Any], out: str | Path) -> list[dict[str, Any]]:
    """Train both architectures on data produced with architecture A in the loop."""
    arch_a, arch_b = cfg["classifier.arch"], cfg["reuse.arch_b"]
    if arch_a == arch_b:
        warnings.warn(f"reusability comparison is degenerate: both architectures are {arch_a}")
    run = RunDir(Path(out))
    bundle = _load_bundle(run)
    tag = budget_tag(cfg["pipeline.budgets"][0])
    rows = []
    for arch in (arch_a, arch_b):
        for source in ("base", "ilpo"):
            synth = load_dataset(run.dataset(f"synthetic_{source}_{tag}.csv"))
            acc = _train_and_score(synth, bundle.test, cfg, arch, f"reuse-{arch}-{source}")
            rows.append({"weight_net_arch": arch_a, "downstream_arch": arch,
                         "source": source, "accuracy": acc})
    write_metrics(run.metric("reusability.csv"), rows)
    return rows


REQUIRED_FOR_REPORT = ("metrics/accuracy.csv", "metrics/weight_stats.csv",
                       "metrics/weight_hist.csv", "metrics/influence.csv",
                       "metrics/diversity.csv", "metrics/mode_membership.csv")


def emit_report(run: RunDir) -> Path:
    """Render metric tables and plots; idempotent for a fixed run directory."""
    missing = [rel for rel in REQUIRED_FOR_REPORT if not (run.root / rel).exists()]
    if missing:
        raise ConfigError("cannot build report; missing artifacts: " + ", ".join(missing))
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def render_hist(metric_name: str, plot_name: str, title: str, xlabel: str) -> str:
        rows = read_metrics(run.metric(metric_name))
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in sorted({r["dataset"] for r in rows}):
            rs = [r for r in rows if r["dataset"] == name]
            centers = [(float(r["bin_lo"]) + float(r["bin_hi"])) / 2 for r in rs]
            counts = [int(r["count"]) for r in rs]
            total = max(sum(counts), 1)
            ax.plot(centers, [c / total for c in counts], marker="o", markersize=3, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("fraction")
        ax.set_title(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(run.plot(plot_name), dpi=120, metadata={"Software": None})
        plt.close(fig)
        return plot_name

    plots = [render_hist("weight_hist.csv", "weight_hist.png",
                         "Utility-weight distributions", "utility weight"),
             render_hist("influence_hist.csv", "influence_hist.png",
                         "Influence of synthetic samples", "influence score")]

    acc_rows = read_metrics(run.metric("accuracy.csv"))
    budgets = sorted({r["budget"] for r in acc_rows if r["budget"] != "-"},
                     key=lambda t: float(t[:-1]))
    if len(budgets) > 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        for source in ("base", "ilpo"):
            for regime in ("joint", "synthetic_only"):
                accs = [float(r["accuracy"]) for b in budgets for r in acc_rows
                        if r["budget"] == b and r["source"] == source and r["regime"] == regime]
                if accs:
                    ax.plot([float(b[:-1]) for b in budgets], accs, marker="o",
                            label=f"{source}/{regime}")
        ax.set_xlabel("synthesis budget (x real size)")
        ax.set_ylabel("test accuracy")
        ax.set_title("Scaling with synthetic data budget")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(run.plot("scaling.png"), dpi=120, metadata={"Software": None})
        plt.close(fig)
        plots.append("scaling.png")

    def table(metric_name: str) -> str:
        rows = read_metrics(run.metric(metric_name))
        if not rows:
            return "(empty)\n"
        keys = list(rows[0].keys())
        out = ["| " + " | ".join(keys) + " |",
               "|" + "|".join("---" for _ in keys) + "|"]
        out.extend("| " + " | ".join(str(r[k]) for k in keys) + " |" for r in rows)
        return "\n".join(out) + "\n"

    doc = ["# Run report", "",
           f"Config hash: `{(run.root / 'config_hash.txt').read_text().strip()}`", "",
           "## Downstream accuracy", "", table("accuracy.csv"),
           "## Utility-weight distributions", "", table("weight_stats.csv"),
           "## Influence of synthetic data", "", table("influence.csv"),
           "## Intra-class diversity", "", table("diversity.csv"),
           "## Subpopulation membership", "", table("mode_membership.csv"), ""]
    if run.metric("reusability.csv").exists():
        doc += ["## Cross-architecture reuse", "", table("reusability.csv")]
    doc += ["## Plots", ""]
    doc += [f"![{p}](../plots/{p})" for p in plots]
    report_path = run.root / "report" / "report.md"
    report_path.write_text("\n".join(doc) + "\n", encoding="utf-8")
    return report_path
