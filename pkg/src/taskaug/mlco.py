"""Model-level generator optimization via utility-ranked preference pairs.

Generated batches are scored by the frozen weight network; within each class
the top and bottom slices form winner/loser pairs, and the denoiser is
fine-tuned on a diffusion preference loss against a frozen reference copy so
its output distribution drifts toward what the downstream task rewards.
"""

from __future__ import annotations

import copy
import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from taskaug.classifier import ClassifierState, per_sample_loss
from taskaug.data import LabeledDataset, derive_seed
from taskaug.diffusion import ClassToken, DenoiserState, NoiseSchedule, ddim_sample, forward_noising, token_matrix
from taskaug.errors import ConfigError
from taskaug.todv import WeightNet, predict_weights


@dataclass
class PreferencePair:
    """(condition, winner, loser) with the utility scores that ranked them."""

    condition: ClassToken
    winner: np.ndarray
    loser: np.ndarray
    winner_score: float
    loser_score: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        if self.winner_score < self.loser_score:
            raise ValueError("winner_score must be >= loser_score")


@dataclass
class DpoConfig:
    beta: float = 500.0
    lr: float = 1e-4
    batch_per_class: int = 64
    iterations: int = 3
    rho: float = 0.25
    pair_cap: int = 64
    max_steps_per_class: int = 400
    guidance: float = 2.0
    holdout_fraction: float = 0.2
    report_samples: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not (0.0 < self.rho <= 0.5):
            raise ConfigError(f"rho must lie in (0, 0.5], got {self.rho}")


def score_samples(phi: WeightNet, classifier: ClassifierState, batch: LabeledDataset) -> np.ndarray:
    """Utility of each sample: weight network applied to its classifier loss."""
    if batch.num_classes != classifier.num_classes:
        raise ValueError(f"batch has K={batch.num_classes} but classifier expects {classifier.num_classes}")
    losses = per_sample_loss(classifier, batch).detach()
    with torch.no_grad():
        return predict_weights(phi, losses).numpy()


def build_preference_pairs(data: LabeledDataset, scores: np.ndarray, rho: float,
                           cap: Optional[int], tokens: Sequence[ClassToken],
                           seed: int = 0) -> list[PreferencePair]:
    """Cross product of each class's top and bottom score slices.

    Per class the samples are sorted by score descending (stable in original
    index on ties); ceil(rho * B) go to each side, every winner is paired with
    every loser, and the pair list is uniformly subsampled to the cap. All-tied
    classes still produce index-ordered pairs but are flagged and warned about.
    """
    if not (0.0 < rho <= 0.5):
        raise ConfigError(f"rho must lie in (0, 0.5], got {rho}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(data),):
        raise ValueError("scores must align with the dataset")
    by_class = {tok.class_id: tok for tok in tokens}
    rng = np.random.default_rng(derive_seed(seed, "pair-subsample"))
    pairs: list[PreferencePair] = []
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.labels == k)
        if len(idx) == 0:
            continue
        if k not in by_class:
            raise ConfigError(f"no token for class {k}")
        n_sel = math.ceil(rho * len(idx))
        if 2 * n_sel > len(idx):
            raise ConfigError(
                f"class {k}: {len(idx)} samples cannot supply disjoint winner/loser sets at rho={rho}")
        cls_scores = scores[idx]
        order = np.argsort(-cls_scores, kind="stable")
        winners = idx[order[:n_sel]]
        losers = idx[order[-n_sel:]]
        tied = bool(np.all(cls_scores == cls_scores[0]))
        if tied:
            warnings.warn(f"class {k}: all {len(idx)} utility scores identical; "
                          "pairs fall back to index order", RuntimeWarning)
        cls_pairs = [
            PreferencePair(by_class[k], data.features[w].copy(), data.features[l].copy(),
                           float(scores[w]), float(scores[l]),
                           degenerate=bool(scores[w] == scores[l]))
            for w in winners for l in losers
        ]
        if cap is not None and len(cls_pairs) > cap:
            keep = rng.choice(len(cls_pairs), size=cap, replace=False)
            cls_pairs = [cls_pairs[i] for i in sorted(keep)]
        pairs.extend(cls_pairs)
    return pairs


def dpo_loss(pair: PreferencePair, t: int, eps_w: torch.Tensor, eps_l: torch.Tensor,
             state: DenoiserState, sched: NoiseSchedule, beta: float,
             snr_weight_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
             snr_fn: Optional[Callable[[NoiseSchedule, int], torch.Tensor]] = None) -> torch.Tensor:
    """Preference loss for one pair at one shared timestep.

    -log sigma(-beta * T * w(snr_t) * (dL_w - dL_l)) where dL compares the
    trainable and reference reconstruction errors of the same noised sample.
    The weighting over the signal-to-noise ratio defaults to the constant 1.
    Differentiable with respect to the trainable parameters only; equals ln 2
    whenever trainable and reference coincide.
    """
    snr = snr_fn(sched, t) if snr_fn is not None else sched.snr(t)
    w_t = snr_weight_fn(torch.as_tensor(snr)) if snr_weight_fn is not None else torch.tensor(1.0, dtype=torch.float64)
    cond = pair.condition.embedding

    def delta(x0: np.ndarray, eps: torch.Tensor) -> torch.Tensor:
        x = torch.tensor(x0, dtype=torch.float64)[None, :]
        x_t = forward_noising(x, t, eps[None, :], sched)
        err_model = ((eps[None, :] - state.model(x_t, t, cond)) ** 2).sum()
        with torch.no_grad():
            err_ref = ((eps[None, :] - state.reference(x_t, t, cond)) ** 2).sum()
        return err_model - err_ref

    margin = delta(pair.winner, eps_w) - delta(pair.loser, eps_l)
    return -F.logsigmoid(-beta * sched.T * w_t * margin)


@dataclass
class MlcoReport:
    all_pairs: list[PreferencePair] = field(default_factory=list)
    holdout_pairs: list[PreferencePair] = field(default_factory=list)
    holdout_margin_fraction: float = float("nan")
    pre_mean_utility: float = float("nan")
    post_mean_utility: float = float("nan")
    iteration_stats: list[dict] = field(default_factory=list)
    steps_per_class: dict[int, int] = field(default_factory=dict)


def _generate_batch(state: DenoiserState, tokens: Sequence[ClassToken], per_class: int,
                    feature_dim: int, num_classes: int, guidance: float, sched: NoiseSchedule,
                    gen: torch.Generator) -> LabeledDataset:
    feats, labels = [], []
    tok = token_matrix(tokens, num_classes)
    with torch.no_grad():
        for k in range(num_classes):
            eps = torch.randn(per_class, feature_dim, generator=gen, dtype=torch.float64)
            x = ddim_sample(eps, tok[k], guidance, sched, state)
            feats.append(x.numpy())
            labels.append(np.full(per_class, k, dtype=np.int64))
    return LabeledDataset(np.concatenate(feats), np.concatenate(labels),
                          num_classes, "synthetic")


def implicit_reward_margins(pairs: Sequence[PreferencePair], state: DenoiserState,
                            baseline: DenoiserState, sched: NoiseSchedule,
                            draws: int = 8, seed: int = 0) -> np.ndarray:
    """Margin -(dL_w - dL_l) per pair, averaged over shared (t, noise) draws.

    dL compares the tuned trainable model against the pre-tuning baseline, so
    a positive margin means tuning moved reconstruction quality toward the
    winner relative to the loser.
    """
    g = torch.Generator().manual_seed(derive_seed(seed, "margin-eval"))
    margins = np.zeros(len(pairs))
    with torch.no_grad():
        for i, pair in enumerate(pairs):
            total = 0.0
            for _ in range(draws):
                t = int(torch.randint(1, sched.T + 1, (1,), generator=g))
                eps_w = torch.randn(len(pair.winner), generator=g, dtype=torch.float64)
                eps_l = torch.randn(len(pair.loser), generator=g, dtype=torch.float64)
                cond = pair.condition.embedding

                def delta(x0, eps):
                    x = torch.tensor(x0, dtype=torch.float64)[None, :]
                    x_t = forward_noising(x, t, eps[None, :], sched)
                    err_model = ((eps[None, :] - state.model(x_t, t, cond)) ** 2).sum()
                    err_base = ((eps[None, :] - baseline.model(x_t, t, cond)) ** 2).sum()
                    return float(err_model - err_base)

                total += -(delta(pair.winner, eps_w) - delta(pair.loser, eps_l))
            margins[i] = total / draws
    return margins


def run_mlco(state: DenoiserState, tokens: Sequence[ClassToken], phi: WeightNet,
             classifier: ClassifierState, config: DpoConfig,
             sched: NoiseSchedule) -> tuple[DenoiserState, MlcoReport]:
    """Iterative preference fine-tuning of the denoiser.

    Each outer iteration re-snapshots the reference copy, generates a scored
    batch per class, builds capped preference pairs, and takes one optimizer
    step per training pair. A held-out slice of pairs is kept for the implicit
    reward evaluation, and fresh generations before/after quantify the utility
    shift. The input state is not mutated.
    """
    feature_dim = state.model.feature_dim
    num_classes = classifier.num_classes
    work = state.clone()
    baseline = state.clone()
    report = MlcoReport(steps_per_class={k: 0 for k in range(num_classes)})

    gen_pre = torch.Generator().manual_seed(derive_seed(config.seed, "mlco-report-gen"))
    per_class_report = max(1, config.report_samples // num_classes)
    pre_batch = _generate_batch(baseline, tokens, per_class_report, feature_dim, num_classes,
                                config.guidance, sched, gen_pre)
    report.pre_mean_utility = float(np.mean(score_samples(phi, classifier, pre_batch)))

    opt = torch.optim.Adam(work.model.parameters(), lr=config.lr)
    g = torch.Generator().manual_seed(derive_seed(config.seed, "mlco-train"))
    holdout_rng = np.random.default_rng(derive_seed(config.seed, "mlco-holdout"))

    for it in range(config.iterations):
        work.snapshot_reference()
        batch = _generate_batch(work, tokens, config.batch_per_class, feature_dim,
                                num_classes, config.guidance, sched, g)
        scores = score_samples(phi, classifier, batch)
        tied = all(
            np.all(scores[batch.labels == k] == scores[batch.labels == k][0])
            for k in range(num_classes) if np.any(batch.labels == k)
        )
        if tied:
            raise RuntimeError(
                "every class produced identical utility scores; preference tuning "
                "would train on noise. Check that the weight network is trained.")
        pairs = build_preference_pairs(batch, scores, config.rho, config.pair_cap,
                                       tokens, seed=derive_seed(config.seed, f"pairs-{it}"))
        report.all_pairs.extend(pairs)
        n_hold = int(config.holdout_fraction * len(pairs))
        hold_idx = set(holdout_rng.choice(len(pairs), size=n_hold, replace=False).tolist()) \
            if n_hold else set()
        train_pairs = [p for i, p in enumerate(pairs) if i not in hold_idx]
        report.holdout_pairs.extend(pairs[i] for i in sorted(hold_idx))

        order = torch.randperm(len(train_pairs), generator=g).tolist()
        losses = []
        for i in order:
            pair = train_pairs[i]
            k = pair.condition.class_id
            if report.steps_per_class[k] >= config.max_steps_per_class:
                continue
            t = int(torch.randint(1, sched.T + 1, (1,), generator=g))
            eps_w = torch.randn(feature_dim, generator=g, dtype=torch.float64)
            eps_l = torch.randn(feature_dim, generator=g, dtype=torch.float64)
            loss = dpo_loss(pair, t, eps_w, eps_l, work, sched, config.beta)
            opt.zero_grad()
            loss.backward()
            opt.step()
            report.steps_per_class[k] += 1
            losses.append(float(loss))
        report.iteration_stats.append({
            "iteration": it + 1,
            "pairs": len(pairs),
            "train_pairs": len(train_pairs),
            "mean_dpo_loss": float(np.mean(losses)) if losses else float("nan"),
            "mean_utility": float(scores.mean()),
        })

    gen_post = torch.Generator().manual_seed(derive_seed(config.seed, "mlco-report-gen"))
    post_batch = _generate_batch(work, tokens, per_class_report, feature_dim, num_classes,
                                 config.guidance, sched, gen_post)
    report.post_mean_utility = float(np.mean(score_samples(phi, classifier, post_batch)))
    if report.holdout_pairs:
        margins = implicit_reward_margins(report.holdout_pairs, work, baseline, sched,
                                          seed=config.seed)
        report.holdout_margin_fraction = float(np.mean(margins > 0))
    return work, report


def save_preferences(path: str | Path, pairs: Sequence[PreferencePair]) -> None:
    """Audit record: class, both scores, then winner and loser feature vectors."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if pairs:
            d = len(pairs[0].winner)
            writer.writerow(["class", "winner_score", "loser_score"]
                            + [f"w{i}" for i in range(d)] + [f"l{i}" for i in range(d)])
        for p in pairs:
            writer.writerow([p.condition.class_id, repr(p.winner_score), repr(p.loser_score)]
                            + [repr(float(v)) for v in p.winner]
                            + [repr(float(v)) for v in p.loser])
