"""Task-oriented data valuation: a loss-conditioned weight network.

The weight network maps a sample's classifier loss to a utility weight in
(0, 1). It is meta-trained in a bi-level loop: weights modulate the
classifier's training loss (inner), and the weight network is updated by
differentiating the validation loss through a one-step virtual classifier
update (outer). The trained network scores new samples without retraining.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from taskaug.classifier import ClassifierState, _as_tensors, evaluate, init_classifier
from taskaug.data import LabeledDataset, SplitBundle, concat_datasets, derive_seed
from taskaug.errors import ConfigError

CHECKPOINT_FORMAT_VERSION = 1


class WeightNet(nn.Module):
    """sigma(W2 . relu(W1 * loss + b1) + b2): scalar loss -> weight in (0, 1)."""

    def __init__(self, hidden: int = 100):
        super().__init__()
        self.hidden = hidden
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.to(torch.float64)

    def forward(self, losses: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc1(losses[:, None]))
        return torch.sigmoid(self.fc2(h))[:, 0]


def init_weight_net(hidden: int = 100, seed: int = 0) -> WeightNet:
    net = WeightNet(hidden)
    g = torch.Generator().manual_seed(derive_seed(seed, "weightnet-init"))
    with torch.no_grad():
        for p in net.parameters():
            bound = 1.0 / np.sqrt(max(p.shape[-1] if p.ndim > 1 else net.hidden, 1))
            p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
    return net


def zero_weight_net(hidden: int = 100) -> WeightNet:
    """All-zero parameters: emits weight 0.5 for every loss."""
    net = WeightNet(hidden)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    return net


def predict_weights(phi: WeightNet, losses: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Elementwise utility weights for a vector of non-negative losses."""
    t = torch.as_tensor(losses, dtype=torch.float64)
    if t.ndim != 1:
        raise ValueError(f"losses must be a vector, got shape {tuple(t.shape)}")
    if not torch.all(torch.isfinite(t)):
        raise ValueError("losses contain non-finite values")
    if len(t) and float(t.min()) < 0:
        raise ValueError("losses must be non-negative")
    return phi(t)


def virtual_update_from_losses(losses: torch.Tensor, params: list[torch.Tensor],
                               phi: WeightNet, lr: float) -> list[torch.Tensor]:
    """One-step lookahead of ``params`` under the weighted mean of ``losses``.

    The weight network sees detached loss values, so weights act as per-sample
    coefficients in the inner gradient; the returned parameters keep their
    dependence on phi for second-order differentiation.
    """
    w = phi(losses.detach())
    inner = (w * losses).mean()
    grads = torch.autograd.grad(inner, params, create_graph=True)
    return [p - lr * g for p, g in zip(params, grads)]


def virtual_classifier_step(theta: ClassifierState, phi: WeightNet, train_batch: LabeledDataset,
                            lr: float) -> list[torch.Tensor]:
    """Provisional classifier parameters after one weighted gradient step."""
    if len(train_batch) == 0:
        raise ValueError("train batch must be non-empty")
    feats, labels = _as_tensors(train_batch)
    losses = F.cross_entropy(theta.model(feats), labels, reduction="none")
    return virtual_update_from_losses(losses, list(theta.model.parameters()), phi, lr)


def meta_update(phi: WeightNet, theta: ClassifierState, train_batch: LabeledDataset,
                val_batch: LabeledDataset, inner_lr: float,
                phi_optimizer: Optional[torch.optim.Optimizer] = None,
                phi_lr: float = 1e-3) -> float:
    """One outer step: differentiate validation loss through the virtual update.

    Returns the validation loss at the provisional parameters. When no
    optimizer is supplied a fresh Adam step at ``phi_lr`` is applied.
    """
    if len(val_batch) == 0:
        raise ValueError("validation batch must be non-empty")
    opt = phi_optimizer or torch.optim.Adam(phi.parameters(), lr=phi_lr)
    theta_prime = virtual_classifier_step(theta, phi, train_batch, inner_lr)
    names = [n for n, _ in theta.model.named_parameters()]
    vf, vl = _as_tensors(val_batch)
    logits = torch.func.functional_call(theta.model, dict(zip(names, theta_prime)), (vf,))
    val_loss = F.cross_entropy(logits, vl)
    grads = torch.autograd.grad(val_loss, list(phi.parameters()), allow_unused=True)
    opt.zero_grad()
    for p, g in zip(phi.parameters(), grads):
        p.grad = torch.zeros_like(p) if g is None else g
    opt.step()
    return float(val_loss.detach())


def meta_gradient(phi: WeightNet, theta: ClassifierState, train_batch: LabeledDataset,
                  val_batch: LabeledDataset, inner_lr: float) -> list[torch.Tensor]:
    """The outer gradient itself, without applying an update (for verification)."""
    theta_prime = virtual_classifier_step(theta, phi, train_batch, inner_lr)
    names = [n for n, _ in theta.model.named_parameters()]
    vf, vl = _as_tensors(val_batch)
    logits = torch.func.functional_call(theta.model, dict(zip(names, theta_prime)), (vf,))
    val_loss = F.cross_entropy(logits, vl)
    return list(torch.autograd.grad(val_loss, list(phi.parameters()), allow_unused=False))


@dataclass
class TodvConfig:
    max_iters: int = 1500
    classifier_lr: float = 0.01
    classifier_momentum: float = 0.9
    weight_decay: float = 0.0
    weightnet_lr: float = 1e-3
    train_batch: int = 128
    val_batch: int = 128
    hidden: int = 100
    arch: str = "mlp-small"
    eval_every: int = 100
    seed: int = 0
    meta_enabled: bool = True


@dataclass
class TodvResult:
    weight_net: WeightNet
    classifier: ClassifierState
    history: list[dict] = field(default_factory=list)
    merged_train: LabeledDataset | None = None


def run_todv(bundle: SplitBundle, synthetic_warmup: Optional[LabeledDataset],
             config: TodvConfig, phi_init: Optional[WeightNet] = None) -> TodvResult:
    """Alternating bi-level loop over the merged real+synthetic training set.

    Per iteration: sample a train and a validation batch, predict weights for
    the train batch, take one weighted classifier step, then one outer weight
    network step. With ``meta_enabled`` False the loop degrades to uniform
    unit-weight training and the weight network is left untouched, which is
    the baseline for the reweighting-effect comparison.
    """
    if len(bundle.validation) == 0:
        raise ConfigError("validation split is empty")
    parts = [bundle.real_train.with_provenance("real")]
    if synthetic_warmup is not None and len(synthetic_warmup) > 0:
        parts.append(synthetic_warmup.with_provenance("real"))
    merged = concat_datasets(parts, provenance="real")

    theta = init_classifier(merged.feature_dim, merged.num_classes, config.arch, config.seed)
    phi = copy.deepcopy(phi_init) if phi_init is not None else init_weight_net(config.hidden, config.seed)
    opt_theta = torch.optim.SGD(theta.model.parameters(), lr=config.classifier_lr,
                                momentum=config.classifier_momentum,
                                weight_decay=config.weight_decay)
    opt_phi = torch.optim.Adam(phi.parameters(), lr=config.weightnet_lr)
    g = torch.Generator().manual_seed(derive_seed(config.seed, "todv-batches"))

    feats, labels = _as_tensors(merged)
    result = TodvResult(weight_net=phi, classifier=theta, merged_train=merged)

    for it in range(config.max_iters):
        tr_idx = torch.randperm(len(merged), generator=g)[:config.train_batch]
        va_idx = torch.randperm(len(bundle.validation), generator=g)[:config.val_batch]
        train_batch = merged.subset(tr_idx.numpy())
        val_batch = bundle.validation.subset(va_idx.numpy())

        losses = F.cross_entropy(theta.model(feats[tr_idx]), labels[tr_idx], reduction="none")
        if config.meta_enabled:
            with torch.no_grad():
                w = phi(losses.detach())
        else:
            w = torch.ones_like(losses)
        step_loss = (w.detach() * losses).mean()
        opt_theta.zero_grad()
        step_loss.backward()
        opt_theta.step()

        if config.meta_enabled:
            meta_update(phi, theta, train_batch, val_batch, config.classifier_lr, opt_phi)

        if (it + 1) % config.eval_every == 0 or it == config.max_iters - 1:
            with torch.no_grad():
                all_losses = F.cross_entropy(theta.model(feats), labels, reduction="none")
                mean_w = float(phi(all_losses).mean())
            result.history.append({
                "iteration": it + 1,
                "train_loss": float(step_loss.detach()),
                "train_acc": evaluate(theta, merged),
                "val_acc": evaluate(theta, bundle.validation),
                "mean_weight": mean_w,
            })
    return result


def score_dataset(phi: WeightNet, theta: ClassifierState, data: LabeledDataset) -> np.ndarray:
    """Utility weights of every sample under the frozen scorer pair."""
    from taskaug.classifier import per_sample_loss

    losses = per_sample_loss(theta, data).detach()
    with torch.no_grad():
        return predict_weights(phi, losses).numpy()


def save_weight_net(path: str | Path, phi: WeightNet, config_hash: str = "") -> None:
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash,
        "hidden": phi.hidden,
        "w1": phi.fc1.weight.detach().clone(),
        "b1": phi.fc1.bias.detach().clone(),
        "w2": phi.fc2.weight.detach().clone(),
        "b2": phi.fc2.bias.detach().clone(),
    }, path)


def load_weight_net(path: str | Path) -> WeightNet:
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported weight-net checkpoint version {payload.get('format_version')}")
    net = WeightNet(payload["hidden"])
    with torch.no_grad():
        net.fc1.weight.copy_(payload["w1"])
        net.fc1.bias.copy_(payload["b1"])
        net.fc2.weight.copy_(payload["w2"])
        net.fc2.bias.copy_(payload["b2"])
    return net
