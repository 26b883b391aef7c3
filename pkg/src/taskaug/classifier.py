"""Downstream classifier: weighted training, per-sample losses, features.

A small tanh MLP in float64. The penultimate activations double as the
feature embedding used for semantic prototypes, diversity scoring, and the
influence probe. Two widths are registered so experiments can check that
synthetic data tuned against one architecture transfers to another.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from taskaug.data import LabeledDataset, derive_seed
from taskaug.errors import ConfigError

ARCHITECTURES = {"mlp-small": 64, "mlp-wide": 256}

CHECKPOINT_FORMAT_VERSION = 1


class MlpClassifier(nn.Module):
    def __init__(self, feature_dim: int, num_classes: int, hidden: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden_width = hidden
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)
        self.to(torch.float64)

    def hidden_out(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fc1(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.hidden_out(x))


@dataclass
class ClassifierState:
    """Classifier parameters plus the architecture tag they belong to."""

    model: MlpClassifier
    arch: str

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @property
    def feature_dim(self) -> int:
        return self.model.feature_dim

    def clone(self) -> "ClassifierState":
        return ClassifierState(copy.deepcopy(self.model), self.arch)


def init_classifier(feature_dim: int, num_classes: int, arch: str = "mlp-small",
                    seed: int = 0) -> ClassifierState:
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}")
    model = MlpClassifier(feature_dim, num_classes, ARCHITECTURES[arch])
    gen = torch.Generator().manual_seed(derive_seed(seed, f"classifier-init-{arch}"))
    with torch.no_grad():
        for p in model.parameters():
            if p.ndim > 1:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64)
                        * (1.0 / np.sqrt(p.shape[1])))
            else:
                p.zero_()
    return ClassifierState(model, arch)


def _as_tensors(data: LabeledDataset) -> tuple[torch.Tensor, torch.Tensor]:
    return (torch.tensor(data.features, dtype=torch.float64),
            torch.tensor(data.labels, dtype=torch.long))


def per_sample_loss(state: ClassifierState, batch: LabeledDataset) -> torch.Tensor:
    """Cross-entropy of each sample, in batch order.

    Uses the log-sum-exp form, so losses are finite and >= 0 for any finite
    logits.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    if batch.labels.max(initial=0) >= state.num_classes:
        raise IndexError(f"label {batch.labels.max()} out of range for K={state.num_classes}")
    feats, labels = _as_tensors(batch)
    logits = state.model(feats)
    return F.cross_entropy(logits, labels, reduction="none")


def weighted_loss(state: ClassifierState, feats: torch.Tensor, labels: torch.Tensor,
                  weights: torch.Tensor | None) -> torch.Tensor:
    """Mean of per-sample cross-entropy, optionally scaled by per-sample weights."""
    logits = state.model(feats)
    losses = F.cross_entropy(logits, labels, reduction="none")
    if weights is None:
        return losses.mean()
    return (weights * losses).mean()


@dataclass
class ClassifierTrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine_decay: bool = True
    seed: int = 0


@dataclass
class TrainTrajectory:
    epoch_losses: list[float] = field(default_factory=list)


def train_weighted(state: ClassifierState, data: LabeledDataset, weights: np.ndarray,
                   config: ClassifierTrainConfig) -> tuple[ClassifierState, TrainTrajectory]:
    """Minibatch SGD with momentum on the weighted cross-entropy.

    ``weights`` must lie in [0, 1] with one entry per sample; the input state
    is left untouched and a trained copy is returned along with the per-epoch
    loss trajectory.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(data),):
        raise ValueError(f"weights shape {weights.shape} does not match dataset size {len(data)}")
    if len(weights) and (weights.min() < 0.0 or weights.max() > 1.0):
        raise ValueError("weights must lie in [0, 1]")
    return _train(state, data, torch.tensor(weights, dtype=torch.float64), config)


def train_classifier(state: ClassifierState, data: LabeledDataset,
                     config: ClassifierTrainConfig) -> tuple[ClassifierState, TrainTrajectory]:
    """Plain unweighted training; same loop as train_weighted with unit weights."""
    return _train(state, data, None, config)


def _train(state: ClassifierState, data: LabeledDataset, weights: torch.Tensor | None,
           config: ClassifierTrainConfig) -> tuple[ClassifierState, TrainTrajectory]:
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.labels.max(initial=0) >= state.num_classes:
        raise IndexError("dataset labels exceed classifier output dimension")
    out = state.clone()
    feats, labels = _as_tensors(data)
    opt = torch.optim.SGD(out.model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs, 1)) \
        if config.cosine_decay else None
    g = torch.Generator().manual_seed(derive_seed(config.seed, "classifier-batches"))
    trajectory = TrainTrajectory()

    for _ in range(config.epochs):
        order = torch.randperm(len(data), generator=g)
        epoch_loss = 0.0
        nb = 0
        for start in range(0, len(data), config.batch_size):
            idx = order[start:start + config.batch_size]
            w = weights[idx] if weights is not None else None
            loss = weighted_loss(out, feats[idx], labels[idx], w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            nb += 1
        if scheduler is not None:
            scheduler.step()
        trajectory.epoch_losses.append(epoch_loss / max(nb, 1))
    return out, trajectory


def features(state: ClassifierState, x: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Penultimate-layer activations; accepts one sample (D,) or a batch (N, D)."""
    t = torch.as_tensor(x, dtype=torch.float64)
    single = t.ndim == 1
    with torch.no_grad():
        out = state.model.hidden_out(t[None, :] if single else t)
    return out[0] if single else out


def features_dataset(state: ClassifierState, data: LabeledDataset) -> np.ndarray:
    return features(state, data.features).numpy()


def evaluate(state: ClassifierState, data: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    feats, labels = _as_tensors(data)
    with torch.no_grad():
        pred = state.model(feats).argmax(dim=1)
    return float((pred == labels).double().mean())


def save_classifier(path: str | Path, state: ClassifierState, config_hash: str = "") -> None:
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash,
        "arch": state.arch,
        "feature_dim": state.feature_dim,
        "num_classes": state.num_classes,
        "model_state": state.model.state_dict(),
    }, path)


def load_classifier(path: str | Path) -> ClassifierState:
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported classifier checkpoint version {payload.get('format_version')}")
    arch = payload["arch"]
    model = MlpClassifier(payload["feature_dim"], payload["num_classes"], ARCHITECTURES[arch])
    model.load_state_dict(payload["model_state"])
    return ClassifierState(model, arch)
