"""Mechanism analysis: influence scores, diversity, weight distributions.

Influence is computed on a convex probe (L2-regularized multinomial logistic
regression, optionally over classifier features) where the Hessian is exact,
so the scores can be validated against literal leave-one-out retraining.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from taskaug.classifier import ClassifierState, features_dataset
from taskaug.data import LabeledDataset
from taskaug.errors import ConfigError
from taskaug.mlco import score_samples
from taskaug.todv import WeightNet

FeatureMap = Callable[[LabeledDataset], np.ndarray]


class ConvexProbe:
    """Multinomial logistic regression fit by Newton's method.

    The objective is mean cross-entropy plus (l2/2) * ||W||^2 over all
    coefficients, so the Hessian is positive definite for any l2 > 0.
    """

    def __init__(self, num_classes: int, l2: float = 1e-3, max_iter: int = 100, tol: float = 1e-10):
        self.num_classes = num_classes
        self.l2 = float(l2)
        self.max_iter = max_iter
        self.tol = tol
        self.coef: np.ndarray | None = None  # (K, F+1), last column is the bias

    @staticmethod
    def _design(X: np.ndarray) -> np.ndarray:
        return np.hstack([X, np.ones((len(X), 1))])

    def _probs(self, Xd: np.ndarray, coef: np.ndarray) -> np.ndarray:
        logits = Xd @ coef.T
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def fit(self, X: np.ndarray, y: np.ndarray,
            sample_mask: Optional[np.ndarray] = None) -> "ConvexProbe":
        Xd = self._design(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64)
        if sample_mask is not None:
            Xd, y = Xd[sample_mask], y[sample_mask]
        n, d = Xd.shape
        k = self.num_classes
        coef = np.zeros((k, d))
        onehot = np.eye(k)[y]
        for _ in range(self.max_iter):
            p = self._probs(Xd, coef)
            grad = (p - onehot).T @ Xd / n + self.l2 * coef
            if np.linalg.norm(grad) < self.tol:
                break
            h = self._hessian(Xd, p)
            try:
                step = scipy.linalg.solve(h, grad.reshape(-1), assume_a="pos")
            except np.linalg.LinAlgError as e:
                raise ConfigError(
                    "probe Hessian is singular; use a nonzero l2 regularization") from e
            coef = coef - step.reshape(k, d)
        self.coef = coef
        return self

    def _hessian(self, Xd: np.ndarray, p: np.ndarray) -> np.ndarray:
        n, d = Xd.shape
        k = self.num_classes
        h = np.zeros((k * d, k * d))
        for a in range(k):
            for b in range(k):
                w = p[:, a] * ((a == b) - p[:, b])
                h[a * d:(a + 1) * d, b * d:(b + 1) * d] = (Xd * w[:, None]).T @ Xd / n
        h += self.l2 * np.eye(k * d)
        return h

    def per_sample_grads(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of each sample's loss w.r.t. flattened coefficients, (N, K*d)."""
        Xd = self._design(X)
        p = self._probs(Xd, self.coef)
        p[np.arange(len(y)), y] -= 1.0
        return np.einsum("nk,nd->nkd", p, Xd).reshape(len(y), -1)

    def mean_loss(self, X: np.ndarray, y: np.ndarray) -> float:
        Xd = self._design(X)
        logits = Xd @ self.coef.T
        lse = _logsumexp(logits)
        return float(np.mean(lse - logits[np.arange(len(y)), y]))

    def full_hessian(self, X: np.ndarray) -> np.ndarray:
        Xd = self._design(X)
        return self._hessian(Xd, self._probs(Xd, self.coef))


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=1))


@dataclass
class InfluenceReport:
    scores: np.ndarray
    positive_fraction: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    probe: ConvexProbe = field(repr=False, default=None)


def _probe_inputs(data: LabeledDataset, feature_map: Optional[FeatureMap]) -> np.ndarray:
    return feature_map(data) if feature_map is not None else data.features


def influence_scores(train: LabeledDataset, test: LabeledDataset,
                     feature_map: Optional[FeatureMap] = None, l2: float = 1e-3,
                     bins: int = 20) -> InfluenceReport:
    """First-order effect of up-weighting each training sample on mean test loss.

    Positive means helpful: up-weighting the sample would DECREASE the test
    loss. Computed exactly on the convex probe: g_test^T H^{-1} g_i.
    """
    Xtr = _probe_inputs(train, feature_map)
    Xte = _probe_inputs(test, feature_map)
    probe = ConvexProbe(train.num_classes, l2=l2).fit(Xtr, train.labels)
    h = probe.full_hessian(Xtr)
    g_test = probe.per_sample_grads(Xte, test.labels).mean(axis=0)
    try:
        ht = scipy.linalg.solve(h, g_test, assume_a="pos")
    except np.linalg.LinAlgError as e:
        raise ConfigError("probe Hessian is singular; use a nonzero l2 regularization") from e
    g_train = probe.per_sample_grads(Xtr, train.labels)
    scores = g_train @ ht
    counts, edges = np.histogram(scores, bins=bins)
    return InfluenceReport(scores=scores, positive_fraction=float(np.mean(scores > 0)),
                           hist_counts=counts, hist_edges=edges, probe=probe)


def loo_oracle(train: LabeledDataset, test: LabeledDataset,
               feature_map: Optional[FeatureMap] = None, l2: float = 1e-3,
               max_train: int = 500) -> np.ndarray:
    """Exact leave-one-out deltas: test loss without sample i minus with it.

    Positive means the sample was helpful. Retrains the probe once per
    sample, so the train size is guarded.
    """
    if len(train) > max_train:
        raise ConfigError(f"leave-one-out retraining capped at {max_train} samples, got {len(train)}")
    Xtr = _probe_inputs(train, feature_map)
    Xte = _probe_inputs(test, feature_map)
    full = ConvexProbe(train.num_classes, l2=l2).fit(Xtr, train.labels)
    base = full.mean_loss(Xte, test.labels)
    deltas = np.zeros(len(train))
    for i in range(len(train)):
        mask = np.ones(len(train), dtype=bool)
        mask[i] = False
        probe = ConvexProbe(train.num_classes, l2=l2).fit(Xtr, train.labels, sample_mask=mask)
        deltas[i] = probe.mean_loss(Xte, test.labels) - base
    return deltas


def intra_class_diversity(data: LabeledDataset,
                          classifier: ClassifierState) -> tuple[dict[int, float], float]:
    """Mean pairwise cosine distance of within-class features, then class mean.

    Classes with fewer than two samples are excluded with a warning. Values
    lie in [0, 2]; 0 means all features in the class are positively parallel.
    """
    feats = features_dataset(classifier, data)
    per_class: dict[int, float] = {}
    for k in range(data.num_classes):
        f = feats[data.labels == k]
        if len(f) < 2:
            warnings.warn(f"class {k} has {len(f)} sample(s); excluded from diversity",
                          RuntimeWarning)
            continue
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        unit = f / np.maximum(norms, 1e-300)
        cos = unit @ unit.T
        n = len(f)
        iu = np.triu_indices(n, k=1)
        per_class[k] = float(np.mean(1.0 - cos[iu]))
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


@dataclass
class WeightDistribution:
    mean: float
    std: float
    median: float
    counts: np.ndarray
    edges: np.ndarray
    size: int


def weight_histogram(phi: WeightNet, classifier: ClassifierState,
                     datasets: Sequence[LabeledDataset], bins: int = 20) -> list[WeightDistribution]:
    """Utility-weight distribution of each dataset under the frozen scorer."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = []
    for data in datasets:
        w = score_samples(phi, classifier, data)
        counts, _ = np.histogram(w, bins=edges)
        out.append(WeightDistribution(mean=float(w.mean()), std=float(w.std()),
                                      median=float(np.median(w)), counts=counts,
                                      edges=edges, size=len(w)))
    return out
