"""Small conditional denoising-diffusion generator on feature vectors.

Deterministic DDIM sampling and inversion over a linear-beta schedule, a
feed-forward noise predictor conditioned on a sinusoidal timestep encoding
plus a learned per-class embedding, classifier-free guidance via a trained
null embedding, and embedding-only token learning from a few real samples.
Everything runs in float64 on CPU so sampling is bit-reproducible and
gradient checks against finite differences are meaningful.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from taskaug.data import LabeledDataset, derive_seed
from taskaug.errors import ConfigError

CHECKPOINT_FORMAT_VERSION = 1


class NoiseSchedule:
    """Cumulative signal levels for a subsampled linear beta schedule.

    A linear beta ramp over ``base_steps`` is evenly subsampled to
    ``num_steps`` working timesteps, the usual way a 50-step deterministic
    sampler rides a 1000-step training schedule. This keeps the terminal
    signal level near zero (alpha_bar(T) ~ 4e-5 at the defaults) so sampling
    can start from a standard normal draw; running the ramp over only 50
    steps directly would leave 60% of the signal at the terminal step and
    collapse generations toward the origin. Set base_steps == num_steps to
    get the plain un-subsampled ramp. ``alpha_bar(t)`` uses the convention
    alpha_bar(0) = 1; valid model timesteps are 1..T.
    """

    def __init__(self, num_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02,
                 base_steps: int = 1000):
        if num_steps < 1:
            raise ConfigError(f"need at least one timestep, got {num_steps}")
        if base_steps < num_steps:
            raise ConfigError(f"base_steps {base_steps} must be >= num_steps {num_steps}")
        self.num_steps = int(num_steps)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.base_steps = int(base_steps)
        dense_betas = torch.linspace(beta_start, beta_end, base_steps, dtype=torch.float64)
        dense = torch.cumprod(1.0 - dense_betas, dim=0)
        idx = torch.div(torch.arange(1, num_steps + 1) * base_steps, num_steps,
                        rounding_mode="floor") - 1
        alpha_bar = dense[idx]
        # index 0 holds alpha_bar(0) = 1 so that alpha_bar(t) = _alpha_bar_full[t]
        self._alpha_bar_full = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar])
        self.betas = 1.0 - self._alpha_bar_full[1:] / self._alpha_bar_full[:-1]
        if not torch.all(self._alpha_bar_full[1:] < self._alpha_bar_full[:-1]):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if not (0.0 < float(alpha_bar[-1]) < float(alpha_bar[0]) <= 1.0):
            raise ConfigError("alpha_bar endpoints out of range")

    @property
    def T(self) -> int:
        return self.num_steps

    def alpha_bar(self, t) -> torch.Tensor:
        """alpha_bar at integer timestep(s) t in [0, T]."""
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t > self.num_steps):
            raise IndexError(f"timestep out of range [0, {self.num_steps}]")
        return self._alpha_bar_full[t]

    def alpha(self, t) -> torch.Tensor:
        """Per-step alpha_t = alpha_bar(t) / alpha_bar(t-1), t in [1, T]."""
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 1) or torch.any(t > self.num_steps):
            raise IndexError(f"timestep out of range [1, {self.num_steps}]")
        return self._alpha_bar_full[t] / self._alpha_bar_full[t - 1]

    def snr(self, t) -> torch.Tensor:
        """Signal-to-noise ratio alpha_bar / (1 - alpha_bar) at t in [1, T]."""
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional encoding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class Denoiser(nn.Module):
    """Feed-forward noise predictor eps(x_t, t, cond).

    Input is the concatenation of the noised sample, a sinusoidal timestep
    encoding, and a condition embedding; three linear layers with SiLU keep
    the map smooth, which DDIM inversion and finite-difference checks rely on.
    Owns the learned null embedding used for classifier-free guidance.
    """

    def __init__(self, feature_dim: int, hidden: int = 128, time_dim: int = 32, cond_dim: int = 16):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.net = nn.Sequential(
            nn.Linear(feature_dim + time_dim + cond_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, feature_dim),
        )
        self.null_token = nn.Parameter(torch.zeros(cond_dim, dtype=torch.float64))
        self.to(torch.float64)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2:
            raise ValueError(f"x must be (N, D), got {tuple(x.shape)}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if cond.ndim == 1:
            cond = cond[None, :].expand(x.shape[0], -1)
        temb = sinusoidal_time_embedding(t, self.time_dim)
        return self.net(torch.cat([x, temb, cond], dim=1))


@dataclass
class ClassToken:
    """Learned condition embedding identifying one class."""

    class_id: int
    embedding: torch.Tensor

    def __post_init__(self) -> None:
        self.embedding = torch.as_tensor(self.embedding, dtype=torch.float64)
        if not torch.all(torch.isfinite(self.embedding)):
            raise ValueError(f"token for class {self.class_id} has non-finite values")


class DenoiserState:
    """Trainable denoiser plus a frozen reference copy for preference tuning."""

    def __init__(self, model: Denoiser):
        self.model = model
        self.reference = copy.deepcopy(model)
        for p in self.reference.parameters():
            p.requires_grad_(False)

    def snapshot_reference(self) -> None:
        """Re-freeze the reference at the current trainable parameters."""
        self.reference.load_state_dict(copy.deepcopy(self.model.state_dict()))

    def clone(self) -> "DenoiserState":
        dup = DenoiserState(copy.deepcopy(self.model))
        dup.reference.load_state_dict(copy.deepcopy(self.reference.state_dict()))
        return dup


def forward_noising(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    t must lie in [1, T]; per-sample timesteps are supported by passing a
    (N,) tensor against (N, D) inputs.
    """
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > sched.T):
        raise IndexError(f"timestep {t} out of range [1, {sched.T}]")
    ab = sched.alpha_bar(t)
    if x0.ndim == 2 and ab.ndim == 1 and ab.shape[0] == x0.shape[0]:
        ab = ab[:, None]
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def cfg_epsilon(x_t: torch.Tensor, t, cond: torch.Tensor, omega: float,
                state: DenoiserState | Denoiser) -> torch.Tensor:
    """Classifier-free-guided noise prediction.

    eps_hat = eps_uncond + omega * (eps_cond - eps_uncond); omega 0 and 1
    return the unconditional and conditional branches exactly.
    """
    model = state.model if isinstance(state, DenoiserState) else state
    single = x_t.ndim == 1
    x = x_t[None, :] if single else x_t
    if omega == 1.0:
        out = model(x, t, cond)
    elif omega == 0.0:
        out = model(x, t, model.null_token)
    else:
        # one batched forward for both guidance branches
        n = x.shape[0]
        cond_b = cond[None, :].expand(n, -1) if cond.ndim == 1 else cond
        null_b = model.null_token[None, :].expand(n, -1)
        t_b = torch.as_tensor(t, dtype=torch.long)
        t_b = t_b.expand(n) if t_b.ndim == 0 else t_b
        both = model(torch.cat([x, x]), torch.cat([t_b, t_b]), torch.cat([cond_b, null_b]))
        eps_c, eps_u = both[:n], both[n:]
        out = eps_u + omega * (eps_c - eps_u)
    return out[0] if single else out


def ddim_step(x: torch.Tensor, eps_hat: torch.Tensor, ab_from: torch.Tensor,
              ab_to: torch.Tensor, clip_radius: Optional[float] = None) -> torch.Tensor:
    """One deterministic DDIM move between cumulative signal levels.

    ``clip_radius`` rescales the predicted clean sample back onto a ball of
    that radius, which keeps strongly guided chains from extrapolating off
    the data manifold (the vector analog of clamping predicted pixels).
    """
    x0_pred = (x - torch.sqrt(1.0 - ab_from) * eps_hat) / torch.sqrt(ab_from)
    if clip_radius is not None:
        norms = x0_pred.norm(dim=-1, keepdim=True)
        x0_pred = x0_pred * torch.clamp(clip_radius / norms, max=1.0)
    return torch.sqrt(ab_to) * x0_pred + torch.sqrt(1.0 - ab_to) * eps_hat


def ddim_sample(eps_T: torch.Tensor, cond: torch.Tensor, omega: float,
                sched: NoiseSchedule, state: DenoiserState | Denoiser,
                clip_radius: Optional[float] = None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM denoising from terminal noise to a sample.

    Fully differentiable with respect to eps_T and cond.
    """
    single = eps_T.ndim == 1
    x = eps_T[None, :] if single else eps_T
    for t in range(sched.T, 0, -1):
        eps_hat = cfg_epsilon(x, t, cond, omega, state)
        x = ddim_step(x, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t - 1), clip_radius)
    return x[0] if single else x


def ddim_invert(x0: torch.Tensor, cond: torch.Tensor, omega: float,
                sched: NoiseSchedule, state: DenoiserState | Denoiser,
                fp_iters: int = 3, clip_radius: Optional[float] = None) -> torch.Tensor:
    """Run the DDIM update in reverse time, recovering terminal noise.

    Each reverse step solves the implicit relation "the forward step from the
    answer lands on the current iterate" by fixed-point iteration: the noise
    prediction is first taken at the current iterate, then re-evaluated at the
    provisional target ``fp_iters - 1`` more times. Deterministic, and
    invert(sample(eps)) ~= eps up to the remaining discretization error.
    """
    single = x0.ndim == 1
    x = x0[None, :] if single else x0
    for t in range(1, sched.T + 1):
        ab_prev, ab_t = sched.alpha_bar(t - 1), sched.alpha_bar(t)
        x_next = x
        for _ in range(max(fp_iters, 1)):
            eps_hat = cfg_epsilon(x_next, t, cond, omega, state)
            x_next = ddim_step(x, eps_hat, ab_prev, ab_t, clip_radius)
        x = x_next
    return x[0] if single else x


@dataclass
class DenoiserTrainConfig:
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    cond_dropout: float = 0.1
    hidden: int = 128
    time_dim: int = 32
    cond_dim: int = 16
    seed: int = 0


@dataclass
class DenoiserTrainReport:
    losses: list[float] = field(default_factory=list)
    dropped_conditions: int = 0
    total_conditions: int = 0


def token_matrix(tokens: Sequence[ClassToken], num_classes: int) -> torch.Tensor:
    """Stack tokens into a (K, cond_dim) lookup, checking coverage."""
    by_class = {tok.class_id: tok for tok in tokens}
    missing = [k for k in range(num_classes) if k not in by_class]
    if missing:
        raise ConfigError(f"missing class tokens for classes {missing}")
    return torch.stack([by_class[k].embedding for k in range(num_classes)])


def init_class_tokens(data: LabeledDataset, cond_dim: int, seed: int) -> list[ClassToken]:
    """Seeded random projection of each class-mean feature vector into embedding space."""
    rng = np.random.default_rng(derive_seed(seed, "token-init"))
    proj = rng.standard_normal((cond_dim, data.feature_dim)) / math.sqrt(data.feature_dim)
    tokens = []
    for k in range(data.num_classes):
        feats = data.features[data.labels == k]
        mean = feats.mean(axis=0) if len(feats) else np.zeros(data.feature_dim)
        tokens.append(ClassToken(k, torch.tensor(proj @ mean, dtype=torch.float64)))
    return tokens


def train_denoiser(data: LabeledDataset, tokens: Sequence[ClassToken], sched: NoiseSchedule,
                   config: DenoiserTrainConfig) -> tuple[DenoiserState, DenoiserTrainReport]:
    """Train the noise predictor on labeled data with condition dropout.

    Minimizes the squared error between drawn and predicted noise at random
    timesteps; each sample's condition is replaced by the null embedding with
    probability cond_dropout so guidance has an unconditional branch.
    """
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    tok = token_matrix(tokens, data.num_classes)
    model = Denoiser(data.feature_dim, hidden=config.hidden, time_dim=config.time_dim,
                     cond_dim=config.cond_dim)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "denoiser-init"))
    with torch.no_grad():
        for p in model.parameters():
            if p.ndim > 0:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.05)
    with torch.no_grad():
        model.null_token.zero_()

    feats = torch.tensor(data.features, dtype=torch.float64)
    labels = torch.tensor(data.labels, dtype=torch.long)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    g = torch.Generator().manual_seed(derive_seed(config.seed, "denoiser-train"))
    report = DenoiserTrainReport()

    for _ in range(config.steps):
        idx = torch.randint(0, len(data), (config.batch_size,), generator=g)
        t = torch.randint(1, sched.T + 1, (config.batch_size,), generator=g)
        eps = torch.randn(config.batch_size, data.feature_dim, generator=g, dtype=torch.float64)
        x_t = forward_noising(feats[idx], t, eps, sched)
        cond = tok[labels[idx]]
        drop = torch.rand(config.batch_size, generator=g) < config.cond_dropout
        cond = torch.where(drop[:, None], model.null_token.expand_as(cond), cond)
        report.dropped_conditions += int(drop.sum())
        report.total_conditions += config.batch_size

        pred = model(x_t, t, cond)
        loss = ((eps - pred) ** 2).sum(dim=1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        report.losses.append(float(loss.detach()))

    return DenoiserState(model), report


@dataclass
class TokenLearnConfig:
    lr: float = 1e-4
    steps: int = 400
    batch_size: int = 1
    seed: int = 0


def denoising_loss(state: DenoiserState, data: LabeledDataset, embedding: torch.Tensor,
                   sched: NoiseSchedule, draws: int = 4, seed: int = 0) -> float:
    """Deterministic eval of the denoising objective for one condition embedding."""
    g = torch.Generator().manual_seed(derive_seed(seed, "token-eval"))
    feats = torch.tensor(data.features, dtype=torch.float64)
    total = 0.0
    with torch.no_grad():
        for _ in range(draws):
            t = torch.randint(1, sched.T + 1, (len(data),), generator=g)
            eps = torch.randn(feats.shape, generator=g, dtype=torch.float64)
            x_t = forward_noising(feats, t, eps, sched)
            pred = state.model(x_t, t, embedding)
            total += float(((eps - pred) ** 2).sum(dim=1).mean())
    return total / draws


def learn_class_token(class_id: int, few_shot: LabeledDataset, state: DenoiserState,
                      sched: NoiseSchedule, config: TokenLearnConfig,
                      init: Optional[torch.Tensor] = None) -> ClassToken:
    """Embedding-only optimization of a class identifier on a few real samples.

    The denoiser is frozen; only the returned embedding is trained, starting
    from ``init`` (or zeros) and minimizing the denoising loss on the
    few-shot set.
    """
    if len(few_shot) == 0:
        raise ConfigError(f"empty few-shot set for class {class_id}")
    if not np.all(few_shot.labels == class_id):
        raise ConfigError(f"few-shot set contains labels other than {class_id}")
    emb = torch.zeros(state.model.cond_dim, dtype=torch.float64) if init is None \
        else init.detach().clone().to(torch.float64)
    emb.requires_grad_(True)
    was_trainable = [p.requires_grad for p in state.model.parameters()]
    for p in state.model.parameters():
        p.requires_grad_(False)
    try:
        feats = torch.tensor(few_shot.features, dtype=torch.float64)
        opt = torch.optim.Adam([emb], lr=config.lr)
        g = torch.Generator().manual_seed(derive_seed(config.seed, f"token-{class_id}"))
        for _ in range(config.steps):
            idx = torch.randint(0, len(few_shot), (config.batch_size,), generator=g)
            t = torch.randint(1, sched.T + 1, (config.batch_size,), generator=g)
            eps = torch.randn(config.batch_size, few_shot.feature_dim,
                              generator=g, dtype=torch.float64)
            x_t = forward_noising(feats[idx], t, eps, sched)
            pred = state.model(x_t, t, emb)
            loss = ((eps - pred) ** 2).sum(dim=1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    finally:
        for p, flag in zip(state.model.parameters(), was_trainable):
            p.requires_grad_(flag)
    return ClassToken(class_id, emb.detach())


def save_generator(path: str | Path, state: DenoiserState, sched: NoiseSchedule,
                   tokens: Sequence[ClassToken], config_hash: str = "") -> None:
    """Versioned checkpoint: schedule constants, both parameter sets, all tokens."""
    model = state.model
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash,
        "schedule": {"num_steps": sched.num_steps, "beta_start": sched.beta_start,
                     "beta_end": sched.beta_end, "base_steps": sched.base_steps},
        "arch": {"feature_dim": model.feature_dim, "hidden": model.hidden,
                 "time_dim": model.time_dim, "cond_dim": model.cond_dim},
        "model_state": model.state_dict(),
        "reference_state": state.reference.state_dict(),
        "tokens": {tok.class_id: tok.embedding for tok in tokens},
    }
    torch.save(payload, path)


def load_generator(path: str | Path) -> tuple[DenoiserState, NoiseSchedule, list[ClassToken], dict]:
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported generator checkpoint version {version}")
    sched = NoiseSchedule(**payload["schedule"])
    model = Denoiser(**payload["arch"])
    model.load_state_dict(payload["model_state"])
    state = DenoiserState(model)
    state.reference.load_state_dict(payload["reference_state"])
    tokens = [ClassToken(k, emb) for k, emb in sorted(payload["tokens"].items())]
    meta = {"config_hash": payload.get("config_hash", ""), "format_version": version}
    return state, sched, tokens, meta
