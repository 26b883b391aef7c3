"""Utility-driven synthetic data augmentation for classification tasks.

A loss-conditioned weight network is meta-trained to score how useful each
training sample is for a specific downstream task. Those utility scores then
steer a small conditional diffusion generator at two levels: preference-based
fine-tuning of the generator itself, and per-instance optimization of the
condition embedding and initial noise. The end product is synthetic training
data tuned to the consumer task rather than to generic sample quality.
"""

from taskaug.data import (
    LabeledDataset,
    Sample,
    SplitBundle,
    SubpopulationMode,
    TaskSpec,
    derive_seed,
    load_dataset,
    make_synthetic_task,
    mode_membership_fractions,
    save_dataset,
)
from taskaug.diffusion import (
    ClassToken,
    DenoiserState,
    NoiseSchedule,
    cfg_epsilon,
    ddim_invert,
    ddim_sample,
    forward_noising,
    learn_class_token,
    train_denoiser,
)
from taskaug.classifier import (
    ClassifierState,
    ClassifierTrainConfig,
    evaluate,
    features,
    per_sample_loss,
    train_weighted,
)
from taskaug.todv import TodvConfig, WeightNet, meta_update, predict_weights, run_todv, virtual_classifier_step
from taskaug.mlco import DpoConfig, PreferencePair, build_preference_pairs, dpo_loss, run_mlco, score_samples
from taskaug.ilpo import (
    IlpoConfig,
    PromptState,
    generate_high_utility,
    optimize_noise,
    optimize_prompt,
    semantic_regularizer,
)
from taskaug.analysis import (
    InfluenceReport,
    influence_scores,
    intra_class_diversity,
    loo_oracle,
    weight_histogram,
)

__version__ = "0.1.0"
