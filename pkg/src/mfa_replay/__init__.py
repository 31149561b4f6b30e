"""
mfa-replay: continual unsupervised domain adaptation with feature-driven
generative replay.

A classifier trained on a labeled source domain is adapted to a sequence of
unlabeled target domains, one at a time, without revisiting earlier data.
A conditional GAN, whose discriminator judges the classifier's multi-scale
features, replays images of the earlier domains during every later step.

LAYOUT:
- config.py: runtime settings (environment) and pydantic experiment models
- data/, loaders/: domain datasets, the synthetic toy sequence, disk layout
- models/: classifier, generator, projection discriminator, snapshots
- training/: losses, replay, the four training phases, run drivers
- evaluation/: weighted F1, alignment, clustering, reports and summaries
- segmentation.py: sliding-window segmentation of large images
- persistence/: checkpoint bundles and experiment records
- cli.py: the `mfa-replay` command
"""

__version__ = "1.0.0"

from mfa_replay.config import ExperimentRecipe, RuntimeConfig, TrainingConfig
from mfa_replay.errors import MfaReplayError

__all__ = ["ExperimentRecipe", "MfaReplayError", "RuntimeConfig", "TrainingConfig", "__version__"]
