"""Few-shot meta-learning with learned per-step step sizes and a label-free critic.

Subpackages and modules:

* :mod:`metacritic.autodiff` reverse-mode differentiation with higher-order gradients
* :mod:`metacritic.networks` functional classifiers, the critic, parameter sets, checkpoints
* :mod:`metacritic.metalearn` inner/outer loops and meta-updates
* :mod:`metacritic.tasks` episode sampling and synthetic task families
* :mod:`metacritic.harness` experiment running, statistics and reports
"""
from .estimator import MetaCriticClassifier
from .harness import ExperimentConfig, RunResult, ci95, emit_report, run_experiment
from .metalearn import MetaConfig, meta_step
from .tasks import Episode, GaussianBlobs, PatternGlyphs, make_family

__version__ = "0.1.0"

__all__ = [
    "MetaCriticClassifier", "ExperimentConfig", "RunResult", "ci95", "emit_report", "run_experiment",
    "MetaConfig", "meta_step", "Episode", "GaussianBlobs", "PatternGlyphs", "make_family",
]
