"""Momentum-contrast pretraining for sonar snippets, with a from-scratch numpy autodiff engine.

Modules: ``tensor`` (autodiff), ``backbone`` (residual networks), ``sonargen``
(synthetic scenes and datasets), ``chipper`` (energy/RX detectors), ``augment``,
``moco`` (pretraining), ``downstream`` (features, SVM, supervised baseline,
metrics) and ``harness`` (runs, sweeps, reports). ``python -m mocosas`` is the CLI.
"""

__version__ = "0.1.0"
