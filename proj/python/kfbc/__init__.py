"""Keyframe-weighted behavioral cloning.

Thin wrappers over the C++ core: structured values come back as dicts,
configs may be passed as dicts or JSON text.
"""

import json

from . import _kfbc
from ._kfbc import (
    ConfigError,
    DataError,
    IoError,
    NumericError,
    ParseError,
    ShapeError,
    UsageError,
    actfreq_weights,
    bcpd_changepoint_probabilities,
    softmax_weights,
    step_weights,
)

__all__ = [
    "ConfigError", "DataError", "IoError", "NumericError", "ParseError", "ShapeError",
    "UsageError", "ToyCar", "actfreq_weights", "bcpd_changepoint_probabilities",
    "collect_demonstrations", "config_hash", "copycat_condition", "run_experiment",
    "score_keyframes", "softmax_weights", "step_weights",
]


def _text(doc):
    if doc is None:
        return ""
    return doc if isinstance(doc, str) else json.dumps(doc)


class ToyCar:
    """Traffic-light driving env. Observations are partial: position, light, light position."""

    def __init__(self, config=None):
        self._env = _kfbc.ToyCar(_text(config))

    def reset(self, seed=0):
        return self._env.reset(seed)

    def step(self, action):
        obs, reward, done, events = self._env.step(float(action))
        return obs, reward, done, json.loads(events)

    @property
    def state(self):
        return json.loads(self._env.state_json())

    def expert_action(self):
        return self._env.expert_action()


def collect_demonstrations(episodes, noise_rate=0.1, seed=0, config=None):
    return json.loads(_kfbc.collect_demonstrations(_text(config), episodes, noise_rate, seed))


def score_keyframes(trajectories, copycat=None):
    """Per-sample copycat error (APE) with cross-validation across trajectories."""
    return json.loads(_kfbc.score_keyframes(json.dumps(trajectories), _text(copycat)))


def copycat_condition(eps_cp, reference_mse):
    return json.loads(_kfbc.copycat_condition(eps_cp, reference_mse))


def config_hash(config):
    return _kfbc.config_hash(_text(config))


def run_experiment(config, out=None, jobs=1):
    """Collect data, train and evaluate every method x seed; returns the aggregate and run list."""
    return json.loads(_kfbc.run_experiment(_text(config), str(out or ""), jobs))
