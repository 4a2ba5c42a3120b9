"""Run configuration from flat ``section.key = value`` files.

The file is TOML restricted to dotted keys at top level, e.g.::

    distill.gamma = 1.0
    penalty.kind = "sparse_recoding"
    schedule.steps = [2500, 4000]

Unknown keys are rejected. ``aggregation.gamma`` is an alias of
``distill.gamma`` and ``penalty.lambda`` of ``distill.lambda``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import tomli

from .data import DatasetSource, DistortionSpec
from .distill import DistillConfig
from .errors import ConfigError

# key -> (type, default)
SCHEMA = {
    "run.seed": (int, 0),
    "run.teacher_preset": (str, "T6"),
    "run.student_preset": (str, "S2"),
    "run.teacher_ckpt": (str, ""),
    "data.kind": (str, "mnist"),
    "data.root": (str, "data/mnist"),
    "data.subset": (int, 5000),
    "data.test_subset": (int, 0),
    "data.seed": (int, 0),
    "distortion.apply": (bool, False),
    "distortion.sigma": (float, 1.0),
    "distortion.seed": (int, 0),
    "distortion.clip": (bool, True),
    "teacher.max_iter": (int, 3000),
    "teacher.lr": (float, 0.1),
    "distill.gamma": (float, 1.0),
    "distill.lambda": (float, 1.0),
    "distill.temperature": (float, 4.0),
    "distill.max_iter": (int, 5000),
    "distill.interleave": (list, [1, 1]),
    "distill.kd_target": (str, "teacher"),
    "distill.batch_size": (int, 32),
    "distill.log_every": (int, 100),
    "aggregation.c": (int, 3),
    "penalty.kind": (str, "sparse_recoding"),
    "penalty.ema_beta": (float, 0.9),
    "penalty.additive": (bool, False),
    "penalty.baseline_weight": (float, 5e-4),
    "optim.lr1": (float, 0.01),
    "optim.lr2": (float, 0.001),
    "optim.momentum": (float, 0.9),
    "optim.weight_decay": (float, 1e-5),
    "schedule.steps": (list, None),
}
ALIASES = {"aggregation.gamma": "distill.gamma", "penalty.lambda": "distill.lambda"}


def _flatten(tree, prefix=""):
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _coerce(key, value):
    kind = SCHEMA[key][0]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    return value


def parse_flat(text):
    """Parse config text into a canonical flat dict (defaults not applied)."""
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    flat = {}
    for key, value in _flatten(tree).items():
        canon = ALIASES.get(key, key)
        if canon not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(canon, value)
        if canon in flat and flat[canon] != value:
            raise ConfigError(f"{key} conflicts with {canon} ({value!r} vs {flat[canon]!r})")
        flat[canon] = value
    return flat


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(parse_flat(fh.read()))

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise KeyError(key)
        return self.values.get(key, SCHEMA[key][1])

    def set(self, key, value):
        self.values[key] = _coerce(key, value)

    def snapshot(self):
        """Every key with its effective value; stored in checkpoints."""
        return {k: self[k] for k in sorted(SCHEMA)}

    def dataset_source(self):
        return DatasetSource(kind=self["data.kind"], root=self["data.root"],
                             subset=self["data.subset"] or None,
                             test_subset=self["data.test_subset"] or None,
                             seed=self["data.seed"])

    def distortion(self):
        return DistortionSpec(sigma=self["distortion.sigma"], seed=self["distortion.seed"],
                              clip=(0.0, 1.0) if self["distortion.clip"] else None)

    def distill_config(self):
        lr1, lr2 = self["optim.lr1"], self["optim.lr2"]
        steps = self["schedule.steps"]
        lr1_steps = lr2_steps = None
        if steps is not None:
            if not all(isinstance(s, int) for s in steps):
                raise ConfigError(f"schedule.steps must be a list of iterations, got {steps!r}")
            lr1_steps = [(s, lr1 * 0.1 ** (i + 1)) for i, s in enumerate(steps)]
            lr2_steps = [(s, lr2 * 0.1 ** (i + 1)) for i, s in enumerate(steps)]
        return DistillConfig(
            gamma=self["distill.gamma"], lam=self["distill.lambda"],
            temperature=self["distill.temperature"], max_iter=self["distill.max_iter"],
            interleave=tuple(self["distill.interleave"]), lr1=lr1, lr2=lr2,
            lr1_steps=lr1_steps, lr2_steps=lr2_steps, momentum=self["optim.momentum"],
            weight_decay=self["optim.weight_decay"], seed=self["run.seed"],
            penalty=self["penalty.kind"], ema_beta=self["penalty.ema_beta"],
            additive=self["penalty.additive"],
            baseline_weight=self["penalty.baseline_weight"], c=self["aggregation.c"],
            batch_size=self["distill.batch_size"], kd_target=self["distill.kd_target"],
            log_every=self["distill.log_every"])
