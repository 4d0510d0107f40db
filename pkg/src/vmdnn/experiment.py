"""Declarative experiment configuration and the pipeline stages built on it.

An experiment file is JSON with five top-level keys::

    {
      "network":    {"preset": "desk", <VMDNNConfig field overrides>},
      "training":   {"learning_rate", "weight_decay", "epochs", "clip", "init_scale",
                     "report_every", "grasp_epochs", "visual_epochs"},
      "task":       {<DeskGeometry field overrides>, "n_train", "n_eval",
                     "n_gestureless", "data_seed"},
      "experiment": {"seeds", "conditions", "occlusion_onsets", "pca_layers", "pca_onset"},
      "output_dir": "runs/desk"
    }

Every section and key is optional; unknown keys are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONDITIONS, PFC_MODES, VISION_MODES, VMDNNConfig, desk_config, full_config, tiny_config
from .config import validate_config
from .envtask import (GESTURES, POSE_FIELDS, DeskGeometry, TrialSpec, gestureless_trial, make_dataset,
                      render_gesture, sample_trials)
from .errors import ConfigurationError
from .network import init_parameters
from .training import GestureClip, TrainingConfig, pretrain_grasp, pretrain_visual, splice_visual, train

PRESETS = {"desk": desk_config, "full": full_config, "tiny": tiny_config}


@dataclass
class TrainingSection:
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    epochs: int = 400
    clip: float | None = 30.0
    init_scale: float = 2.0
    report_every: int = 10
    grasp_epochs: int = 100
    visual_epochs: int = 60

    def training_config(self, seed, epochs=None):
        return TrainingConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                              epochs=self.epochs if epochs is None else epochs, seed=seed,
                              report_every=self.report_every, clip=self.clip)


@dataclass
class TaskSection:
    geometry: DeskGeometry = field(default_factory=DeskGeometry)
    n_train: int = 40
    n_eval: int = 40
    n_gestureless: int = 40
    data_seed: int = 0


@dataclass
class ExperimentSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    conditions: list = field(default_factory=lambda: [list(c) for c in CONDITIONS])
    occlusion_onsets: list | None = None
    pca_layers: list = field(default_factory=lambda: ["M_S", "M_F"])
    pca_onset: int | None = None


@dataclass
class ExperimentConfig:
    network: VMDNNConfig
    training: TrainingSection = field(default_factory=TrainingSection)
    task: TaskSection = field(default_factory=TaskSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output_dir: str = "runs/desk"
    preset: str = "desk"

    def condition_config(self, vision_mode, pfc_mode):
        return self.network.with_condition(vision_mode, pfc_mode)

    def to_dict(self):
        net = self.network.to_dict()
        net["preset"] = self.preset
        task = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.task.geometry).items()}
        task.update(n_train=self.task.n_train, n_eval=self.task.n_eval,
                    n_gestureless=self.task.n_gestureless, data_seed=self.task.data_seed)
        return {"network": net, "training": asdict(self.training), "task": task,
                "experiment": asdict(self.experiment), "output_dir": self.output_dir}

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _reject_unknown(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in '{section}': {sorted(unknown)}")


def _merge(base, overrides):
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_experiment(raw: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig`; collects every violation."""
    if not isinstance(raw, dict):
        raise ConfigurationError("experiment config must be a JSON object")
    _reject_unknown("top level", raw, ("network", "training", "task", "experiment", "output_dir"))

    net_raw = dict(raw.get("network", {}))
    preset = net_raw.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown network preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]().to_dict()
    _reject_unknown("network", net_raw, base)
    try:
        network = VMDNNConfig.from_dict(_merge(base, net_raw))
    except TypeError as exc:
        raise ConfigurationError(f"network: {exc}") from exc

    tr_raw = raw.get("training", {})
    _reject_unknown("training", tr_raw, [f.name for f in fields(TrainingSection)])
    training = TrainingSection(**tr_raw)

    task_raw = dict(raw.get("task", {}))
    task_keys = [f.name for f in fields(TaskSection) if f.name != "geometry"]
    geo_keys = [f.name for f in fields(DeskGeometry)]
    _reject_unknown("task", task_raw, task_keys + geo_keys)
    geo_kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in task_raw.items() if k in geo_keys}
    try:
        geometry = DeskGeometry(**geo_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"task: {exc}") from exc
    task = TaskSection(geometry=geometry, **{k: v for k, v in task_raw.items() if k in task_keys})

    ex_raw = raw.get("experiment", {})
    _reject_unknown("experiment", ex_raw, [f.name for f in fields(ExperimentSection)])
    experiment = ExperimentSection(**ex_raw)

    exp = ExperimentConfig(network, training, task, experiment, raw.get("output_dir", "runs/desk"), preset)
    problems = validate_experiment(exp)
    if problems:
        raise ConfigurationError("; ".join(problems))
    return exp


def validate_experiment(exp: ExperimentConfig):
    problems = list(validate_config(exp.network))
    net, geo = exp.network, exp.task.geometry
    if net.out_groups != len(POSE_FIELDS):
        problems.append(f"network needs {len(POSE_FIELDS)} output groups (one per pose field), has {net.out_groups}")
    elif exp.preset == "desk":
        spec = geo.pose_spec
        if net.out_group_size != spec.group_size or [tuple(r) for r in net.out_ranges] != list(spec.ranges):
            problems.append("network output codec must match the task pose codec")
    if (net.input_height, net.input_width) != (geo.height, geo.width):
        problems.append(f"network input {net.input_height}x{net.input_width} differs from "
                        f"task frames {geo.height}x{geo.width}")
    t = exp.training
    if not t.learning_rate > 0:
        problems.append("training.learning_rate must be positive")
    if t.weight_decay < 0:
        problems.append("training.weight_decay must be >= 0")
    if t.epochs < 1:
        problems.append("training.epochs must be >= 1")
    if t.clip is not None and not t.clip > 0:
        problems.append("training.clip must be positive or null")
    for name in ("n_train", "n_eval", "n_gestureless"):
        if getattr(exp.task, name) < 1:
            problems.append(f"task.{name} must be >= 1")
    if not exp.experiment.seeds:
        problems.append("experiment.seeds must be non-empty")
    for c in exp.experiment.conditions:
        if len(c) != 2 or c[0] not in VISION_MODES or c[1] not in PFC_MODES:
            problems.append(f"bad condition {c!r}; expected [vision_mode, pfc_mode]")
    return problems


def load_experiment(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    return parse_experiment(raw)


def default_experiment(**overrides) -> ExperimentConfig:
    return parse_experiment(overrides)


def condition_name(vision_mode, pfc_mode):
    return f"{vision_mode}+{pfc_mode}"


# ------------------------------------------------------------ data


def training_trials(exp: ExperimentConfig):
    """The TR trial list, drawn from ``task.data_seed``."""
    rng = np.random.default_rng(exp.task.data_seed)
    return sample_trials(exp.task.n_train, rng, "TR", exp.task.geometry)


def gestureless_trials(exp: ExperimentConfig):
    rng = np.random.default_rng([exp.task.data_seed, 1])
    return [gestureless_trial(rng, exp.task.geometry) for _ in range(exp.task.n_gestureless)]


def gesture_clips(trials, geometry):
    return [GestureClip(np.array([render_gesture(tr.gesture, tr.style, t, geometry)
                                  for t in range(tr.gesture_len)]), GESTURES.index(tr.gesture))
            for tr in trials]


def write_clips(path, clips):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, c in enumerate(clips):
        name = f"clip_{i:04d}.f64"
        c.frames.astype("<f8").tofile(path / name)
        entries.append({"file": name, "label": int(c.label), "shape": list(c.frames.shape)})
    (path / "manifest.json").write_text(json.dumps({"format": "vmdnn-clips", "version": 1,
                                                    "classes": list(GESTURES), "clips": entries}, indent=1))


def read_clips(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return [GestureClip(np.fromfile(path / e["file"], dtype="<f8").reshape(e["shape"]), e["label"])
            for e in manifest["clips"]]


def trials_from_manifest(manifest):
    return [TrialSpec.from_dict(e["trial"]) for e in manifest["trials"]]


# -------------------------------------------------------- training stages


def initial_parameters(exp, cfg, seed):
    return init_parameters(cfg, seed, exp.training.init_scale)


def pretrain(exp, cfg, seed, gestureless, clips, progress=None):
    """Grasp pre-training of the whole network, then visual pre-training, then splice."""
    theta = initial_parameters(exp, cfg, seed)
    grasp = pretrain_grasp(cfg, theta, gestureless,
                           exp.training.training_config(seed, exp.training.grasp_epochs), progress)
    visual = pretrain_visual(cfg, grasp.params, clips,
                             exp.training.training_config(seed, exp.training.visual_epochs))
    return splice_visual(grasp.params, visual.visual), grasp, visual


def train_end_to_end(exp, cfg, seed, samples, theta0=None, progress=None):
    theta0 = initial_parameters(exp, cfg, seed) if theta0 is None else theta0
    return train(cfg, theta0, samples, exp.training.training_config(seed), progress)


def build_samples(trials, geometry):
    return make_dataset(0, None, geometry=geometry, trials=trials)


def run_manifest(exp, command, seeds, extra=None):
    m = {"command": command, "version": __version__, "config_sha256": exp.digest(),
         "seeds": list(seeds), "config": exp.to_dict()}
    if extra:
        m.update(extra)
    return m


__all__ = [
    "ExperimentConfig", "TrainingSection", "TaskSection", "ExperimentSection", "PRESETS",
    "parse_experiment", "validate_experiment", "load_experiment", "default_experiment", "condition_name",
    "training_trials", "gestureless_trials", "gesture_clips", "write_clips", "read_clips",
    "trials_from_manifest", "initial_parameters", "pretrain", "train_end_to_end", "build_samples",
    "run_manifest",
]
