"""Activation recording, PCA, and success/occlusion result tables."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import VMDNNConfig
from .envtask import (DeskEnv, DeskGeometry, TeacherModel, evaluate, occlusion_points, restyle,
                      sample_trials)
from .errors import ConfigurationError
from .network import ParameterSet, run_closed_loop_many

# canonical layer order of an ActivationTrace
LAYERS = ("V_F", "V_S", "PFC", "M_S", "M_F")
_STATE_FIELD = {"V_F": "v_vf", "V_S": "v_vs", "PFC": "y_pfc", "M_S": "y_ms", "M_F": "y_mf"}

TABLE_FIELDS = ("condition", "vision_mode", "pfc_mode", "split", "seed", "n", "success", "confusion", "other")
PCA_FIELDS = ("trial", "step", "layer", "pc1", "pc2", "pc3")


class NetworkModel:
    """A trained network wrapped with the same ``rollout`` interface as :class:`TeacherModel`."""

    def __init__(self, cfg: VMDNNConfig, theta: ParameterSet):
        self.cfg = cfg
        self.theta = theta

    def rollout(self, trials, geometry=None, occlusions=None, record_states=False):
        geo = geometry or DeskGeometry()
        if not trials:
            return []
        horizon = trials[0].horizon
        if any(t.horizon != horizon for t in trials):
            return [self.rollout([t], geo, [o], record_states)[0]
                    for t, o in zip(trials, occlusions or [None] * len(trials))]
        envs = [DeskEnv(t, geo) for t in trials]
        return run_closed_loop_many(self.cfg, self.theta, envs, horizon, occlusions, record_states)


def as_model(obj):
    if hasattr(obj, "rollout"):
        return obj
    cfg, theta = obj
    return NetworkModel(cfg, theta)


# ------------------------------------------------------------ activations


@dataclass
class ActivationTrace:
    """Per-layer activations ``[trials, steps, width]`` plus one metadata dict per trial.

    Feature-map layers are flattened map-major (map, row, column).
    """

    layers: dict
    meta: list = field(default_factory=list)

    @property
    def n_trials(self):
        return len(self.meta)

    @property
    def horizon(self):
        return next(iter(self.layers.values())).shape[1]

    def width(self, layer):
        return self.layers[layer].shape[2]


def record(cfg: VMDNNConfig, theta: ParameterSet, trials, geometry=None, occlusion=None):
    """Closed-loop rollouts with every layer's activation captured at every step."""
    onsets = occlusion if isinstance(occlusion, (list, tuple)) else [occlusion] * len(trials)
    trajs = NetworkModel(cfg, theta).rollout(list(trials), geometry, onsets, record_states=True)
    layers = {}
    for name in LAYERS:
        attr = _STATE_FIELD[name]
        layers[name] = np.array([[getattr(s, attr).ravel() for s in tj.states] for tj in trajs])
    meta = [{
        "gesture": tr.gesture, "target_kind": tr.target.kind,
        "target_x": tr.target.x, "target_y": tr.target.y,
        "split": tr.split, "occlusion_onset": on,
        "vision_mode": cfg.vision_mode, "pfc_mode": cfg.pfc_mode,
    } for tr, on in zip(trials, onsets)]
    return ActivationTrace(layers, meta)


@dataclass
class PCAResult:
    components: np.ndarray  # [k, d], orthonormal rows
    ratios: np.ndarray      # explained-variance ratio of every dimension, descending
    mean: np.ndarray
    scores: np.ndarray      # projections, leading shape of the input plus k

    def project(self, x):
        return (np.asarray(x) - self.mean) @ self.components.T


def pca(data, layer=None, k=3):
    """Principal components of pooled observations.

    ``data`` is an :class:`ActivationTrace` (with ``layer``) or an array whose
    last axis holds the features.  Each component is signed so that its
    largest-magnitude loading is positive.
    """
    x = data.layers[layer] if isinstance(data, ActivationTrace) else np.asarray(data, dtype=np.float64)
    lead = x.shape[:-1]
    d = x.shape[-1]
    obs = x.reshape(-1, d)
    if k < 1 or k > d:
        raise ConfigurationError(f"k={k} outside 1..{d} for {d}-dimensional data")
    if obs.shape[0] < k + 1:
        raise ConfigurationError(f"need at least {k + 1} observations, got {obs.shape[0]}")
    mean = obs.mean(axis=0)
    xc = obs - mean
    cov = xc.T @ xc / (obs.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    ratios = evals / total if total > 0 else np.zeros_like(evals)
    comps = evecs[:, :k].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    scores = (xc @ comps.T).reshape(lead + (k,))
    return PCAResult(comps, ratios, mean, scores)


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def occlusion_pc_correlation(cfg, theta, trials, onset, layer, k=3, geometry=None):
    """Per-PC Pearson r between occluded and intact PCA scores after ``onset``.

    Components are fitted on the intact rollouts; both rollouts of each
    trial are projected onto them and the post-onset steps of all trials
    are pooled (paired step by step within each trial).
    """
    intact = record(cfg, theta, trials, geometry)
    occluded = record(cfg, theta, trials, geometry, occlusion=onset)
    fit = pca(intact, layer, k)
    a = fit.project(intact.layers[layer])[:, onset:]
    b = fit.project(occluded.layers[layer])[:, onset:]
    return np.array([pearson(a[..., i].ravel(), b[..., i].ravel()) for i in range(k)])


# ----------------------------------------------------------------- tables


@dataclass
class ResultRow:
    condition: str
    vision_mode: str
    pfc_mode: str
    split: str
    seed: int
    n: int
    n_success: int
    n_confusion: int

    @property
    def n_other(self):
        return self.n - self.n_success - self.n_confusion

    @property
    def success(self):
        return self.n_success / self.n

    @property
    def confusion(self):
        return self.n_confusion / self.n

    @property
    def other(self):
        return self.n_other / self.n

    @property
    def confusion_share(self):
        """Fraction of failures that grasped the wrong object (0 when nothing failed)."""
        failed = self.n - self.n_success
        return self.n_confusion / failed if failed else 0.0


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def select(self, **match):
        return ResultsTable([r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())])

    def mean(self, attr):
        vals = [getattr(r, attr) for r in self.rows]
        return float(np.mean(vals)) if vals else float("nan")

    def pooled(self, attr):
        """Rate pooled over rows, weighting each by its trial count."""
        n = sum(r.n for r in self.rows)
        return sum(getattr(r, "n_" + attr) for r in self.rows) / n if n else float("nan")


def evaluation_sets(train_trials, n, seed, geometry=None, splits=("TR", "OBJ", "SUB", "OBJxSUB")):
    """Trial lists per split.

    TR reuses the training trials and SUB replays them with the held-out
    subject; OBJ and OBJxSUB are freshly drawn with a seed-derived generator.
    """
    geo = geometry or DeskGeometry()
    rng = np.random.default_rng([seed, 7919])
    out = {}
    for split in splits:
        if split == "TR":
            out[split] = list(train_trials)
        elif split == "SUB":
            out[split] = [restyle(t) for t in train_trials]
        else:
            out[split] = sample_trials(n, rng, split, geo)
    return out


def _condition_parts(cond, model):
    cfg = getattr(model, "cfg", None)
    if cfg is not None:
        return cfg.vision_mode, cfg.pfc_mode
    if "+" in cond:
        return tuple(cond.split("+", 1))
    return "-", "-"


def _score(model, trials, geo, onset):
    trajs = model.rollout(trials, geo, [onset] * len(trials))
    labels = [evaluate(tj, tr, geo).label for tj, tr in zip(trajs, trials)]
    return labels.count("SUCCESS"), labels.count("FAILURE_CONFUSION")


def _job(args):
    cond, seed, model, split, trials, geo, onset = args
    return cond, seed, split, onset, _score(model, trials, geo, onset)


def _jobs_to_table(jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    table = ResultsTable()
    for (cond, seed, split, onset, (ns, nc)), job in zip(results, jobs):
        vm, pm = _condition_parts(cond, job[2])
        table.rows.append(ResultRow(cond, vm, pm, split, seed, len(job[4]), ns, nc))
    return table


def _normalise(models):
    return {cond: {seed: as_model(m) for seed, m in by_seed.items()} for cond, by_seed in models.items()}


def success_table(models, eval_sets, geometry=None, workers=1):
    """Closed-loop success per (condition, seed, split).

    ``models`` maps a condition label to ``{seed: model}``, where a model is a
    ``(cfg, theta)`` pair or anything with a ``rollout`` method (e.g.
    :class:`TeacherModel`).  ``eval_sets`` maps split to a trial list, or
    seed to such a mapping when each seed has its own trial sets.
    """
    geo = geometry or DeskGeometry()
    models = _normalise(models)
    jobs = []
    for cond, by_seed in models.items():
        for seed, model in by_seed.items():
            sets = eval_sets[seed] if seed in eval_sets else eval_sets
            for split, trials in sets.items():
                jobs.append((cond, seed, model, split, trials, geo, None))
    return _jobs_to_table(jobs, workers)


def occlusion_label(split, onset):
    return f"{split}/occ={'none' if onset is None else onset}"


def occlusion_table(models, trials, onsets=None, geometry=None, workers=1, split="TR"):
    """Success per occlusion onset (plus the unoccluded baseline) on one trial set.

    ``trials`` is a list, or a ``{seed: list}`` mapping.  Onsets default to
    :func:`occlusion_points` of the first trial.
    """
    geo = geometry or DeskGeometry()
    models = _normalise(models)
    jobs = []
    for cond, by_seed in models.items():
        for seed, model in by_seed.items():
            tset = trials[seed] if isinstance(trials, dict) else trials
            points = list(onsets) if onsets is not None else occlusion_points(tset[0], geo)
            for onset in [None] + points:
                jobs.append((cond, seed, model, occlusion_label(split, onset), tset, geo, onset))
    return _jobs_to_table(jobs, workers)


# -------------------------------------------------------------------- csv


def export_csv(obj, path, layer=None):
    """Write a :class:`ResultsTable` or a PCA score array to CSV.

    Tables use ``condition,vision_mode,pfc_mode,split,seed,n,success,confusion,other``
    with rates to four decimals.  PCA scores (a :class:`PCAResult` with
    ``[trials, steps, k>=3]`` scores, and ``layer`` naming the layer) use
    ``trial,step,layer,pc1,pc2,pc3``.
    """
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(obj, PCAResult):
            if layer is None:
                raise ValueError("layer name required for PCA export")
            w.writerow(PCA_FIELDS)
            s = obj.scores
            if s.ndim != 3 or s.shape[2] < 3:
                raise ValueError("PCA export needs [trials, steps, >=3] scores")
            for i in range(s.shape[0]):
                for t in range(s.shape[1]):
                    w.writerow([i, t, layer] + [f"{v:.6f}" for v in s[i, t, :3]])
        else:
            w.writerow(TABLE_FIELDS)
            for r in obj:
                w.writerow([r.condition, r.vision_mode, r.pfc_mode, r.split, r.seed, r.n,
                            f"{r.success:.4f}", f"{r.confusion:.4f}", f"{r.other:.4f}"])
    return path


def read_table_csv(path):
    """Inverse of the table form of :func:`export_csv`."""
    table = ResultsTable()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TABLE_FIELDS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for row in reader:
            n = int(row["n"])
            table.rows.append(ResultRow(
                row["condition"], row["vision_mode"], row["pfc_mode"], row["split"], int(row["seed"]), n,
                round(float(row["success"]) * n), round(float(row["confusion"]) * n)))
    return table


def read_pca_csv(path):
    """Return ``(scores[trials, steps, 3], layer)`` from a PCA CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros((0, 0, 3)), None
    nt = max(int(r["trial"]) for r in rows) + 1
    ns = max(int(r["step"]) for r in rows) + 1
    out = np.zeros((nt, ns, 3))
    for r in rows:
        out[int(r["trial"]), int(r["step"])] = [float(r["pc1"]), float(r["pc2"]), float(r["pc3"])]
    return out, rows[0]["layer"]


__all__ = [
    "LAYERS", "ActivationTrace", "PCAResult", "ResultRow", "ResultsTable", "NetworkModel", "TeacherModel",
    "record", "pca", "pearson", "occlusion_pc_correlation", "evaluation_sets", "success_table",
    "occlusion_table", "occlusion_label", "export_csv", "read_table_csv", "read_pca_csv", "as_model",
]
