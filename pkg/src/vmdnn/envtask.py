"""Desk-scale synthetic gesture-to-grasp task.

A trial opens with a short gesture animation that names one of two objects
(the LEFT/RIGHT one or the TALL/WIDE one).  Afterwards the agent looks at the
workspace, shifts gaze to the target, reaches with a slew-limited 2-D
effector and closes its grasp.  Frames after the gesture depend only on the
object layout and the agent's pose, never on the gesture, so a memoryless
policy cannot beat chance on the target choice.

Coordinates are normalised workspace units: x and y in [0, 1], with x growing
to the right and y growing downwards in rendered images.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .numerics import SoftmaxGroupSpec, decode_analog, encode_analog

GESTURES = ("LEFT", "RIGHT", "TALL", "WIDE")
KINDS = ("TALL", "WIDE")
SPLITS = ("TR", "OBJ", "SUB", "OBJxSUB")
ORIENTATIONS = (-45.0, -22.5, 0.0, 22.5, 45.0)

POSE_FIELDS = ("gaze_x", "gaze_y", "arm_x", "arm_y", "grasp", "foveation")
POSE_RANGES = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), (0.0, 1.0), (1.0, 10.0), (1.0, 10.0))

# (speed, amplitude, phase) of each procedural gesture performer
TRAIN_SUBJECTS = ((1.0, 0.32, 0.0), (0.85, 0.28, 0.05), (1.15, 0.36, -0.05))
NOVEL_SUBJECT = (0.92, 0.34, 0.08)

SUCCESS, FAILURE_CONFUSION, FAILURE_OTHER = "SUCCESS", "FAILURE_CONFUSION", "FAILURE_OTHER"

_BACKGROUND = -1.0
_TABLE = -0.6
_INTENSITY = {"TALL": 1.0, "WIDE": 0.25}
_EFFECTOR = 0.6


@dataclass(frozen=True)
class DeskGeometry:
    """Frame size, phase timings and scoring constants of the desk task."""

    height: int = 12
    width: int = 16
    gesture_len: int = 10
    horizon: int = 36
    observe_dwell: int = 3
    attend_dwell: int = 3
    reach_len: int = 12
    grasp_len: int = 6
    success_radius: float = 0.08
    slew: float = 0.1
    grasp_threshold: float = 8.0
    min_fov_fraction: float = 0.3
    supersample: int = 3
    grid_x: tuple = (0.2, 0.5, 0.8)
    grid_y: tuple = (0.4, 0.6)
    object_half: tuple = (0.035, 0.075)
    effector_radius: float = 0.03
    home_gaze: tuple = (0.5, 0.05)
    park_arm: tuple = (0.5, 0.0)

    def __post_init__(self):
        g = self.gesture_len
        if self.reach_onset(g) + self.reach_len > self.horizon - self.grasp_len:
            raise ConfigurationError("horizon too short for observe/attend/reach/grasp phases")

    @property
    def grid(self):
        return tuple((x, y) for y in self.grid_y for x in self.grid_x)

    @property
    def pose_spec(self):
        return SoftmaxGroupSpec(len(POSE_FIELDS), 10, POSE_RANGES, 0.05)

    def attend_onset(self, g):
        return g + self.observe_dwell

    def reach_onset(self, g):
        return self.attend_onset(g) + self.attend_dwell


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    x: float
    y: float
    orientation: float


@dataclass(frozen=True)
class TrialSpec:
    """One task instance.

    ``objects`` holds one TALL and one WIDE object; gesture-free trials used
    for grasp pre-training hold a single object and ``gesture_len == 0``.
    """

    gesture: str | None
    subject: int
    style: tuple
    objects: tuple
    gesture_len: int
    horizon: int
    split: str = "TR"

    def target_index(self):
        if len(self.objects) == 1:
            return 0
        a, b = self.objects
        if self.gesture == "LEFT":
            return 0 if a.x < b.x else 1
        if self.gesture == "RIGHT":
            return 0 if a.x > b.x else 1
        return 0 if a.kind == self.gesture else 1

    @property
    def target(self):
        return self.objects[self.target_index()]

    @property
    def distractor(self):
        return None if len(self.objects) == 1 else self.objects[1 - self.target_index()]

    def mirrored(self):
        swap = {"LEFT": "RIGHT", "RIGHT": "LEFT"}
        objs = tuple(ObjectSpec(o.kind, 1.0 - o.x, o.y, -o.orientation) for o in self.objects)
        return replace(self, gesture=swap.get(self.gesture, self.gesture), objects=objs)

    def to_dict(self):
        d = asdict(self)
        d["style"] = list(self.style)
        d["objects"] = [asdict(o) for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["style"] = tuple(d["style"])
        d["objects"] = tuple(ObjectSpec(**o) for o in d["objects"])
        return cls(**d)


def _objects_on_grid(rng, geo):
    cells = geo.grid
    while True:
        i, j = rng.choice(len(cells), size=2, replace=False)
        if cells[i][0] != cells[j][0]:
            break
    kinds = list(KINDS) if rng.random() < 0.5 else list(reversed(KINDS))
    return tuple(
        ObjectSpec(kinds[k], cells[c][0], cells[c][1], ORIENTATIONS[rng.integers(len(ORIENTATIONS))])
        for k, c in enumerate((i, j)))


def _objects_random(rng, geo):
    x0, x1 = min(geo.grid_x), max(geo.grid_x)
    y0, y1 = min(geo.grid_y) - 0.05, max(geo.grid_y) + 0.05
    while True:
        xa, xb = rng.uniform(x0, x1, size=2)
        if abs(xa - xb) >= 0.2:
            break
    kinds = list(KINDS) if rng.random() < 0.5 else list(reversed(KINDS))
    return tuple(
        ObjectSpec(kinds[k], float(x), float(rng.uniform(y0, y1)), float(rng.uniform(-45.0, 45.0)))
        for k, x in enumerate((xa, xb)))


def sample_trial(rng, split="TR", geometry=None, gesture=None):
    """Draw one trial for a split.

    TR and SUB place objects on the training grid; OBJ and OBJxSUB draw
    continuous positions and orientations.  SUB and OBJxSUB use the held-out
    gesture performer.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    geo = geometry or DeskGeometry()
    if gesture is None:
        gesture = GESTURES[rng.integers(len(GESTURES))]
    if split in ("SUB", "OBJxSUB"):
        subject, style = -1, NOVEL_SUBJECT
    else:
        subject = int(rng.integers(len(TRAIN_SUBJECTS)))
        style = TRAIN_SUBJECTS[subject]
    objects = _objects_random(rng, geo) if split in ("OBJ", "OBJxSUB") else _objects_on_grid(rng, geo)
    return TrialSpec(gesture, subject, tuple(style), objects, geo.gesture_len, geo.horizon, split)


def sample_trials(n, rng, split="TR", geometry=None):
    """``n`` trials with gesture classes as balanced as ``n`` allows, in shuffled order."""
    classes = [GESTURES[i % len(GESTURES)] for i in range(n)]
    order = rng.permutation(n)
    return [sample_trial(rng, split, geometry, gesture=classes[k]) for k in order]


def restyle(trial, split="SUB"):
    """Same object layout shown with the held-out performer."""
    return replace(trial, subject=-1, style=tuple(NOVEL_SUBJECT), split=split)


def gestureless_trial(rng, geometry=None):
    """Single-object trial without a gesture phase (grasp pre-training)."""
    geo = geometry or DeskGeometry()
    obj = _objects_on_grid(rng, geo)[int(rng.integers(2))]
    return TrialSpec(None, -1, (), (obj,), 0, geo.horizon - geo.gesture_len, "TR")


# ---------------------------------------------------------------- rendering


def _pixel_offsets(geo):
    """Sub-pixel sample offsets from the image centre in units of image width."""
    ss = geo.supersample
    sub = (np.arange(ss) + 0.5) / ss
    cols = (np.arange(geo.width)[:, None] + sub[None, :]).ravel() - geo.width / 2
    rows = (np.arange(geo.height)[:, None] + sub[None, :]).ravel() - geo.height / 2
    return rows / geo.width, cols / geo.width


def _downsample(img, geo):
    ss = geo.supersample
    return img.reshape(geo.height, ss, geo.width, ss).mean(axis=(1, 3))


def _gesture_progress(style, t, g):
    speed, _, phase = style
    return min(max(speed * (t + 1) / g + phase, 0.0), 1.0)


def render_gesture(gesture, style, t, geometry=None):
    """Gesture animation frame: a bright dot or bar on a dark screen."""
    geo = geometry or DeskGeometry()
    ys, xs = _pixel_offsets(geo)
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    p = _gesture_progress(style, t, geo.gesture_len)
    amp = style[1]
    if gesture in ("LEFT", "RIGHT"):
        cx = -amp * p if gesture == "LEFT" else amp * p
        d2 = (X - cx) ** 2 + Y ** 2
        width = 0.07
    else:
        half = 0.05 + amp * p * (0.75 if gesture == "TALL" else 1.0)
        along, across = (Y, X) if gesture == "TALL" else (X, Y)
        excess = np.maximum(np.abs(along) - half, 0.0)
        d2 = excess ** 2 + across ** 2
        width = 0.045
    img = _BACKGROUND + 2.0 * np.exp(-d2 / (2 * width * width))
    return _downsample(img, geo)


def render_workspace(trial, pose, geometry=None):
    """View of the table through a camera centred on the gaze point.

    The field of view spans the whole workspace width at foveation 1 and
    shrinks linearly to ``min_fov_fraction`` of it at foveation 10.
    """
    geo = geometry or DeskGeometry()
    gx, gy, ax, ay, _, fov = pose
    level = (min(max(fov, 1.0), 10.0) - 1.0) / 9.0
    view = 1.0 - level * (1.0 - geo.min_fov_fraction)
    ys, xs = _pixel_offsets(geo)
    Y, X = np.meshgrid(gy + ys * view, gx + xs * view, indexing="ij")
    img = np.full(X.shape, _BACKGROUND)
    img[(X >= 0) & (X <= 1) & (Y >= 0) & (Y <= 1)] = _TABLE
    hw, hl = geo.object_half
    for obj in trial.objects:
        a = math.radians(obj.orientation)
        c, s = math.cos(a), math.sin(a)
        dx, dy = X - obj.x, Y - obj.y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        half_x, half_y = (hw, hl) if obj.kind == "TALL" else (hl, hw)
        img[(np.abs(u) <= half_x) & (np.abs(v) <= half_y)] = _INTENSITY[obj.kind]
    img[(X - ax) ** 2 + (Y - ay) ** 2 <= geo.effector_radius ** 2] = _EFFECTOR
    return _downsample(img, geo)


def render(trial, pose, t, geometry=None):
    """Frame shown at step ``t`` given the pose the agent holds at that moment."""
    geo = geometry or DeskGeometry()
    if t >= trial.horizon:
        raise ValueError("t beyond trial horizon")
    if t < trial.gesture_len:
        return render_gesture(trial.gesture, trial.style, t, geo)
    return render_workspace(trial, pose, geo)


# ------------------------------------------------------------ teacher, env


def home_pose(geometry=None):
    geo = geometry or DeskGeometry()
    return np.array([geo.home_gaze[0], geo.home_gaze[1], geo.park_arm[0], geo.park_arm[1], 1.0, 1.0])


def teacher_policy(trial, t, geometry=None):
    """Scripted tutor pose at step ``t``."""
    geo = geometry or DeskGeometry()
    g = trial.gesture_len
    pose = home_pose(geo)
    if t < g:
        return pose
    tgt = trial.target
    if t < geo.attend_onset(g):
        pose[0:2] = (0.5, 0.5)
    else:
        pose[0:2] = (tgt.x, tgt.y)
    r0 = geo.reach_onset(g)
    if t >= r0:
        s = min((t - r0 + 1) / geo.reach_len, 1.0)
        pose[2] = geo.park_arm[0] + s * (tgt.x - geo.park_arm[0])
        pose[3] = geo.park_arm[1] + s * (tgt.y - geo.park_arm[1])
        pose[5] = 1.0 + 9.0 * s
    k = t - (trial.horizon - geo.grasp_len)
    if k >= 0:
        pose[4] = 1.0 + 9.0 * (k + 1) / geo.grasp_len
    return pose


def teacher_poses(trial, geometry=None):
    return np.array([teacher_policy(trial, t, geometry) for t in range(trial.horizon)])


class DeskEnv:
    """Closed-loop desk: gaze, foveation and grasp follow commands at once, the arm slews."""

    def __init__(self, trial, geometry=None):
        self.trial = trial
        self.geometry = geometry or DeskGeometry()
        self.pose = home_pose(self.geometry)

    def reset(self):
        self.pose = home_pose(self.geometry)

    def render(self, t):
        return render(self.trial, self.pose, t, self.geometry)

    def pose_vector(self):
        return self.pose.copy()

    def step(self, action):
        self.pose = step(self.pose, action, self.geometry)


def step(pose, action, geometry=None):
    """Apply a commanded pose; the effector moves at most ``slew`` per step."""
    geo = geometry or DeskGeometry()
    lo = np.array([r[0] for r in POSE_RANGES])
    hi = np.array([r[1] for r in POSE_RANGES])
    cmd = np.clip(np.asarray(action, dtype=np.float64), lo, hi)
    new = cmd.copy()
    d = cmd[2:4] - pose[2:4]
    dist = float(np.hypot(d[0], d[1]))
    if dist > geo.slew:
        new[2:4] = pose[2:4] + d * (geo.slew / dist)
    return new


# ------------------------------------------------------------------ scoring


@dataclass
class Outcome:
    label: str
    distance: float
    grasp: float


def score_pose(trial, final_pose, geometry=None):
    geo = geometry or DeskGeometry()
    ax, ay, grasp = final_pose[2], final_pose[3], final_pose[4]

    def hit(obj):
        return math.hypot(ax - obj.x, ay - obj.y) <= geo.success_radius and grasp >= geo.grasp_threshold

    tgt = trial.target
    dist = math.hypot(ax - tgt.x, ay - tgt.y)
    if hit(tgt):
        return Outcome(SUCCESS, dist, float(grasp))
    other = trial.distractor
    if other is not None and hit(other):
        return Outcome(FAILURE_CONFUSION, dist, float(grasp))
    return Outcome(FAILURE_OTHER, dist, float(grasp))


def evaluate(trajectory, trial, geometry=None):
    """Score a finished rollout by the final effector position and grasp level."""
    poses = trajectory.poses if getattr(trajectory, "poses", None) is not None else trajectory.actions
    return score_pose(trial, poses[-1], geometry)


def occlusion_points(trial, geometry=None):
    """Occlusion onsets: workspace view, gaze shift, target in view, reach onset, mid-reach."""
    geo = geometry or DeskGeometry()
    g = trial.gesture_len
    attend = geo.attend_onset(g)
    reach = geo.reach_onset(g)
    return [g, attend, attend + 1, reach, reach + geo.reach_len // 2]


# ----------------------------------------------------------------- datasets


def trial_sample(trial, geometry=None):
    """Teacher-forced sequence: the frame at ``t`` shows the pose commanded at ``t-1``."""
    from .training import SequenceSample

    geo = geometry or DeskGeometry()
    poses = teacher_poses(trial, geo)
    shown = np.vstack([home_pose(geo)[None], poses[:-1]])
    frames = np.array([render(trial, shown[t], t, geo) for t in range(trial.horizon)])
    targets = encode_analog(poses, geo.pose_spec)
    return SequenceSample(frames, targets, trial)


def make_dataset(n, rng, split="TR", gestureless=False, geometry=None, trials=None):
    """Teacher-forced samples for ``n`` freshly drawn trials (or the given ``trials``)."""
    geo = geometry or DeskGeometry()
    if trials is None:
        if gestureless:
            trials = [gestureless_trial(rng, geo) for _ in range(n)]
        else:
            trials = sample_trials(n, rng, split, geo)
    return [trial_sample(tr, geo) for tr in trials]


def make_gesture_clips(trials, geometry=None):
    """Gesture-phase frames of each trial labelled with the gesture class index."""
    from .training import GestureClip

    geo = geometry or DeskGeometry()
    return [GestureClip(np.array([render_gesture(tr.gesture, tr.style, t, geo) for t in range(tr.gesture_len)]),
                        GESTURES.index(tr.gesture)) for tr in trials]


def decode_targets(sample, geometry=None):
    geo = geometry or DeskGeometry()
    return decode_analog(sample.targets, geo.pose_spec)


def write_dataset(path, samples, seed=None, split=None, geometry=None):
    """Write ``manifest.json`` plus raw little-endian float64 frames/targets per trial."""
    geo = geometry or DeskGeometry()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    spec = geo.pose_spec
    entries = []
    for i, s in enumerate(samples):
        name = f"trial_{i:04d}"
        d = path / name
        d.mkdir(exist_ok=True)
        s.frames.astype("<f8").tofile(d / "frames.f64")
        s.targets.astype("<f8").tofile(d / "targets.f64")
        entries.append({"dir": name, "length": len(s), "trial": s.meta.to_dict() if s.meta else None})
    manifest = {
        "format": "vmdnn-dataset", "version": 1, "seed": seed, "split": split,
        "frame_shape": [geo.height, geo.width],
        "codec": {"group_count": spec.group_count, "group_size": spec.group_size,
                  "ranges": [list(r) for r in spec.ranges], "sigma": spec.sigma, "fields": list(POSE_FIELDS)},
        "geometry": _geometry_dict(geo),
        "trials": entries,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path / "manifest.json")
    return path


def read_dataset(path):
    from .training import SequenceSample

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    h, w = manifest["frame_shape"]
    out_n = manifest["codec"]["group_count"] * manifest["codec"]["group_size"]
    samples = []
    for e in manifest["trials"]:
        T = e["length"]
        frames = np.fromfile(path / e["dir"] / "frames.f64", dtype="<f8").reshape(T, h, w)
        targets = np.fromfile(path / e["dir"] / "targets.f64", dtype="<f8").reshape(T, out_n)
        trial = TrialSpec.from_dict(e["trial"]) if e["trial"] else None
        samples.append(SequenceSample(frames, targets, trial))
    return samples, manifest


def _geometry_dict(geo):
    d = asdict(geo)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def geometry_from_dict(d):
    d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    return DeskGeometry(**d)


# ----------------------------------------------------------- scripted agent


class TeacherModel:
    """Stand-in "model" that replays the tutor; ignores every frame."""

    def rollout(self, trials, geometry=None, occlusions=None, record_states=False):
        from .network import Trajectory

        geo = geometry or DeskGeometry()
        out = []
        for trial in trials:
            env = DeskEnv(trial, geo)
            frames, poses = [], []
            for t in range(trial.horizon):
                frames.append(env.render(t))
                env.step(teacher_policy(trial, t, geo))
                poses.append(env.pose_vector())
            poses = np.array(poses)
            out.append(Trajectory(frames=np.array(frames), outputs=encode_analog(teacher_poses(trial, geo), geo.pose_spec),
                                  actions=teacher_poses(trial, geo), poses=poses))
        return out
