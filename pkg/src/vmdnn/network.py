"""Parameters, state and forward dynamics of the visuo-motor network.

Layer names used throughout: ``vf``/``vs`` (fast/slow convolutional vision
layers), ``pfc``, ``ms``/``mf`` (slow/fast motor layers) and ``mo`` (grouped
softmax output).  Every array in a :class:`NetworkState` may carry leading
batch axes so that many rollouts can advance in lock-step.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .config import VMDNNConfig
from .errors import ConfigurationError, DivergenceError
from .numerics import (
    TANH_GAIN,
    TANH_SLOPE,
    KernelBank,
    conv_valid,
    decode_analog,
    grouped_softmax,
)

# matrices that read previous-step activity
RECURRENT_WEIGHTS = ("w_pfc_pfc", "w_pfc_ms", "w_ms_ms", "w_ms_mf", "w_mf_ms", "w_mf_mf")


def parameter_layout(cfg: VMDNNConfig):
    """Canonical ``[(name, shape), ...]`` order of all learnable arrays."""
    m1, m2 = cfg.vf.out_maps, cfg.vs.out_maps
    p, s, f, o = cfg.pfc_n, cfg.ms_n, cfg.mf_n, cfg.out_n
    return [
        ("k_vf", (m1, 1, cfg.vf.kh, cfg.vf.kw)),
        ("b_vf", (m1,)),
        ("k_vs", (m2, m1, cfg.vs.kh, cfg.vs.kw)),
        ("b_vs", (m2,)),
        ("k_pfc", (p, m2, cfg.pfc_kh, cfg.pfc_kw)),
        ("w_pfc_pfc", (p, p)),
        ("w_pfc_ms", (p, s)),
        ("w_ms_pfc", (s, p)),
        ("w_ms_ms", (s, s)),
        ("w_ms_mf", (s, f)),
        ("w_mf_ms", (f, s)),
        ("w_mf_mf", (f, f)),
        ("w_mo_mf", (o, f)),
        ("b_pfc", (p,)),
        ("b_ms", (s,)),
        ("b_mf", (f,)),
        ("b_mo", (o,)),
    ]


def count_parameters(cfg: VMDNNConfig):
    return int(sum(np.prod(shape, dtype=np.int64) for _, shape in parameter_layout(cfg)))


class ParameterSet:
    """All learnable arrays as named views into one flat float64 vector.

    The flat vector follows :func:`parameter_layout`; gradients use the same
    class so that an SGD step is a single vector operation.
    """

    def __init__(self, cfg: VMDNNConfig, flat=None):
        self.layout = parameter_layout(cfg)
        n = sum(int(np.prod(s)) for _, s in self.layout)
        if flat is None:
            flat = np.zeros(n)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ConfigurationError(f"flat parameter vector must have length {n}, got {flat.shape}")
        self.flat = flat
        self._views = {}
        self._slices = {}
        i = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self._slices[name] = slice(i, i + size)
            self._views[name] = flat[i : i + size].reshape(shape)
            i += size

    def __getattr__(self, name):
        views = self.__dict__.get("_views")
        if views is not None and name in views:
            return views[name]
        raise AttributeError(name)

    def __getitem__(self, name):
        return self._views[name]

    def names(self):
        return [n for n, _ in self.layout]

    def slice_of(self, name):
        return self._slices[name]

    def decay_mask(self):
        """1 for kernels and weights, 0 for biases."""
        mask = np.zeros_like(self.flat)
        for name, _ in self.layout:
            if not name.startswith("b_"):
                mask[self._slices[name]] = 1.0
        return mask

    def copy(self):
        return self._new(self.flat.copy())

    def zeros_like(self):
        return self._new(np.zeros_like(self.flat))

    def _new(self, flat):
        obj = object.__new__(ParameterSet)
        obj.layout = self.layout
        obj.flat = flat
        obj._slices = self._slices
        obj._views = {name: flat[self._slices[name]].reshape(shape) for name, shape in self.layout}
        return obj

    def kernel_bank(self, layer, cfg):
        if layer == "vf":
            return KernelBank(self.k_vf, self.b_vf, cfg.vf.stride)
        if layer == "vs":
            return KernelBank(self.k_vs, self.b_vs, cfg.vs.stride)
        if layer == "pfc":
            return KernelBank(self.k_pfc, None, 1)
        raise KeyError(layer)

    def __len__(self):
        return self.flat.size

    def __eq__(self, other):
        return isinstance(other, ParameterSet) and self.layout == other.layout and np.array_equal(self.flat, other.flat)


def init_parameters(cfg: VMDNNConfig, seed=0, scale=1.0):
    """Uniform ``[-scale/sqrt(fan_in), scale/sqrt(fan_in)]`` weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = ParameterSet(cfg)
    for name, shape in theta.layout:
        if name.startswith("b_"):
            continue
        fan_in = int(np.prod(shape[1:]))
        if fan_in == 0 or np.prod(shape) == 0:
            continue
        bound = scale / np.sqrt(fan_in)
        theta[name][...] = rng.uniform(-bound, bound, size=shape)
    return theta


@dataclass
class NetworkState:
    u_vf: np.ndarray
    v_vf: np.ndarray
    u_vs: np.ndarray
    v_vs: np.ndarray
    u_pfc: np.ndarray
    y_pfc: np.ndarray
    u_ms: np.ndarray
    y_ms: np.ndarray
    u_mf: np.ndarray
    y_mf: np.ndarray
    u_mo: np.ndarray
    y_mo: np.ndarray
    t: int = 0

    def copy(self):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        return NetworkState(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in kw.items()})

    def take(self, i):
        """Single-rollout view of batch element ``i``."""
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        return NetworkState(**{k: (v[i].copy() if isinstance(v, np.ndarray) else v) for k, v in kw.items()})


def init_state(cfg: VMDNNConfig, batch=None):
    """Neutral state: every internal state 0, so tanh layers are 0 and the output uniform."""
    lead = () if batch is None else (batch,)
    vf_h, vf_w = cfg.vf_shape
    vs_h, vs_w = cfg.vs_shape
    z = lambda *s: np.zeros(lead + s)
    return NetworkState(
        u_vf=z(cfg.vf.out_maps, vf_h, vf_w), v_vf=z(cfg.vf.out_maps, vf_h, vf_w),
        u_vs=z(cfg.vs.out_maps, vs_h, vs_w), v_vs=z(cfg.vs.out_maps, vs_h, vs_w),
        u_pfc=z(cfg.pfc_n), y_pfc=z(cfg.pfc_n),
        u_ms=z(cfg.ms_n), y_ms=z(cfg.ms_n),
        u_mf=z(cfg.mf_n), y_mf=z(cfg.mf_n),
        u_mo=z(cfg.out_n), y_mo=np.full(lead + (cfg.out_n,), 1.0 / cfg.out_group_size),
        t=0,
    )


def _act(u):
    return TANH_GAIN * np.tanh(TANH_SLOPE * u)


def _leak(u_prev, drive, tau):
    return (1.0 - 1.0 / tau) * u_prev + (1.0 / tau) * drive


def _finite(x, layer, step):
    if not np.isfinite(x).all():
        raise DivergenceError(layer, step)


def forward_step(cfg: VMDNNConfig, theta: ParameterSet, state: NetworkState, frame):
    """Advance the network one step on ``frame`` and return ``(state', y_mo)``.

    ``frame`` is an ``(H, W)`` image in [-1, 1], or ``(B, H, W)`` for a state
    created with ``init_state(cfg, batch=B)``.  Layers read the current-step
    activity of the layer below and the previous-step activity of recurrent
    and top-down partners; ``state`` itself is left untouched.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-2:] != (cfg.input_height, cfg.input_width):
        raise ConfigurationError(
            f"frame must be {cfg.input_height}x{cfg.input_width}, got {frame.shape[-2:]}")
    prev = state
    t = prev.t
    v_vi = frame[..., None, :, :]

    u_vf = _leak(prev.u_vf, conv_valid(v_vi, theta.kernel_bank("vf", cfg)), cfg.tau_vf)
    v_vf = _act(u_vf)
    _finite(v_vf, "V_F", t)
    u_vs = _leak(prev.u_vs, conv_valid(v_vf, theta.kernel_bank("vs", cfg)), cfg.tau_vs)
    v_vs = _act(u_vs)
    _finite(v_vs, "V_S", t)

    c_pfc = conv_valid(v_vs, theta.kernel_bank("pfc", cfg)).reshape(v_vs.shape[:-3] + (cfg.pfc_n,))
    a_pfc = c_pfc + prev.y_pfc @ theta.w_pfc_pfc.T + prev.y_ms @ theta.w_pfc_ms.T + theta.b_pfc
    u_pfc = _leak(prev.u_pfc, a_pfc, cfg.tau_pfc)
    y_pfc = _act(u_pfc)
    _finite(y_pfc, "PFC", t)

    a_ms = y_pfc @ theta.w_ms_pfc.T + prev.y_ms @ theta.w_ms_ms.T + prev.y_mf @ theta.w_ms_mf.T + theta.b_ms
    u_ms = _leak(prev.u_ms, a_ms, cfg.ms_tau)
    y_ms = _act(u_ms)
    _finite(y_ms, "M_S", t)

    a_mf = prev.y_ms @ theta.w_mf_ms.T + prev.y_mf @ theta.w_mf_mf.T + theta.b_mf
    u_mf = _leak(prev.u_mf, a_mf, cfg.mf_tau)
    y_mf = _act(u_mf)
    _finite(y_mf, "M_F", t)

    u_mo = _leak(prev.u_mo, y_mf @ theta.w_mo_mf.T + theta.b_mo, cfg.mo_tau)
    _finite(u_mo, "M_O", t)
    y_mo = grouped_softmax(u_mo, cfg.output_spec)

    new = NetworkState(u_vf, v_vf, u_vs, v_vs, u_pfc, y_pfc, u_ms, y_ms, u_mf, y_mf, u_mo, y_mo, t + 1)
    return new, y_mo


def feedforward_output(cfg: VMDNNConfig, theta: ParameterSet, frame):
    """Stateless single-frame pass ignoring every leaky and previous-step term.

    Returns the activations of every layer keyed by state field name.  Equals
    :func:`forward_step` when all taus are 1 and the recurrent matrices
    (:data:`RECURRENT_WEIGHTS`) are zero.
    """
    x = np.asarray(frame, dtype=np.float64)[None]
    v_vf = _act(conv_valid(x, theta.kernel_bank("vf", cfg)))
    v_vs = _act(conv_valid(v_vf, theta.kernel_bank("vs", cfg)))
    y_pfc = _act(conv_valid(v_vs, theta.kernel_bank("pfc", cfg)).ravel() + theta.b_pfc)
    y_ms = _act(theta.w_ms_pfc @ y_pfc + theta.b_ms)
    y_mf = _act(theta.b_mf)
    y_mo = grouped_softmax(theta.w_mo_mf @ y_mf + theta.b_mo, cfg.output_spec)
    return {"v_vf": v_vf, "v_vs": v_vs, "y_pfc": y_pfc, "y_ms": y_ms, "y_mf": y_mf, "y_mo": y_mo}


@dataclass
class Trajectory:
    """Per-step record of one rollout.

    ``actions`` are decoded analog outputs; ``poses`` (closed loop only) are
    the environment poses after each action was applied.
    """

    frames: np.ndarray
    outputs: np.ndarray
    actions: np.ndarray
    poses: np.ndarray | None = None
    states: list | None = None

    def __len__(self):
        return len(self.outputs)


def run_open_loop(cfg: VMDNNConfig, theta: ParameterSet, frames, record_states=False):
    """Teacher-forced rollout from a fresh state over a frame sequence."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) == 0:
        raise ValueError("frames must be non-empty")
    state = init_state(cfg)
    outputs, states = [], []
    for frame in frames:
        state, y = forward_step(cfg, theta, state, frame)
        outputs.append(y)
        if record_states:
            states.append(state)
    outputs = np.array(outputs)
    return Trajectory(frames=frames, outputs=outputs,
                      actions=decode_analog(outputs, cfg.output_spec),
                      states=states if record_states else None)


@dataclass
class OcclusionSchedule:
    """Replace input frames by a constant neutral frame from ``onset`` on."""

    onset: int | None = None
    neutral_value: float = 0.0

    def __post_init__(self):
        if self.onset is not None and self.onset < 0:
            raise ValueError("occlusion onset must be >= 0")

    def active(self, t):
        return self.onset is not None and t >= self.onset


def run_closed_loop(cfg: VMDNNConfig, theta: ParameterSet, env, horizon, occlusion=None,
                    record_states=False):
    """Closed-loop rollout: render, step the network, decode, act."""
    return run_closed_loop_many(cfg, theta, [env], horizon, [occlusion], record_states)[0]


def run_closed_loop_many(cfg, theta, envs, horizon, occlusions=None, record_states=False):
    """Lock-step closed-loop rollouts of several environments.

    Each env provides ``render(t) -> frame`` and ``step(action)`` returning
    nothing; its ``pose`` attribute is recorded after every step.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    n = len(envs)
    occlusions = list(occlusions) if occlusions is not None else [None] * n
    occlusions = [o if isinstance(o, OcclusionSchedule) else OcclusionSchedule(o) for o in occlusions]
    spec = cfg.output_spec
    state = init_state(cfg, batch=n)
    frames = np.zeros((horizon, n, cfg.input_height, cfg.input_width))
    outputs = np.zeros((horizon, n, cfg.out_n))
    actions = np.zeros((horizon, n, cfg.out_groups))
    poses = []
    states = []
    for t in range(horizon):
        for i, env in enumerate(envs):
            if occlusions[i].active(t):
                frames[t, i] = occlusions[i].neutral_value
            else:
                frames[t, i] = env.render(t)
        state, y = forward_step(cfg, theta, state, frames[t])
        outputs[t] = y
        actions[t] = decode_analog(y, spec)
        row = []
        for i, env in enumerate(envs):
            env.step(actions[t, i])
            row.append(np.asarray(env.pose_vector(), dtype=np.float64))
        poses.append(row)
        if record_states:
            states.append(state)
    poses = np.array(poses)
    out = []
    for i in range(n):
        out.append(Trajectory(
            frames=frames[:, i].copy(), outputs=outputs[:, i].copy(), actions=actions[:, i].copy(),
            poses=poses[:, i].copy(),
            states=[s.take(i) for s in states] if record_states else None,
        ))
    return out


__all__ = [
    "ParameterSet", "NetworkState", "Trajectory", "OcclusionSchedule",
    "parameter_layout", "count_parameters", "init_parameters", "init_state",
    "forward_step", "feedforward_output", "run_open_loop", "run_closed_loop",
    "run_closed_loop_many", "RECURRENT_WEIGHTS",
]
