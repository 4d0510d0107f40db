"""Backpropagation through time, SGD with weight decay, and pre-training.

The loss of one sequence is the summed KL divergence between the teaching
distributions and the grouped softmax outputs over every step.  Gradients are
computed exactly in reverse mode through every leaky carry, tanh,
convolution and recurrent edge; :func:`finite_difference_check` compares
them against central differences of an independent forward pass.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import VMDNNConfig
from .errors import DivergenceError
from .network import ParameterSet, run_open_loop
from .numerics import (
    KL_FLOOR,
    TANH_GAIN,
    TANH_SLOPE,
    conv_backward,
    conv_valid,
    grouped_softmax,
    kl_grad_logits,
    kl_loss,
    tanh_prime_from_output,
)

log = logging.getLogger(__name__)

VISUAL_PARAMS = ("k_vf", "b_vf", "k_vs", "b_vs", "k_pfc", "b_pfc")


@dataclass
class SequenceSample:
    """Teacher-forced training sequence: frames ``(T, H, W)``, targets ``(T, out_n)``."""

    frames: np.ndarray
    targets: np.ndarray
    meta: object = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.frames) < 1 or len(self.frames) != len(self.targets):
            raise ValueError("frames and targets need equal non-zero length")

    def __len__(self):
        return len(self.frames)


@dataclass
class TrainingConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    epochs: int = 400
    seed: int = 0
    report_every: int = 10
    clip: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def _act(u):
    return TANH_GAIN * np.tanh(TANH_SLOPE * u)


def _leak_scan(drive, tau):
    """Leaky integration of a drive sequence along axis 0 from a zero state."""
    if tau == 1.0:
        return drive.copy()
    keep, gain = 1.0 - 1.0 / tau, 1.0 / tau
    u = np.empty_like(drive)
    prev = np.zeros(drive.shape[1:])
    for t in range(len(drive)):
        prev = keep * prev + gain * drive[t]
        u[t] = prev
    return u


def _leak_scan_backward(du_direct, tau):
    """Adjoint of :func:`_leak_scan`: returns the gradient w.r.t. the drive."""
    if tau == 1.0:
        return du_direct
    keep, gain = 1.0 - 1.0 / tau, 1.0 / tau
    du = np.empty_like(du_direct)
    carry = np.zeros(du_direct.shape[1:])
    for t in range(len(du_direct) - 1, -1, -1):
        carry = du_direct[t] + keep * carry
        du[t] = carry
    return gain * du


def _check(x, layer, what="gradient"):
    if not np.isfinite(x).all():
        bad = np.argwhere(~np.isfinite(x.reshape(len(x), -1)).all(axis=1))
        raise DivergenceError(layer, int(bad[0, 0]) if len(bad) else -1, what)


def _vision_forward(cfg, theta, frames):
    x = frames[:, None]
    v_vf = _act(_leak_scan(conv_valid(x, theta.kernel_bank("vf", cfg)), cfg.tau_vf))
    _check(v_vf, "V_F", "activation")
    v_vs = _act(_leak_scan(conv_valid(v_vf, theta.kernel_bank("vs", cfg)), cfg.tau_vs))
    _check(v_vs, "V_S", "activation")
    c_pfc = conv_valid(v_vs, theta.kernel_bank("pfc", cfg)).reshape(len(frames), cfg.pfc_n)
    return x, v_vf, v_vs, c_pfc


def _vision_backward(cfg, theta, grads, cache, dc_pfc):
    x, v_vf, v_vs, _ = cache
    dk, _, dv_vs = conv_backward(dc_pfc.reshape(dc_pfc.shape + (1, 1)), v_vs, theta.kernel_bank("pfc", cfg))
    grads.k_pfc[...] += dk
    dd_vs = _leak_scan_backward(dv_vs * tanh_prime_from_output(v_vs), cfg.tau_vs)
    _check(dd_vs, "V_S")
    dk, db, dv_vf = conv_backward(dd_vs, v_vf, theta.kernel_bank("vs", cfg))
    grads.k_vs[...] += dk
    grads.b_vs[...] += db
    dd_vf = _leak_scan_backward(dv_vf * tanh_prime_from_output(v_vf), cfg.tau_vf)
    _check(dd_vf, "V_F")
    dk, db, _ = conv_backward(dd_vf, x, theta.kernel_bank("vf", cfg), need_input_grad=False)
    grads.k_vf[...] += dk
    grads.b_vf[...] += db


def _shift(a):
    """Previous-step view: row t holds ``a[t-1]``, row 0 is the neutral zero state."""
    out = np.zeros_like(a)
    out[1:] = a[:-1]
    return out


def forward_sequence(cfg: VMDNNConfig, theta: ParameterSet, frames):
    """Time-batched teacher-forced forward pass; returns a cache of all activity."""
    frames = np.asarray(frames, dtype=np.float64)
    T = len(frames)
    vis = _vision_forward(cfg, theta, frames)
    c_pfc = vis[3]
    P, S, F, O = cfg.pfc_n, cfg.ms_n, cfg.mf_n, cfg.out_n
    y_p, y_s, y_f = np.zeros((T, P)), np.zeros((T, S)), np.zeros((T, F))
    u_o = np.zeros((T, O))
    kp, ks, kf, ko = (1 - 1 / cfg.tau_pfc, 1 - 1 / cfg.ms_tau, 1 - 1 / cfg.mf_tau, 1 - 1 / cfg.mo_tau)
    gp, gs, gf, go = 1 / cfg.tau_pfc, 1 / cfg.ms_tau, 1 / cfg.mf_tau, 1 / cfg.mo_tau
    Wpp, Wpm = theta.w_pfc_pfc, theta.w_pfc_ms
    Wsp, Wss, Wsf = theta.w_ms_pfc, theta.w_ms_ms, theta.w_ms_mf
    Wfs, Wff, Wof = theta.w_mf_ms, theta.w_mf_mf, theta.w_mo_mf
    up, us, uf, uo = np.zeros(P), np.zeros(S), np.zeros(F), np.zeros(O)
    yp, ys, yf = np.zeros(P), np.zeros(S), np.zeros(F)
    for t in range(T):
        up = kp * up + gp * (c_pfc[t] + Wpp @ yp + Wpm @ ys + theta.b_pfc)
        yp_new = _act(up)
        us = ks * us + gs * (Wsp @ yp_new + Wss @ ys + Wsf @ yf + theta.b_ms)
        ys_new = _act(us)
        uf = kf * uf + gf * (Wfs @ ys + Wff @ yf + theta.b_mf)
        yf = _act(uf)
        uo = ko * uo + go * (Wof @ yf + theta.b_mo)
        yp, ys = yp_new, ys_new
        y_p[t], y_s[t], y_f[t], u_o[t] = yp, ys, yf, uo
    for name, arr in (("PFC", y_p), ("M_S", y_s), ("M_F", y_f), ("M_O", u_o)):
        _check(arr, name, "activation")
    y_o = grouped_softmax(u_o, cfg.output_spec)
    return {"vision": vis, "y_pfc": y_p, "y_ms": y_s, "y_mf": y_f, "u_mo": u_o, "y_mo": y_o}


def sequence_loss(cfg, theta, sample):
    """Summed KL loss of a sample under the time-batched forward pass."""
    cache = forward_sequence(cfg, theta, sample.frames)
    return kl_loss(sample.targets, cache["y_mo"])


def bptt(cfg: VMDNNConfig, theta: ParameterSet, sample: SequenceSample):
    """Loss and exact gradient of the summed KL loss over one teacher-forced sequence."""
    cache = forward_sequence(cfg, theta, sample.frames)
    spec = cfg.output_spec
    T = len(sample)
    y_o = cache["y_mo"]
    loss = kl_loss(sample.targets, y_o)
    G, Gs = spec.group_count, spec.group_size
    g_uo = kl_grad_logits(sample.targets.reshape(T, G, Gs), y_o.reshape(T, G, Gs)).reshape(T, -1)

    y_p, y_s, y_f = cache["y_pfc"], cache["y_ms"], cache["y_mf"]
    fp_p, fp_s, fp_f = (tanh_prime_from_output(y) for y in (y_p, y_s, y_f))
    kp, ks, kf, ko = (1 - 1 / cfg.tau_pfc, 1 - 1 / cfg.ms_tau, 1 - 1 / cfg.mf_tau, 1 - 1 / cfg.mo_tau)
    gp, gs, gf, go = 1 / cfg.tau_pfc, 1 / cfg.ms_tau, 1 / cfg.mf_tau, 1 / cfg.mo_tau
    Wpp, Wpm = theta.w_pfc_pfc, theta.w_pfc_ms
    Wsp, Wss, Wsf = theta.w_ms_pfc, theta.w_ms_ms, theta.w_ms_mf
    Wfs, Wff, Wof = theta.w_mf_ms, theta.w_mf_mf, theta.w_mo_mf

    P, S, F, O = cfg.pfc_n, cfg.ms_n, cfg.mf_n, cfg.out_n
    dA_p, dA_s, dA_f, dA_o = np.zeros((T, P)), np.zeros((T, S)), np.zeros((T, F)), np.zeros((T, O))
    # carries from step t+1: gradients w.r.t. u at t+1 and drives at t+1
    du_p, du_s, du_f, du_o = np.zeros(P), np.zeros(S), np.zeros(F), np.zeros(O)
    da_p, da_s, da_f = np.zeros(P), np.zeros(S), np.zeros(F)
    for t in range(T - 1, -1, -1):
        du_o = g_uo[t] + ko * du_o
        da_o = go * du_o
        dy_f = Wof.T @ da_o + Wsf.T @ da_s + Wff.T @ da_f
        dy_s = Wss.T @ da_s + Wfs.T @ da_f + Wpm.T @ da_p
        du_f = dy_f * fp_f[t] + kf * du_f
        da_f = gf * du_f
        du_s = dy_s * fp_s[t] + ks * du_s
        da_s = gs * du_s
        dy_p = Wsp.T @ da_s + Wpp.T @ da_p
        du_p = dy_p * fp_p[t] + kp * du_p
        da_p = gp * du_p
        dA_o[t], dA_f[t], dA_s[t], dA_p[t] = da_o, da_f, da_s, da_p
    for name, arr in (("M_O", dA_o), ("M_F", dA_f), ("M_S", dA_s), ("PFC", dA_p)):
        _check(arr, name)

    grads = theta.zeros_like()
    yp_prev, ys_prev, yf_prev = _shift(y_p), _shift(y_s), _shift(y_f)
    grads.w_mo_mf[...] = dA_o.T @ y_f
    grads.b_mo[...] = dA_o.sum(0)
    grads.w_mf_ms[...] = dA_f.T @ ys_prev
    grads.w_mf_mf[...] = dA_f.T @ yf_prev
    grads.b_mf[...] = dA_f.sum(0)
    grads.w_ms_pfc[...] = dA_s.T @ y_p
    grads.w_ms_ms[...] = dA_s.T @ ys_prev
    grads.w_ms_mf[...] = dA_s.T @ yf_prev
    grads.b_ms[...] = dA_s.sum(0)
    grads.w_pfc_pfc[...] = dA_p.T @ yp_prev
    grads.w_pfc_ms[...] = dA_p.T @ ys_prev
    grads.b_pfc[...] = dA_p.sum(0)
    _vision_backward(cfg, theta, grads, cache["vision"], dA_p)
    return loss, grads


def sgd_step(theta: ParameterSet, grads: ParameterSet, lr, weight_decay):
    """One SGD update with weight decay on kernels and weights, none on biases."""
    flat = theta.flat - lr * (grads.flat + weight_decay * theta.decay_mask() * theta.flat)
    return theta._new(flat)


def clip_gradients(grads: ParameterSet, threshold):
    norm = float(np.linalg.norm(grads.flat))
    if threshold is not None and norm > threshold:
        log.info("gradient norm %.4g clipped to %.4g", norm, threshold)
        return grads._new(grads.flat * (threshold / norm)), True
    return grads, False


@dataclass
class LossRecord:
    epoch: int
    mean_loss: float
    mean_step_loss: float
    wall_seconds: float


@dataclass
class TrainingResult:
    params: ParameterSet
    curve: list = field(default_factory=list)
    clipped_updates: int = 0


def train(cfg: VMDNNConfig, theta0: ParameterSet, dataset, tcfg: TrainingConfig, progress=None):
    """Per-sample SGD over seed-shuffled epochs; returns the trained parameters and loss curve.

    On divergence the raised :class:`DivergenceError` carries ``last_good``
    (parameters at the end of the last finished epoch) and ``epoch``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(tcfg.seed)
    theta = theta0.copy()
    mask = theta.decay_mask()
    lr, lam = tcfg.learning_rate, tcfg.weight_decay
    result = TrainingResult(params=theta)
    start = time.perf_counter()
    steps_per_epoch = sum(len(s) for s in dataset)
    last_good = theta.copy()
    for epoch in range(1, tcfg.epochs + 1):
        total = 0.0
        try:
            for idx in rng.permutation(len(dataset)):
                loss, grads = bptt(cfg, theta, dataset[idx])
                if tcfg.clip is not None:
                    grads, clipped = clip_gradients(grads, tcfg.clip)
                    result.clipped_updates += clipped
                theta.flat -= lr * (grads.flat + lam * mask * theta.flat)
                total += loss
            if not np.isfinite(theta.flat).all():
                raise DivergenceError("parameters", -1, "parameter")
        except DivergenceError as exc:
            exc.last_good = last_good
            exc.epoch = epoch
            raise
        last_good = theta.copy()
        rec = LossRecord(epoch, total / len(dataset), total / steps_per_epoch, time.perf_counter() - start)
        result.curve.append(rec)
        if progress is not None and (epoch == 1 or epoch % max(tcfg.report_every, 1) == 0 or epoch == tcfg.epochs):
            progress(rec)
    return result


def pretrain_grasp(cfg, theta0, dataset, tcfg, progress=None):
    """Grasp pre-training: ordinary training on gesture-free sequences."""
    return train(cfg, theta0, dataset, tcfg, progress)


@dataclass
class GestureClip:
    frames: np.ndarray
    label: int


@dataclass
class VisualPretrainResult:
    visual: dict
    head_w: np.ndarray
    head_b: np.ndarray
    curve: list

    def predict(self, cfg, theta, frames):
        """Class probabilities after the last frame of a clip."""
        merged = splice_visual(theta, self.visual)
        y_last = _classifier_forward(cfg, merged, np.asarray(frames, dtype=np.float64))[1][-1]
        return _softmax(self.head_w @ y_last + self.head_b)


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def _classifier_forward(cfg, theta, frames):
    """Vision pathway plus PFC with its recurrent and motor inputs removed."""
    vis = _vision_forward(cfg, theta, frames)
    y_p = _act(_leak_scan(vis[3] + theta.b_pfc, cfg.tau_pfc))
    return vis, y_p


def classifier_bptt(cfg, theta, head_w, head_b, clip: GestureClip):
    """Cross-entropy at the final clip frame and gradients for the visual pathway and head."""
    vis, y_p = _classifier_forward(cfg, theta, clip.frames)
    p = _softmax(head_w @ y_p[-1] + head_b)
    loss = -float(np.log(max(p[clip.label], KL_FLOOR)))
    dz = p.copy()
    dz[clip.label] -= 1.0
    dW = np.outer(dz, y_p[-1])
    db = dz
    dy_p = np.zeros_like(y_p)
    dy_p[-1] = head_w.T @ dz
    dc = _leak_scan_backward(dy_p * tanh_prime_from_output(y_p), cfg.tau_pfc)
    grads = theta.zeros_like()
    grads.b_pfc[...] = dc.sum(0)
    _vision_backward(cfg, theta, grads, vis, dc)
    return loss, grads, dW, db


def pretrain_visual(cfg, theta, clips, tcfg: TrainingConfig, n_classes=4, progress=None):
    """Train the visual pathway as a gesture classifier through a temporary softmax head.

    Only the parameters in :data:`VISUAL_PARAMS` and the head are learned;
    the head is discarded by callers after :func:`splice_visual`.
    """
    if len(clips) == 0:
        raise ValueError("clips must be non-empty")
    rng = np.random.default_rng(tcfg.seed)
    theta = theta.copy()
    bound = 1.0 / np.sqrt(cfg.pfc_n)
    head_w = rng.uniform(-bound, bound, size=(n_classes, cfg.pfc_n))
    head_b = np.zeros(n_classes)
    mask = np.zeros_like(theta.flat)
    for name in VISUAL_PARAMS:
        mask[theta.slice_of(name)] = 1.0
    decay = mask * theta.decay_mask()
    lr, lam = tcfg.learning_rate, tcfg.weight_decay
    curve = []
    start = time.perf_counter()
    for epoch in range(1, tcfg.epochs + 1):
        total = 0.0
        for idx in rng.permutation(len(clips)):
            loss, grads, dW, db = classifier_bptt(cfg, theta, head_w, head_b, clips[idx])
            theta.flat -= lr * (mask * grads.flat + lam * decay * theta.flat)
            head_w -= lr * (dW + lam * head_w)
            head_b -= lr * db
            total += loss
        rec = LossRecord(epoch, total / len(clips), total / len(clips), time.perf_counter() - start)
        curve.append(rec)
        if progress is not None and (epoch == 1 or epoch % max(tcfg.report_every, 1) == 0 or epoch == tcfg.epochs):
            progress(rec)
    visual = {name: theta[name].copy() for name in VISUAL_PARAMS}
    return VisualPretrainResult(visual, head_w, head_b, curve)


def splice_visual(theta: ParameterSet, visual: dict):
    """Copy of ``theta`` with the visual-pathway arrays replaced."""
    out = theta.copy()
    for name, value in visual.items():
        out[name][...] = value
    return out


def reference_loss(cfg, theta, sample):
    """Sequence loss evaluated step by step through ``forward_step``."""
    traj = run_open_loop(cfg, theta, sample.frames)
    return kl_loss(sample.targets, traj.outputs)


def finite_difference_check(cfg, theta, sample, eps=1e-5, max_params=None, seed=0, return_details=False):
    """Largest relative error between BPTT and central-difference gradients.

    The difference quotients use :func:`reference_loss`, which runs the
    per-step forward pass rather than the time-batched one inside
    :func:`bptt`.  With ``max_params`` set, a seeded random subset of that
    size is checked.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    _, grads = bptt(cfg, theta, sample)
    n = len(theta)
    idx = np.arange(n)
    if max_params is not None and max_params < n:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_params, replace=False))
    work = theta.copy()
    errors = np.zeros(len(idx))
    numeric = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = work.flat[i]
        work.flat[i] = orig + eps
        lp = reference_loss(cfg, work, sample)
        work.flat[i] = orig - eps
        lm = reference_loss(cfg, work, sample)
        work.flat[i] = orig
        g_fd = (lp - lm) / (2 * eps)
        g_bp = grads.flat[i]
        numeric[k] = g_fd
        errors[k] = abs(g_fd - g_bp) / max(abs(g_fd), abs(g_bp), 1e-8)
    worst = float(errors.max()) if len(errors) else 0.0
    if return_details:
        return worst, {"index": idx, "numeric": numeric, "analytic": grads.flat[idx], "rel_error": errors}
    return worst


def gradcheck_case(seed=0, steps=6):
    """Tiny network, random sequence and parameters for :func:`finite_difference_check`.

    With PFC and M_S time constants of 150 and 70, every path from the
    vision layers to the output is attenuated by about 1e-4, which pushes
    many gradient components toward the float64 rounding floor of a
    difference quotient with eps=1e-5.  The PFC kernel and the PFC->M_S->M_F
    weights are therefore scaled up so those paths carry gradients well
    above that floor; the slow carries are still exercised in full.
    """
    from .config import tiny_config
    from .network import init_parameters
    from .numerics import encode_analog

    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    theta = init_parameters(cfg, seed, scale=3.0)
    for name in theta.names():
        if name.startswith("b_"):
            theta[name][...] = rng.normal(size=theta[name].shape)
    theta.k_pfc[...] *= 5.0
    theta.w_ms_pfc[...] *= 20.0
    theta.w_mf_ms[...] *= 10.0
    spec = cfg.output_spec
    frames = rng.uniform(-1.0, 1.0, size=(steps, cfg.input_height, cfg.input_width))
    values = rng.uniform(spec.lo, spec.hi, size=(steps, spec.group_count))
    return cfg, theta, SequenceSample(frames, encode_analog(values, spec))

