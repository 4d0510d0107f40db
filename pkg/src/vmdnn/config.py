"""Network configuration, condition flags and preset configurations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigurationError
from .numerics import SoftmaxGroupSpec, conv_output_shape

VISION_MODES = ("CNN", "MSTNN")
PFC_MODES = ("FAST", "SLOW")
CONDITIONS = (("CNN", "FAST"), ("CNN", "SLOW"), ("MSTNN", "FAST"), ("MSTNN", "SLOW"))


@dataclass
class ConvLayer:
    out_maps: int
    kh: int
    kw: int
    stride: int
    tau: float = 1.0


@dataclass
class VMDNNConfig:
    """Sizes, kernels and time constants of the seven-layer network.

    The vision taus (``vf.tau``, ``vs.tau``) and ``pfc_tau`` are the values
    used in the MSTNN / SLOW conditions; the condition flags override them
    with 1 (see :attr:`tau_vf` etc.).
    """

    input_height: int
    input_width: int
    vf: ConvLayer
    vs: ConvLayer
    pfc_n: int
    pfc_kh: int
    pfc_kw: int
    pfc_tau: float
    ms_n: int
    ms_tau: float
    mf_n: int
    mf_tau: float
    out_groups: int
    out_group_size: int
    out_ranges: list = field(default_factory=list)
    out_sigma: float = 0.05
    mo_tau: float = 1.0
    vision_mode: str = "MSTNN"
    pfc_mode: str = "SLOW"

    # effective time constants under the condition flags
    @property
    def tau_vf(self):
        return 1.0 if self.vision_mode == "CNN" else float(self.vf.tau)

    @property
    def tau_vs(self):
        return 1.0 if self.vision_mode == "CNN" else float(self.vs.tau)

    @property
    def tau_pfc(self):
        return 1.0 if self.pfc_mode == "FAST" else float(self.pfc_tau)

    @property
    def output_spec(self):
        return SoftmaxGroupSpec(self.out_groups, self.out_group_size,
                                tuple(tuple(r) for r in self.out_ranges) or (),
                                self.out_sigma)

    @property
    def out_n(self):
        return self.out_groups * self.out_group_size

    @property
    def vf_shape(self):
        return conv_output_shape(self.input_height, self.input_width, self.vf.kh, self.vf.kw, self.vf.stride)

    @property
    def vs_shape(self):
        h, w = self.vf_shape
        return conv_output_shape(h, w, self.vs.kh, self.vs.kw, self.vs.stride)

    @property
    def condition(self):
        return f"{self.vision_mode}+{self.pfc_mode}"

    def with_condition(self, vision_mode, pfc_mode):
        return replace(self, vision_mode=vision_mode, pfc_mode=pfc_mode)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown network config keys: {sorted(unknown)}")
        d["vf"] = ConvLayer(**d["vf"])
        d["vs"] = ConvLayer(**d["vs"])
        d["out_ranges"] = [list(r) for r in d.get("out_ranges", [])]
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def validate_config(cfg: VMDNNConfig):
    """Return the list of every violated shape or time-constant invariant."""
    problems = []
    for name in ("input_height", "input_width", "pfc_n", "ms_n", "mf_n", "out_groups", "out_group_size"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be positive")
    for name, layer in (("V_F", cfg.vf), ("V_S", cfg.vs)):
        if layer.out_maps < 1:
            problems.append(f"{name} needs at least one feature map")
        if layer.stride < 1 or int(layer.stride) != layer.stride:
            problems.append(f"{name} stride must be a positive integer")
        if layer.kh < 1 or layer.kw < 1:
            problems.append(f"{name} kernel must be at least 1x1")
        if layer.tau < 1:
            problems.append(f"{name} tau must be >= 1")
    for name in ("pfc_tau", "ms_tau", "mf_tau", "mo_tau"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be >= 1")
    if cfg.vision_mode not in VISION_MODES:
        problems.append(f"vision_mode must be one of {VISION_MODES}")
    if cfg.pfc_mode not in PFC_MODES:
        problems.append(f"pfc_mode must be one of {PFC_MODES}")

    vf_shape = vs_shape = None
    if cfg.vf.stride >= 1:
        try:
            vf_shape = cfg.vf_shape
        except ConfigurationError as exc:
            problems.append(f"V_F: {exc}")
    if vf_shape is not None and cfg.vs.stride >= 1:
        try:
            vs_shape = cfg.vs_shape
        except ConfigurationError as exc:
            problems.append(f"V_S: {exc}")
    if vs_shape is not None:
        if (cfg.pfc_kh, cfg.pfc_kw) != vs_shape:
            try:
                out = conv_output_shape(vs_shape[0], vs_shape[1], cfg.pfc_kh, cfg.pfc_kw, 1)
                problems.append(f"PFC kernel {cfg.pfc_kh}x{cfg.pfc_kw} over V_S maps "
                                f"{vs_shape[0]}x{vs_shape[1]} gives {out[0]}x{out[1]} output, not 1x1")
            except ConfigurationError as exc:
                problems.append(f"PFC: {exc}")

    if cfg.out_ranges and len(cfg.out_ranges) != cfg.out_groups:
        problems.append("out_ranges needs one (lo, hi) pair per output group")
    elif any(lo >= hi for lo, hi in cfg.out_ranges):
        problems.append("every output range needs lo < hi")
    if not cfg.out_sigma > 0:
        problems.append("out_sigma must be positive")
    return problems


def check_config(cfg):
    problems = validate_config(cfg)
    if problems:
        raise ConfigurationError("; ".join(problems))
    return cfg


def full_config(vision_mode="MSTNN", pfc_mode="SLOW"):
    """Full-size network: 64x48 input, 110 softmax outputs in 11 groups."""
    return VMDNNConfig(
        input_height=48, input_width=64,
        vf=ConvLayer(4, 8, 8, 4, tau=1.0),
        vs=ConvLayer(8, 7, 7, 2, tau=15.0),
        pfc_n=20, pfc_kh=3, pfc_kw=5, pfc_tau=150.0,
        ms_n=30, ms_tau=70.0,
        mf_n=50, mf_tau=2.0,
        out_groups=11, out_group_size=10,
        out_ranges=[[0.0, 1.0]] * 11,
        mo_tau=1.0,
        vision_mode=vision_mode, pfc_mode=pfc_mode,
    )


def tiny_config(vision_mode="MSTNN", pfc_mode="SLOW"):
    """Small network for finite-difference checks (8x6 frames)."""
    return VMDNNConfig(
        input_height=6, input_width=8,
        vf=ConvLayer(2, 3, 3, 1, tau=1.0),
        vs=ConvLayer(2, 3, 3, 2, tau=15.0),
        pfc_n=4, pfc_kh=1, pfc_kw=2, pfc_tau=150.0,
        ms_n=3, ms_tau=70.0,
        mf_n=4, mf_tau=2.0,
        out_groups=2, out_group_size=4,
        out_ranges=[[0.0, 1.0], [1.0, 10.0]],
        mo_tau=1.0,
        vision_mode=vision_mode, pfc_mode=pfc_mode,
    )


def desk_config(vision_mode="MSTNN", pfc_mode="SLOW"):
    """Desk-scale network for the synthetic gesture-to-grasp task (16x12 frames).

    Layer sizes follow the full network; the slow time constants are shrunk
    in proportion to the 36-step horizon (V_S 3, PFC 10, M_S 8) because the
    full-size values leave the motor path unable to follow a 12-step reach.
    """
    from .envtask import POSE_RANGES

    return VMDNNConfig(
        input_height=12, input_width=16,
        vf=ConvLayer(4, 4, 4, 2, tau=1.0),
        vs=ConvLayer(8, 3, 3, 2, tau=3.0),
        pfc_n=20, pfc_kh=2, pfc_kw=3, pfc_tau=10.0,
        ms_n=30, ms_tau=8.0,
        mf_n=50, mf_tau=2.0,
        out_groups=len(POSE_RANGES), out_group_size=10,
        out_ranges=[list(r) for r in POSE_RANGES],
        mo_tau=1.0,
        vision_mode=vision_mode, pfc_mode=pfc_mode,
    )
