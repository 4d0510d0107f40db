import numpy as np
import pytest

from vmdnn.config import ConvLayer, check_config, desk_config, full_config, tiny_config, validate_config
from vmdnn.errors import ConfigurationError, DivergenceError
from vmdnn.network import (
    RECURRENT_WEIGHTS,
    OcclusionSchedule,
    ParameterSet,
    count_parameters,
    feedforward_output,
    forward_step,
    init_parameters,
    init_state,
    parameter_layout,
    run_closed_loop,
    run_closed_loop_many,
    run_open_loop,
)
from vmdnn.numerics import decode_analog


def memoryless(cfg, seed=0):
    """All taus 1 and recurrent matrices zero."""
    cfg = cfg.with_condition("CNN", "FAST")
    cfg.ms_tau = cfg.mf_tau = cfg.mo_tau = 1.0
    theta = init_parameters(cfg, seed, 2.0)
    rng = np.random.default_rng(seed)
    for name in theta.names():
        if name.startswith("b_"):
            theta[name][...] = rng.normal(size=theta[name].shape)
    for name in RECURRENT_WEIGHTS:
        theta[name][...] = 0.0
    return cfg, theta


def test_full_config_valid_and_shapes():
    cfg = full_config()
    assert validate_config(cfg) == []
    assert cfg.vf_shape == (11, 15)
    assert cfg.vs_shape == (3, 5)
    assert (cfg.pfc_kh, cfg.pfc_kw) == cfg.vs_shape


def test_validate_reports_every_violation():
    cfg = full_config()
    cfg.vs = ConvLayer(8, 13, 13, 2, 15.0)
    cfg.ms_tau = 0.5
    problems = validate_config(cfg)
    assert any("V_S" in p for p in problems)
    assert any("ms_tau" in p for p in problems)
    with pytest.raises(ConfigurationError):
        check_config(cfg)


def test_pfc_kernel_must_cover_vs_map():
    cfg = full_config()
    cfg.pfc_kh, cfg.pfc_kw = 3, 4
    problems = validate_config(cfg)
    assert len(problems) == 1 and "1x2" in problems[0]


def test_condition_flags_force_taus():
    cfg = full_config("CNN", "FAST")
    assert (cfg.tau_vf, cfg.tau_vs, cfg.tau_pfc) == (1.0, 1.0, 1.0)
    cfg = full_config("MSTNN", "SLOW")
    assert (cfg.tau_vf, cfg.tau_vs, cfg.tau_pfc) == (1.0, 15.0, 150.0)
    assert cfg.ms_tau == 70 and cfg.mf_tau == 2 and cfg.mo_tau == 1


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = desk_config("CNN", "SLOW")
    again = type(cfg).from_dict(cfg.to_dict())
    assert again == cfg
    d = cfg.to_dict()
    d["bogus"] = 1
    with pytest.raises(ConfigurationError):
        type(cfg).from_dict(d)


def enumerate_parameters(cfg):
    """Independent count from the layer description."""
    vf = cfg.vf.out_maps * (1 * cfg.vf.kh * cfg.vf.kw + 1)
    vs = cfg.vs.out_maps * (cfg.vf.out_maps * cfg.vs.kh * cfg.vs.kw + 1)
    pfc = cfg.pfc_n * (cfg.vs.out_maps * cfg.pfc_kh * cfg.pfc_kw + cfg.pfc_n + cfg.ms_n + 1)
    ms = cfg.ms_n * (cfg.pfc_n + cfg.ms_n + cfg.mf_n + 1)
    mf = cfg.mf_n * (cfg.ms_n + cfg.mf_n + 1)
    mo = cfg.out_n * (cfg.mf_n + 1)
    return vf + vs + pfc + ms + mf + mo


def test_parameter_count():
    cfg = full_config()
    assert count_parameters(cfg) == 17946 == enumerate_parameters(cfg)
    assert len(ParameterSet(cfg)) == 17946
    for make in (tiny_config, desk_config):
        assert count_parameters(make()) == enumerate_parameters(make())


def test_parameter_count_delta_for_wider_mf():
    cfg = full_config()
    wide = full_config()
    wide.mf_n *= 2
    delta = count_parameters(wide) - count_parameters(cfg)
    assert delta == enumerate_parameters(wide) - enumerate_parameters(cfg)


def test_canonical_order():
    names = [n for n, _ in parameter_layout(full_config())]
    assert names == ["k_vf", "b_vf", "k_vs", "b_vs", "k_pfc", "w_pfc_pfc", "w_pfc_ms", "w_ms_pfc",
                     "w_ms_ms", "w_ms_mf", "w_mf_ms", "w_mf_mf", "w_mo_mf", "b_pfc", "b_ms", "b_mf", "b_mo"]


def test_init_parameters():
    cfg = full_config()
    a = init_parameters(cfg, 5, 1.0)
    assert a == init_parameters(cfg, 5, 1.0)
    assert a != init_parameters(cfg, 6, 1.0)
    assert not init_parameters(cfg, 5, 0.0).flat.any()
    assert not a.b_mo.any()
    bound = 1.0 / np.sqrt(cfg.mf_n)
    assert np.abs(a.w_mo_mf).max() <= bound


def test_init_parameters_std():
    cfg = full_config()
    cfg.mf_n = 100
    cfg.out_groups, cfg.out_group_size = 10, 10
    cfg.out_ranges = [[0.0, 1.0]] * 10
    w = init_parameters(cfg, 0, 1.5).w_mo_mf
    assert w.size == 10000
    assert w.std() == pytest.approx(1.5 / (np.sqrt(3) * np.sqrt(100)), rel=0.05)


def test_init_state():
    cfg = desk_config()
    s = init_state(cfg)
    assert not s.u_pfc.any() and not s.v_vs.any() and s.t == 0
    assert np.allclose(s.y_mo, 0.1)
    spec = cfg.output_spec
    assert np.allclose(decode_analog(s.y_mo, spec), spec.midpoints())


def test_zero_parameters_give_uniform_output():
    cfg = desk_config()
    theta = ParameterSet(cfg)
    s, y = forward_step(cfg, theta, init_state(cfg), np.random.default_rng(0).uniform(-1, 1, (12, 16)))
    assert not s.v_vf.any() and not s.y_mf.any()
    assert np.allclose(y, 0.1)


def test_activation_bounds_and_simplex():
    cfg = desk_config()
    theta = init_parameters(cfg, 1, 4.0)
    frames = np.random.default_rng(1).uniform(-1, 1, (20, 12, 16))
    traj = run_open_loop(cfg, theta, frames, record_states=True)
    for s in traj.states:
        for a in (s.v_vf, s.v_vs, s.y_pfc, s.y_ms, s.y_mf):
            assert np.abs(a).max() < 1.7159
        assert np.allclose(s.y_mo.reshape(6, 10).sum(1), 1.0, atol=1e-9)


def test_mf_reads_previous_ms():
    cfg = tiny_config()
    theta = init_parameters(cfg, 2, 2.0)
    frame = np.random.default_rng(2).uniform(-1, 1, (6, 8))
    s1, _ = forward_step(cfg, theta, init_state(cfg), frame)
    s2, _ = forward_step(cfg, theta, s1, frame)
    # changing the M_S input weights perturbs y_ms at this step but not u_mf
    theta2 = theta.copy()
    theta2.w_ms_pfc[...] += 1.0
    s2b, _ = forward_step(cfg, theta2, s1, frame)
    assert not np.allclose(s2b.y_ms, s2.y_ms)
    assert np.array_equal(s2b.u_mf, s2.u_mf)


def test_forward_step_does_not_mutate_state():
    cfg = tiny_config()
    theta = init_parameters(cfg, 0, 1.0)
    s0 = init_state(cfg)
    snap = s0.copy()
    forward_step(cfg, theta, s0, np.zeros((6, 8)))
    assert all(np.array_equal(getattr(s0, f), getattr(snap, f)) for f in ("u_vf", "u_pfc", "y_mo"))


def test_feedforward_equivalence():
    cfg, theta = memoryless(desk_config())
    rng = np.random.default_rng(0)
    state = init_state(cfg)
    for _ in range(10):
        frame = rng.uniform(-1, 1, (12, 16))
        state, y = forward_step(cfg, theta, state, frame)
        ref = feedforward_output(cfg, theta, frame)
        assert np.max(np.abs(y - ref["y_mo"])) <= 1e-12
        assert np.max(np.abs(state.v_vs - ref["v_vs"])) <= 1e-12
        assert np.max(np.abs(state.y_pfc - ref["y_pfc"])) <= 1e-12


def test_memoryless_network_permutes_with_frames():
    cfg, theta = memoryless(tiny_config())
    frames = np.random.default_rng(4).uniform(-1, 1, (7, 6, 8))
    perm = np.random.default_rng(5).permutation(7)
    a = run_open_loop(cfg, theta, frames, record_states=True)
    b = run_open_loop(cfg, theta, frames[perm], record_states=True)
    ya = np.array([s.y_pfc for s in a.states])
    yb = np.array([s.y_pfc for s in b.states])
    assert np.array_equal(ya[perm], yb)


def test_slow_vision_contracts_toward_fixed_point():
    cfg = desk_config()
    theta = init_parameters(cfg, 3, 2.0)
    frame = np.random.default_rng(3).uniform(-1, 1, (12, 16))
    s0 = init_state(cfg)
    s1, _ = forward_step(cfg, theta, s0, frame)
    s2, _ = forward_step(cfg, theta, s1, frame)
    assert np.linalg.norm(s2.u_vs - s1.u_vs) < np.linalg.norm(s1.u_vs - s0.u_vs)


def test_open_loop_matches_manual_steps_and_is_deterministic():
    cfg = tiny_config()
    theta = init_parameters(cfg, 0, 2.0)
    frames = np.random.default_rng(0).uniform(-1, 1, (5, 6, 8))
    traj = run_open_loop(cfg, theta, frames)
    assert len(traj) == 5
    s = init_state(cfg)
    for t, f in enumerate(frames):
        s, y = forward_step(cfg, theta, s, f)
        assert np.array_equal(y, traj.outputs[t])
    assert np.array_equal(run_open_loop(cfg, theta, frames).outputs, traj.outputs)
    assert len(run_open_loop(cfg, theta, frames[:1])) == 1


def test_batched_step_matches_single():
    cfg = desk_config()
    theta = init_parameters(cfg, 1, 2.0)
    frames = np.random.default_rng(1).uniform(-1, 1, (3, 12, 16))
    sb, yb = forward_step(cfg, theta, init_state(cfg, batch=3), frames)
    for i in range(3):
        s, y = forward_step(cfg, theta, init_state(cfg), frames[i])
        assert np.allclose(y, yb[i], atol=1e-13)


def test_divergence_names_layer():
    cfg = tiny_config()
    theta = init_parameters(cfg, 0, 1.0)
    theta.b_ms[0] = np.nan
    with pytest.raises(DivergenceError) as err:
        forward_step(cfg, theta, init_state(cfg), np.zeros((6, 8)))
    assert err.value.layer == "M_S" and err.value.step == 0


def test_frame_shape_checked():
    cfg = tiny_config()
    with pytest.raises(ConfigurationError):
        forward_step(cfg, ParameterSet(cfg), init_state(cfg), np.zeros((5, 8)))


class FixedEnv:
    """Ignores actions, always shows the same frame."""

    def __init__(self, frame):
        self.frame = frame
        self.pose = np.zeros(2)

    def render(self, t):
        return self.frame

    def step(self, action):
        pass

    def pose_vector(self):
        return self.pose


def test_closed_loop_with_inert_env_equals_open_loop():
    cfg = tiny_config()
    theta = init_parameters(cfg, 0, 2.0)
    frame = np.random.default_rng(0).uniform(-1, 1, (6, 8))
    closed = run_closed_loop(cfg, theta, FixedEnv(frame), 9)
    opened = run_open_loop(cfg, theta, np.repeat(frame[None], 9, axis=0))
    assert np.allclose(closed.outputs, opened.outputs, atol=1e-14)
    assert len(closed) == 9


def test_occlusion_schedule():
    cfg = tiny_config()
    theta = init_parameters(cfg, 0, 2.0)
    frame = np.random.default_rng(0).uniform(-1, 1, (6, 8))
    full = run_closed_loop(cfg, theta, FixedEnv(frame), 6, OcclusionSchedule(0))
    assert not full.frames.any()
    late = run_closed_loop(cfg, theta, FixedEnv(frame), 6, OcclusionSchedule(6))
    none = run_closed_loop(cfg, theta, FixedEnv(frame), 6)
    assert np.array_equal(late.outputs, none.outputs)
    with pytest.raises(ValueError):
        OcclusionSchedule(-1)


def test_closed_loop_many_matches_single():
    cfg = tiny_config()
    theta = init_parameters(cfg, 0, 2.0)
    rng = np.random.default_rng(0)
    frames = rng.uniform(-1, 1, (2, 6, 8))
    many = run_closed_loop_many(cfg, theta, [FixedEnv(f) for f in frames], 5, [None, 2])
    single = run_closed_loop(cfg, theta, FixedEnv(frames[1]), 5, OcclusionSchedule(2))
    assert np.allclose(many[1].outputs, single.outputs, atol=1e-13)
