import numpy as np
import pytest

from mmwave_handover.channel import BlockageDistParams, LinkBudget
from mmwave_handover.errors import ContractViolation, InputError
from mmwave_handover.scene import (
    DepthCamera,
    Pedestrian,
    SceneConfig,
    blocked_fraction,
    blocks_los,
    crossing_interval,
    generate_episode,
    initial_pedestrians,
    occlusion_depth,
    point_segment_distance,
    render_depth_frame,
    step_pedestrians,
)

BS1, STA = (4.5, 2.45, 0.85), (1.6, 2.45, 0.7)


def _walker(x, y, width=0.5, vy=1.0, depth=14.0):
    return Pedestrian(np.array([x, y, 0.0]), np.array([0.0, vy, 0.0]), width, 1.7, depth_db=depth)


def test_walk_advances_along_path():
    cfg = SceneConfig()
    p = _walker(3.05, 1.0)
    (q,) = step_pedestrians([p], cfg, 0.1, np.random.default_rng(0))
    assert q.position[1] == pytest.approx(1.1)
    assert step_pedestrians([p], cfg, 0.0, np.random.default_rng(0))[0] is p
    with pytest.raises(InputError):
        step_pedestrians([p], cfg, -0.1, np.random.default_rng(0))


def test_collapsed_speed_range_replays_identically():
    cfg = SceneConfig(pedestrian_speed_range=(1.0, 1.0))
    a = generate_episode(cfg, LinkBudget(), BlockageDistParams(), 20.0, np.random.default_rng(3), render=False)
    b = generate_episode(cfg, LinkBudget(), BlockageDistParams(), 20.0, np.random.default_rng(3), render=False)
    assert np.array_equal(a.tracks, b.tracks)
    assert np.array_equal(a.power.p1_dbm, b.power.p1_dbm)


def test_occlusion_geometry():
    assert occlusion_depth([_walker(3.05, 0.5)], BS1, STA) == 0.0
    assert occlusion_depth([_walker(3.05, 2.45, depth=13.0)], BS1, STA) == 13.0
    with pytest.raises(ContractViolation):
        occlusion_depth([], BS1, BS1)


def test_grazing_tangency_counts():
    # LOS runs along y = 2.45; a 0.5 m wide body centred 0.25 m away just touches it
    p = _walker(3.05, 2.45 + 0.25, width=0.5)
    assert point_segment_distance(p.position[:2], STA[:2], BS1[:2]) == pytest.approx(0.25)
    assert blocks_los(p, BS1, STA)
    assert not blocks_los(_walker(3.05, 2.45 + 0.2501, width=0.5), BS1, STA)


def test_crossing_interval_centred_on_los():
    s_in, s_out = crossing_interval(SceneConfig(), 0.5)
    # path starts at y = 0.30 and the LOS sits at y = 2.45
    assert s_in == pytest.approx(2.15 - 0.25, abs=2e-3)
    assert s_out == pytest.approx(2.15 + 0.25, abs=2e-3)


def test_empty_room_frame_is_constant_background():
    cfg = SceneConfig()
    a = render_depth_frame([], cfg).pixels
    b = render_depth_frame([], cfg).pixels
    assert a.shape == (40, 40) and a.dtype == np.uint8
    assert np.array_equal(a, b)


def test_near_pedestrian_saturates_blob():
    cfg = SceneConfig()
    cam = DepthCamera(cfg)
    x, y, _ = cfg.camera
    fwd = cam.forward
    p = Pedestrian(np.array([x + 0.35 * fwd[0] / np.hypot(*fwd[:2]), y + 0.35 * fwd[1] / np.hypot(*fwd[:2]), 0.0]),
                   np.zeros(3), 0.5, 1.8)
    px = render_depth_frame([p], cfg, cam).pixels
    assert (px == 255).sum() > 100


def test_camera_angle_changes_frames_not_occlusion():
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    dist, budget = BlockageDistParams(), LinkBudget()
    a = generate_episode(SceneConfig(camera_angle_id="A"), budget, dist, 30.0, rng_a)
    b = generate_episode(SceneConfig(camera_angle_id="B"), budget, dist, 30.0, rng_b)
    assert np.array_equal(a.attenuation, b.attenuation)
    assert a.blockage_onsets == b.blockage_onsets
    assert not np.array_equal(a.frames, b.frames)


def test_no_pedestrians_static_episode():
    cfg = SceneConfig(n_pedestrians=0)
    ep = generate_episode(cfg, LinkBudget(), BlockageDistParams(), 2.0, np.random.default_rng(0), noise_db_std=0.0)
    assert len(ep) == 60
    assert np.all(ep.power.p1_dbm == ep.power.p1_dbm[0])
    assert np.all(ep.frames == ep.frames[0])
    assert ep.blockage_onsets == []


def test_single_crossing_labels_one_onset_after_approach():
    cfg = SceneConfig(n_pedestrians=1, spawn_rate=1e6, pedestrian_speed_range=(1.0, 1.0))
    ep = generate_episode(cfg, LinkBudget(), BlockageDistParams(), 4.0, np.random.default_rng(1), noise_db_std=0.0)
    assert len(ep.blockage_onsets) == 1
    onset = ep.blockage_onsets[0]
    # the walker is visible and moving toward the LOS before the label
    y = ep.tracks[:onset, 0, 1]
    active = ep.tracks[:onset, 0, 2] > 0
    assert active.sum() > 15
    assert np.all(np.diff(y[active]) > 0) and y[active][-1] < 2.45
    assert not np.array_equal(ep.frames[onset - 10], ep.frames[0])


def test_frame_count_and_alignment():
    ep = generate_episode(SceneConfig(), LinkBudget(), BlockageDistParams(), 10.0, np.random.default_rng(2))
    assert len(ep.frames) == len(ep.power) == 300
    assert ep.power.tau == pytest.approx(1 / 30)
    assert 0.0 <= blocked_fraction(ep) <= 1.0


def test_causality_corridor():
    # every onset is preceded by a walker within 0.7 m of the LOS line in the prior 0.7 s
    cfg = SceneConfig(spawn_rate=0.5)
    ep = generate_episode(cfg, LinkBudget(), BlockageDistParams(), 120.0, np.random.default_rng(4), render=False)
    assert len(ep.blockage_onsets) > 10
    for o in ep.blockage_onsets:
        lo = max(0, o - 21)
        tr = ep.tracks[lo:o]
        near = (tr[..., 2] > 0) & (np.abs(tr[..., 1] - 2.45) < 0.7) & (tr[..., 1] < 2.45)
        assert near.any()


def test_initial_pedestrians_idle():
    peds = initial_pedestrians(SceneConfig(), np.random.default_rng(0))
    assert len(peds) == 2 and not any(p.active for p in peds)
