import numpy as np
import pytest

from mmwave_handover import harness
from mmwave_handover.channel import LinkBudget, PowerTrace, write_power_csv
from mmwave_handover.cli import main
from mmwave_handover.env import EpisodeLog
from mmwave_handover.errors import CalibrationError, FormatError, InputError
from mmwave_handover.harness import ExperimentConfig
from mmwave_handover.scene import SceneConfig


def _tiny(**extra):
    items = {"data.train_samples": "150", "data.test_samples": "150", "train.iterations": "1",
             "train.target_sync_every": "50", "t_dis_sweep": "0,0.06", "scene.spawn_rate": "0.5"}
    items.update(extra)
    return ExperimentConfig.from_mapping(items)


# -- config ------------------------------------------------------------------


def test_config_text_round_trip():
    cfg = _tiny(seed="7", **{"channel.bs2_rate_mbps": "150"})
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.t_dis_sweep == (0.0, 0.06) and back.seed == 7


def test_config_parsing_rules():
    cfg = ExperimentConfig.from_text("# comment\n\nseed = 3   # trailing\ntrain.iterations=5\n")
    assert cfg.seed == 3 and cfg.train.iterations == 5
    with pytest.raises(InputError, match="unknown config key"):
        ExperimentConfig.from_text("train.iteratons = 5\n")
    with pytest.raises(InputError, match="duplicate"):
        ExperimentConfig.from_text("seed = 1\nseed = 2\n")
    with pytest.raises(InputError, match="cannot parse"):
        ExperimentConfig.from_text("seed = one\n")
    with pytest.raises(InputError):
        ExperimentConfig.from_text("t_dis_sweep = 0,-0.03\n")
    with pytest.raises(InputError):
        ExperimentConfig.from_text("scenario = synthetic-C\n")
    with pytest.raises(InputError):
        ExperimentConfig.from_text("scenario = external-trace\n")
    with pytest.raises(InputError, match="not found"):
        ExperimentConfig.load("/nonexistent/cfg.txt")


def test_schema_is_exhaustive():
    text = ExperimentConfig.schema()
    for key in ExperimentConfig.keys():
        assert f"\n{key} | " in text
    assert len(text.splitlines()) == len(ExperimentConfig.keys()) + 1


def test_output_root_env_override(monkeypatch, tmp_path):
    cfg = ExperimentConfig()
    monkeypatch.delenv(harness.OUTPUT_ENV_VAR, raising=False)
    assert str(cfg.resolved_output_dir()) == "runs"
    monkeypatch.setenv(harness.OUTPUT_ENV_VAR, str(tmp_path))
    assert cfg.resolved_output_dir() == tmp_path


def test_derived_seeds_differ_and_repeat():
    a = harness.derived_seeds(0, 0, "image")
    assert a == harness.derived_seeds(0, 0, "image")
    assert a != harness.derived_seeds(0, 0, "power")
    assert a != harness.derived_seeds(1, 0, "image")


# -- files -------------------------------------------------------------------


def test_frame_file_round_trip_and_corruption(tmp_path):
    frames = np.random.default_rng(0).integers(0, 256, (5, 4, 3)).astype(np.uint8)
    path = tmp_path / "f.mmhf"
    harness.write_frames(frames, 30.0, path)
    back, fps = harness.read_frames(path)
    assert np.array_equal(back, frames) and fps == 30.0
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"MMHX" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        harness.read_frames(tmp_path / "magic")
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="truncated"):
        harness.read_frames(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        harness.read_frames(tmp_path / "long")
    with pytest.raises(InputError):
        harness.write_frames(frames.astype(float), 30.0, path)


def _external_files(tmp_path, n_power, n_frames, noise=0.0):
    cfg = _tiny(**{"scene.noise_db_std": str(noise)})
    data = harness.build_dataset(cfg)
    write_power_csv(PowerTrace(data.power.tau, data.power.p1_dbm[:n_power], data.power.p2_dbm[:n_power]),
                    tmp_path / "p.csv")
    harness.write_frames(data.frames[:n_frames], data.fps, tmp_path / "f.mmhf")
    return data


def test_ingest_round_trip(tmp_path):
    data = _external_files(tmp_path, 300, 300)
    ep = harness.ingest_external(tmp_path / "p.csv", tmp_path / "f.mmhf", LinkBudget().p_los_dbm)
    assert np.array_equal(ep.frames, data.frames)
    assert np.allclose(ep.power.p1_dbm, data.power.p1_dbm, atol=1e-6)
    assert ep.power.tau == pytest.approx(1 / 30)
    assert ep.blockage_onsets == data.blockage_onsets and ep.blockage_ends == data.blockage_ends


def test_ingest_length_mismatch_names_both(tmp_path):
    _external_files(tmp_path, 300, 299)
    with pytest.raises(FormatError, match="300 power rows vs 299 frames"):
        harness.ingest_external(tmp_path / "p.csv", tmp_path / "f.mmhf")


def test_ingest_missing_file(tmp_path):
    with pytest.raises(InputError, match="nope.csv"):
        harness.ingest_external(tmp_path / "nope.csv", tmp_path / "f.mmhf")
    cfg = _tiny(scenario="external-trace", **{"data.power_csv": str(tmp_path / "nope.csv"),
                                             "data.frames": str(tmp_path / "f.mmhf")})
    with pytest.raises(InputError, match="nope.csv"):
        harness.run_experiment(cfg, write=False)


def test_external_scenario_runs_like_synthetic(tmp_path):
    _external_files(tmp_path, 300, 300)
    cfg = _tiny(scenario="external-trace", t_dis_sweep="0",
                **{"train.iterations": "0", "data.power_csv": str(tmp_path / "p.csv"),
                   "data.frames": str(tmp_path / "f.mmhf")})
    rep = harness.run_experiment(cfg, write=False)
    assert len(rep.rows) == 4


# -- metrics -----------------------------------------------------------------


def _log(t, j, c, a, r=None, dt=0.03):
    t = np.asarray(t)
    r = np.full(len(t), 100.0) if r is None else np.asarray(r, float)
    return EpisodeLog(t=t, j=np.asarray(j), c=np.asarray(c), a=np.asarray(a), reward_mbps=r,
                      q_values=None, tau=dt, n_window=2)


def test_lead_time_definition():
    t = np.arange(1, 40)
    a = np.ones(len(t), int)
    j = np.ones(len(t), int)
    a[t == 15] = 2  # five epochs of 30 ms before the onset at 20
    j[t > 15] = 2
    lg = _log(t, j, np.zeros(len(t), int), a)
    leads = harness.lead_time(lg, [20, 33], [25, 36], 0.03)
    assert leads[0] == pytest.approx(-0.150)
    assert np.isnan(leads[1])  # already on BS2: missed


def test_lead_search_respects_previous_event():
    t = np.arange(1, 60)
    a = np.ones(len(t), int)
    a[t == 12] = 2
    a[t == 34] = 2
    lg = _log(t, np.ones(len(t), int), np.zeros(len(t), int), a)
    leads = harness.lead_time(lg, [14, 30], [20, 38], 0.03, search_s=1.5)
    assert leads[0] == pytest.approx(-0.06)
    assert leads[1] == pytest.approx(0.12)  # the handover at 12 belongs to the first event
    assert np.isnan(harness.lead_time(lg, [50], [55], 0.03, search_s=0.3)[0])


def test_window_mask_margin():
    lg = _log(np.arange(1, 30), np.ones(29, int), np.zeros(29, int), np.ones(29, int))
    m = harness.window_mask(lg, [10], [12], 2)
    assert (lg.t[m] + 1).tolist() == [8, 9, 10, 11, 12, 13, 14]


def test_policy_metrics_counts_missed_as_not_led():
    t = np.arange(1, 40)
    a = np.ones(len(t), int)
    a[t == 6] = 2
    a[t == 20] = 2
    lg = _log(t, np.ones(len(t), int), np.zeros(len(t), int), a)
    m = harness.policy_metrics(0.0, "x", lg, [10, 24, 34], [12, 26, 36], 0.03, harness.ReportSection())
    assert m.n_events == 3 and m.n_missed == 1
    assert m.median_lead_s == pytest.approx(-0.12)
    assert m.frac_led == pytest.approx(2 / 3)


def test_crossover_detection():
    ev = {"t": np.arange(10, 20), "end": 17,
          "image": np.array([0, 0, 0, 1, 3, 5, 7, 9, 9, 9.0]),
          "power": np.array([1, 2, 3, 3, 3, 3, 4, 5, 6, 7.0])}
    assert harness.crossover(ev)
    ev["image"] = ev["power"] + 1
    assert not harness.crossover(ev)
    ev["image"] = ev["power"] - 1
    assert not harness.crossover(ev)


# -- calibration -------------------------------------------------------------


def test_calibration_trivial_and_unreachable():
    assert harness.calibrate_arrival_rate(SceneConfig(), 0.0) == 0.0
    with pytest.raises(CalibrationError) as err:
        harness.calibrate_arrival_rate(SceneConfig(), 0.9, 0.01, rate_hi=4.0)
    assert err.value.bracket == (0.0, 4.0)
    with pytest.raises(InputError):
        harness.calibrate_arrival_rate(SceneConfig(), 0.2, duration=100.0)
    with pytest.raises(InputError):
        harness.calibrate_arrival_rate(SceneConfig(), 1.0)


def test_calibration_reaches_target_and_is_monotone():
    rate = harness.calibrate_arrival_rate(SceneConfig(), 0.21, 0.02)
    assert rate > 0
    fracs = []
    for r in (0.1, 0.3, 1.0):
        cfg = ExperimentConfig.from_mapping({"scene.spawn_rate": str(r)})
        sc = harness.scene_config(cfg)
        from mmwave_handover.scene import blocked_fraction, generate_episode
        from mmwave_handover.channel import BlockageDistParams
        ep = generate_episode(sc, LinkBudget(), BlockageDistParams(), 600.0, np.random.default_rng(0),
                              noise_db_std=0.0, render=False)
        fracs.append(blocked_fraction(ep))
    assert fracs[0] < fracs[1] < fracs[2]


# -- experiment --------------------------------------------------------------


def test_bs1_dominant_trace_all_policies_tie():
    cfg = _tiny(t_dis_sweep="0", **{"scene.spawn_rate": "0", "scene.noise_db_std": "0",
                                    "channel.bs2_rate_mbps": "20", "train.iterations": "0"})
    rep = harness.run_experiment(cfg, write=False)
    rates = [rep.row(0.0, p).avg_rate_mbps for p in harness.POLICIES]
    assert rates == pytest.approx([200.0] * 4)
    assert len(rep.onsets) == 0


def test_run_writes_outputs_and_is_reproducible(tmp_path, monkeypatch):
    cfg = _tiny()
    monkeypatch.setenv(harness.OUTPUT_ENV_VAR, str(tmp_path / "a"))
    first = harness.run_experiment(cfg)
    monkeypatch.setenv(harness.OUTPUT_ENV_VAR, str(tmp_path / "b"))
    second = harness.run_experiment(cfg)
    assert len(first.rows) == len(cfg.t_dis_sweep) * 4
    files = harness.report_files(first.run_dir)
    assert len(files) == len(harness.DETERMINISTIC_FILES) + 2 * len(harness.POINT_DETERMINISTIC_FILES)
    for f in files:
        twin = second.run_dir / f.relative_to(first.run_dir)
        assert f.read_bytes() == twin.read_bytes(), f.name
    report = (first.run_dir / "report.csv").read_text()
    assert report.splitlines()[0] == harness.PolicyMetrics.HEADER
    assert harness.recompute_report(first.run_dir) == report
    for row in first.rows:
        if row.policy in ("image", "power"):
            assert row.best_iteration is not None
    assert (first.run_dir / "tdis_060ms" / "best_image.mmhq").read_bytes()[:4] == b"MMHQ"


def test_oracle_bounds_every_policy():
    rep = harness.run_experiment(_tiny(), write=False)
    for p in rep.points:
        best = rep.row(p.t_dis, "oracle").avg_rate_mbps
        for name in ("image", "power", "threshold"):
            assert rep.row(p.t_dis, name).avg_rate_mbps <= best + 1e-9


def test_threshold_leads_are_reactive():
    cfg = _tiny(t_dis_sweep="0.06", **{"scene.noise_db_std": "0", "train.iterations": "0",
                                       "data.train_samples": "100", "data.test_samples": "1800"})
    rep = harness.run_experiment(cfg, write=False)
    leads = rep.point(0.06).leads["threshold"]
    assert len(leads) > 5
    assert np.all(leads[~np.isnan(leads)] >= 0)


# -- CLI ---------------------------------------------------------------------


def test_cli_errors_are_machine_parsable(capsys):
    assert main(["report", "--set", "train.nope=1"]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error kind=InputError message=")
    assert main(["eval", "--snapshot", "/nonexistent.mmhq", "--set", "data.train_samples=50",
                 "--set", "data.test_samples=50"]) != 0


def test_cli_round_trip(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(harness.OUTPUT_ENV_VAR, str(tmp_path))
    cfg_path = tmp_path / "cfg.txt"
    cfg_path.write_text(_tiny(t_dis_sweep="0.03").to_text())
    base = ["--config", str(cfg_path)]
    assert main(["--print-schema"]) == 0
    assert main(["synth", *base, "--out", str(tmp_path / "syn")]) == 0
    assert (tmp_path / "syn" / "frames.mmhf").is_file() and (tmp_path / "syn" / "power.csv").is_file()
    assert main(["calibrate", *base, "--target", "0"]) == 0
    assert "spawn_rate=0.0" in capsys.readouterr().out
    assert main(["train", *base, "--agent", "power", "--t-dis", "0.03", "--out", str(tmp_path / "p.mmhq")]) == 0
    assert main(["eval", *base, "--snapshot", str(tmp_path / "p.mmhq"), "--t-dis", "0.03",
                 "--out", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text().startswith("t_ms,q_a1,q_a2,action")
    assert main(["oracle", *base, "--t-dis", "0.03", "--out", str(tmp_path / "o.csv")]) == 0
    assert main(["report", *base]) == 0
    out = capsys.readouterr().out
    run_dir = out.strip().splitlines()[-1].split("=", 1)[1]
    assert main(["report", "--from", run_dir]) == 0
    assert capsys.readouterr().out == open(f"{run_dir}/report.csv").read()
