import logging

import pytest

from aical.config import RunConfig, apply_overrides, dump_config, load_config


def test_defaults_without_file():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.sim_config(0).frames_per_sequence == 750
    assert cfg.calib.horizons == (1, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50)


def test_round_trip(tmp_path):
    cfg = RunConfig(work_dir="w", seeds=(1, 2, 3))
    cfg = apply_overrides(cfg, {"sim.n_sequences": 9, "calib.maxiter": 40, "anomaly.alpha": 1.5})
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[sim]\nframes_per_sequence = 300\n[run]\nseeds = 4, 5\n")
    cfg = load_config(path)
    assert cfg.sim.frames_per_sequence == 300 and cfg.seeds == (4, 5)
    assert cfg.calib == RunConfig().calib


@pytest.mark.parametrize("text, match", [("[sim]\nbogus = 1\n", "sim.bogus"),
                                         ("[weird]\nx = 1\n", "weird"),
                                         ("[run]\nsim = 1\n", "run.sim")])
def test_unknown_keys_rejected(tmp_path, text, match):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ValueError, match=match):
        load_config(path)


def test_overrides_win_and_are_logged(caplog):
    cfg = RunConfig()
    with caplog.at_level(logging.INFO, logger="aical.config"):
        out = apply_overrides(cfg, {"work_dir": "elsewhere", "sim.n_sequences": 7, "seeds": None})
    assert out.work_dir == "elsewhere" and out.sim.n_sequences == 7 and out.seeds == cfg.seeds
    assert "sim.n_sequences" in caplog.text and "work_dir" in caplog.text
    caplog.clear()
    with caplog.at_level(logging.INFO, logger="aical.config"):
        apply_overrides(out, {"sim.n_sequences": 7})
    assert caplog.text == ""


def test_digest_ignores_paths():
    a = RunConfig(work_dir="a", report_dir="r1")
    b = RunConfig(work_dir="b")
    assert a.digest() == b.digest()
    assert a.digest() != apply_overrides(a, {"calib.knn_k": 5}).digest()


def test_report_dir_default(tmp_path):
    assert RunConfig(work_dir=str(tmp_path)).reports == tmp_path / "report"
    assert RunConfig(work_dir="x", report_dir=str(tmp_path)).reports == tmp_path
