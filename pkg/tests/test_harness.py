import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from liquidbeam.channel import SceneConfig
from liquidbeam.dataset import generate_dataset, read_dataset, write_dataset
from liquidbeam.harness.cli import main
from liquidbeam.harness.config import OUT_DIR_ENV, ConfigError, parse_config, valid_keys
from liquidbeam.harness.evaluate import evaluate, score_beams, write_report_csv
from liquidbeam.harness.sweep import MissingCheckpointError, read_sweep_csv, run_sweep
from liquidbeam.harness.train import train
from liquidbeam.models import TrackerModel

TINY_SCENE = SceneConfig(n_antennas=16, n_beams=16, n_slots=3)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(TINY_SCENE, 16, 8, seed=3)


def tiny_cfg(**kw):
    base = dict(preset="tiny", epochs=2, batch_size=8, n_train=16, n_val=8)
    base.update(kw)
    preset = base.pop("preset")
    return parse_config(preset=preset, **base)


# -- config ---------------------------------------------------------------

def test_alias_in_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nQ = 64\nN_t = 32   # trailing\n\nepochs = 7\nseeds = 1, 2, 3\n")
    cfg = parse_config(f)
    assert cfg.scene.n_beams == 64 and cfg.scene.n_antennas == 32
    assert cfg.epochs == 7 and cfg.seeds == (1, 2, 3)


def test_type_error_names_line(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("Q = 16\n\nepochs = abc\n")
    with pytest.raises(ConfigError, match=r"run\.cfg:3"):
        parse_config(f)


def test_unknown_key_lists_valid_keys(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("bogus = 1\n")
    with pytest.raises(ConfigError) as info:
        parse_config(f)
    assert "bogus" in str(info.value)
    assert all(k in str(info.value) for k in ("n_beams", "epochs", "learning_rate"))
    assert "n_beams" in valid_keys()


def test_flags_override_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("epochs = 5\nlr = 0.01\n")
    cfg = parse_config(f, overrides=["epochs=9"], learning_rate=0.5)
    assert cfg.epochs == 9 and cfg.learning_rate == 0.5


def test_flags_only_without_file():
    cfg = parse_config(None, N_F=11, Q=16, N_t=16, model="ode-lstm", epochs=3)
    assert cfg.scene.noise_figure_db == 11 and cfg.model == "ode-lstm"


def test_defaults_mirror_full_scale_setup():
    cfg = parse_config()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate) == (100, 32, 3e-5)
    assert cfg.tbars == tuple(round(0.1 * k, 1) for k in range(1, 10))
    sc = cfg.scene
    assert (sc.n_antennas, sc.n_beams, sc.n_slots, sc.slot_length) == (64, 64, 10, 0.16)


def test_missing_config_file_and_bad_preset(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.cfg")
    with pytest.raises(ConfigError):
        parse_config(preset="laptop")
    with pytest.raises(ConfigError):
        parse_config(model="gru")


def test_out_dir_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "elsewhere"))
    assert parse_config().resolved_out_dir() == tmp_path / "elsewhere"


# -- evaluation -----------------------------------------------------------

def test_oracle_predictor_scores_one(data):
    _, va = data
    rep = score_beams(va, va.labels)
    assert np.all(rep.per_episode == 1.0)
    assert rep.overall == 1.0


def test_random_predictor_on_single_path_scenes_is_poor():
    cfg = SceneConfig(n_antennas=64, n_beams=64, n_paths=1, n_slots=2)
    _, va = generate_dataset(cfg, 1, 60, seed=8)
    beams = np.random.default_rng(0).integers(0, 64, size=va.labels.shape)
    rep = score_beams(va, beams)
    assert rep.overall < 0.5
    assert np.all((rep.per_episode >= 0) & (rep.per_episode <= 1))


def test_report_marginals_and_csv(tmp_path, data):
    _, va = data
    rep = evaluate(TrackerModel("lnn", 16, seed=1), va)
    assert rep.se_n.shape == (3, 9)
    assert np.all((rep.se_n >= 0) & (rep.se_n <= 1))
    np.testing.assert_allclose(rep.by_slot, rep.se_n.mean(axis=1))
    np.testing.assert_allclose(rep.by_tbar, rep.se_n.mean(axis=0))
    write_report_csv(tmp_path / "r.csv", rep)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][:2] == ["slot", "0.1"] and len(rows) == 5


def test_evaluate_is_pure(tmp_path, data):
    tr, va = data
    res = train(tiny_cfg(), tr, out_dir=tmp_path)
    a = evaluate(res.checkpoint, va)
    b = evaluate(res.checkpoint, va)
    c = evaluate(res.model, va)
    assert np.array_equal(a.per_episode, b.per_episode)
    assert np.array_equal(a.per_episode, c.per_episode)


def test_evaluate_kind_mismatch(tmp_path, data):
    _, va = data
    TrackerModel("lstm", 16).save(tmp_path / "m.lbmt")
    with pytest.raises(ValueError):
        evaluate(tmp_path / "m.lbmt", va, kind="lnn")


def test_missing_channels_is_data_error(data):
    from liquidbeam.dataset import DataError
    _, va = data
    stripped = replace(va, channels=np.zeros((0,), np.complex64))
    with pytest.raises(DataError):
        score_beams(stripped, va.labels)


# -- training -------------------------------------------------------------

def test_initial_loss_near_log_q(data):
    tr, _ = data
    res = train(tiny_cfg(epochs=1), tr)
    assert abs(res.losses[0] - math.log(16)) < 0.1 * math.log(16)
    assert len(res.losses) == 2


def test_scene_mismatch_rejected_before_training(data):
    tr, _ = data
    with pytest.raises(ConfigError, match="Q=16"):
        train(parse_config(preset="tiny", Q=64, N_t=64), tr)


def test_loss_csv_deterministic(tmp_path, data):
    tr, _ = data
    for name in ("a", "b"):
        train(tiny_cfg(model="ode-lstm"), tr, out_dir=tmp_path / name)
    first = (tmp_path / "a" / "ode-lstm_loss.csv").read_text()
    assert first == (tmp_path / "b" / "ode-lstm_loss.csv").read_text()
    assert first.splitlines()[0] == "epoch,loss" and len(first.splitlines()) == 4
    assert (tmp_path / "a" / "ode-lstm.lbmt").read_bytes() == (tmp_path / "b" / "ode-lstm.lbmt").read_bytes()


def test_training_reduces_loss(data):
    tr, _ = data
    res = train(tiny_cfg(epochs=8), tr)
    assert res.losses[-1] < res.losses[0]


# -- sweeps ---------------------------------------------------------------

@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny_cfg(tbars=(0.7, 0.1, 0.4), noise_sweep=(13.0, 9.0), seeds=(0, 1), n_train=8, n_val=4)
    cache = {}
    out = {ax: run_sweep(cfg, ax, root, fit=True, cache=cache)
           for ax in ("training_instant", "prediction_instant", "noise_factor")}
    return cfg, root, out


def test_sweep_axes_sorted_and_match_config(swept):
    cfg, root, out = swept
    header, rows = read_sweep_csv(root / "prediction_instant.csv")
    assert header == ["tbar", "lnn", "lstm", "ode-lstm"]
    assert rows[:, 0].tolist() == [0.1, 0.4, 0.7]
    _, rows = read_sweep_csv(root / "noise_factor.csv")
    assert rows[:, 0].tolist() == [9.0, 13.0]
    _, rows = read_sweep_csv(root / "training_instant.csv")
    assert rows[:, 0].tolist() == [1, 2, 3]
    for ax in out:
        assert (root / f"{ax}.png").stat().st_size > 0
        assert (root / f"{ax}_by_seed.csv").exists()


def test_sweep_lstm_column_constant_and_six_digits(swept):
    _, root, out = swept
    _, rows = read_sweep_csv(root / "prediction_instant.csv")
    assert np.all(rows[:, 2] == rows[0, 2])
    for line in (root / "noise_factor.csv").read_text().splitlines()[1:]:
        for cell in line.split(",")[1:]:
            assert len(cell.replace(".", "").lstrip("0")) <= 6


def test_sweep_means_over_seeds(swept):
    _, _, out = swept
    res = out["noise_factor"]
    for kind, vals in res.table.items():
        np.testing.assert_allclose(vals, (res.per_seed[(0, kind)] + res.per_seed[(1, kind)]) / 2)


def test_sweep_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpointError, match="lnn.lbmt"):
        run_sweep(tiny_cfg(), "noise_factor", tmp_path)


# -- CLI ------------------------------------------------------------------

def test_cli_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2


def test_cli_gen_data(tmp_path, capsys):
    out = tmp_path / "d.bin"
    assert main(["gen-data", "--preset", "tiny", "--seed", "1", "--out", str(out),
                 "--set", "n_train=4", "--set", "n_val=2"]) == 0
    ds = read_dataset(out)
    assert len(ds) == 4 and ds.master_seed == 1
    assert len(read_dataset(tmp_path / "d.val.bin")) == 2


def test_cli_sweep_without_checkpoints(tmp_path, capsys):
    assert main(["sweep", "--preset", "tiny", "--axis", "noise_factor", "--out", str(tmp_path)]) == 1
    assert "missing checkpoint" in capsys.readouterr().err


def test_cli_bad_config_exits_nonzero(tmp_path, capsys):
    f = tmp_path / "x.cfg"
    f.write_text("epochs = abc\n")
    assert main(["train", "--config", str(f)]) == 1
    assert "x.cfg:1" in capsys.readouterr().err


def test_cli_train_and_eval(tmp_path, capsys, data):
    tr, va = data
    write_dataset(tmp_path / "tr.lbds", tr)
    write_dataset(tmp_path / "va.lbds", va)
    assert main(["train", "--preset", "tiny", "--kind", "lstm", "--data", str(tmp_path / "tr.lbds"),
                 "--out", str(tmp_path / "m"), "--set", "epochs=1"]) == 0
    assert (tmp_path / "m" / "lstm_loss.png").exists()
    assert main(["eval", "--checkpoint", str(tmp_path / "m" / "lstm.lbmt"),
                 "--data", str(tmp_path / "va.lbds"), "--out", str(tmp_path / "m")]) == 0
    assert "mean SE_N" in capsys.readouterr().out
    assert (tmp_path / "m" / "lstm_eval.csv").exists()


def test_cli_selftest_and_gradcheck(capsys):
    assert main(["selftest"]) == 0
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "full model ode-lstm" in out and "FAIL" not in out
