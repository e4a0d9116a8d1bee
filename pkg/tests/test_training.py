import numpy as np
import pytest

from carflow.cli import main
from carflow.network import SceneFlowNet, load_checkpoint
from carflow.tensor import NonFiniteError
from carflow.traindata import SceneDataset
from carflow.training import (ConfigParseError, RunConfig, Trainer, load_training_checkpoint, parse_run_config,
                              save_training_checkpoint)
from toyrun import TOY_NET, gen, toy_config_text, write_config


def test_parse_reads_network_and_run_keys():
    cfg = parse_run_config(toy_config_text(lr=0.002, batch_size=2, max_steps=7) + "# trailing comment\n")
    assert cfg.lr == 0.002 and cfg.batch_size == 2 and cfg.max_steps == 7
    assert cfg.network.level_sizes == (8, 6, 4, 2)
    assert (cfg.beta1, cfg.beta2, cfg.decay_rate, cfg.decay_step) == (0.9, 0.99, 0.5, 80)


@pytest.mark.parametrize("text,line", [
    ("lr = 0.1\nwat = 3\n", 2),
    ("lr = 0.1\n\n# note\nlr = 0.2\n", 4),
    ("batch_size = four\n", 1),
    ("lr 0.1\n", 1),
    ("k_conv = 3\nwidths = a, b\n", None),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigParseError) as info:
        parse_run_config(text)
    if line is not None:
        assert info.value.line == line and str(info.value).startswith(f"line {line}:")


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigParseError):
        parse_run_config("beta1 = 1.5\n")
    with pytest.raises(ConfigParseError):
        parse_run_config("aggregation = mean\n")


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return gen(tmp_path_factory.mktemp("scenes"), scenes=5)


def test_zero_steps_checkpoint_equals_initialization(data, tmp_path):
    cfg = write_config(tmp_path / "run.cfg", max_steps=0)
    out = tmp_path / "init.carf"
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(out)]) == 0
    params, _ = load_checkpoint(out)
    init = SceneFlowNet(parse_run_config(TOY_NET).network).param_dict()
    assert set(params) == set(init)
    for name, p in init.items():
        assert np.array_equal(params[name], p.data.astype(np.float32).astype(np.float64))
    assert (tmp_path / "init.carf.loss.csv").read_text() == "step,loss,lr\n"


def _train(data, tmp_path, name, steps, resume=None):
    cfg = write_config(tmp_path / f"{name}.cfg", max_steps=steps, batch_size=2, decay_step=1)
    out = tmp_path / f"{name}.carf"
    argv = ["train", "--data", str(data), "--config", str(cfg), "--out", str(out), "--threads", "1"]
    if resume:
        argv += ["--resume", str(resume), "--log", str(tmp_path / f"{resume.stem}.carf.loss.csv")]
    assert main(argv) == 0
    return out


def test_resume_is_bitwise_equal_to_uninterrupted(data, tmp_path):
    # 5 scenes at batch 2 gives 3 steps per epoch; stopping at 4 splits an epoch
    full = _train(data, tmp_path, "full", 7)
    part = _train(data, tmp_path, "part", 4)
    resumed = _train(data, tmp_path, "resumed", 7, resume=part)
    assert resumed.read_bytes() == full.read_bytes()
    assert (tmp_path / "part.carf.loss.csv").read_text() == (tmp_path / "full.carf.loss.csv").read_text()


def test_loss_log_rows(data, tmp_path):
    _train(data, tmp_path, "log", 7)
    rows = (tmp_path / "log.carf.loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss,lr"
    steps = [int(r.split(",")[0]) for r in rows[1:]]
    lrs = [float(r.split(",")[2]) for r in rows[1:]]
    assert steps == list(range(1, 8))
    # decay every epoch of 3 steps
    assert lrs == [1e-3] * 3 + [5e-4] * 3 + [2.5e-4]


def test_training_checkpoint_restores_optimizer_state(data, tmp_path):
    cfg = parse_run_config(toy_config_text(batch_size=2))
    tr = Trainer(cfg, SceneDataset(data, 32))
    tr.run(2)
    path = tmp_path / "t.carf"
    save_training_checkpoint(path, tr.net, cfg, tr.state)
    net, cfg2, state = load_training_checkpoint(path)
    assert cfg2 == cfg and state.step_count == 2
    for name in tr.state.first_moment:
        assert np.array_equal(state.first_moment[name], tr.state.first_moment[name])
        assert np.array_equal(state.second_moment[name], tr.state.second_moment[name])


def test_checkpoint_cadence_writes_during_training(data, tmp_path):
    cfg = parse_run_config(toy_config_text(batch_size=2, checkpoint_every=2))
    tr = Trainer(cfg, SceneDataset(data, 32))
    path = tmp_path / "c.carf"
    tr.run(3, checkpoint_path=path)
    assert load_training_checkpoint(path)[2].step_count == 2


def test_non_finite_loss_raises(data):
    cfg = parse_run_config(toy_config_text(batch_size=2))
    tr = Trainer(cfg, SceneDataset(data, 32))
    tr.net.coarse_fc.bias.data[:] = 1e300
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NonFiniteError):
        tr.train_step()


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.lr, cfg.batch_size, cfg.network.n_input) == (1e-3, 4, 512)
