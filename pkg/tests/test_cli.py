import json

import numpy as np
import pytest

from fmwarp import cli, data, nn
from fmwarp.errors import ConfigError

BASE_CFG = """
seed = 7
out = {out}
data.path = {data}
split.rule = fraction
split.train_frac = 0.6
arch.hidden_size = 4
arch.dense_sizes = 4,3
train.learning_rate = 0.02
train.batch_length = 48
train.max_epochs = 2
train.patience = 2
train.shuffle = true
grid.lo = -5
grid.hi = 5
grid.n_per_axis = 25
realizations = 2
synth.n_days = 12
synth.cap = 27
"""


def write_cfg(tmp_path, name="exp.cfg", **extra):
    out = tmp_path / "run"
    dataset = tmp_path / "synth.csv"
    text = BASE_CFG.format(out=out, data=dataset)
    for key, value in extra.items():
        text += f"{key.replace('__', '.')} = {value}\n"
    path = tmp_path / name
    path.write_text(text)
    return path, out, dataset


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 3  # root seed\ntrain.patience = 4\n\n# comment\n")
    cfg = cli.Config.load(str(path), {"seed": 9})
    assert cfg.get_int("seed") == 9
    assert cfg.get_int("train.patience") == 4
    assert cfg.get_bool("train.shuffle") is True  # default
    with pytest.raises(ConfigError):
        cfg.get("no.such.key")
    bad = tmp_path / "bad.cfg"
    bad.write_text("not a key value line\n")
    with pytest.raises(ConfigError):
        cli.Config.load(str(bad))


def test_synth_deterministic_and_sized(tmp_path):
    cfg_path, _, dataset = write_cfg(tmp_path, synth__n_days=30)
    cfg = cli.Config.load(str(cfg_path))
    p1 = cli.cmd_synth(cfg)
    first = p1.read_bytes()
    p2 = cli.cmd_synth(cfg)
    assert p2.read_bytes() == first
    frame, series = data.load_csv(dataset)
    assert len(frame) == 720
    by_class = {s.fuel_class: s for s in series}
    assert by_class["fm10"].values.max() <= 27.0
    assert by_class["fm1"].values.max() > 27.0  # cap applies to the sensor class only


def test_pretrain_writes_checkpoints_and_manifest(tmp_path):
    cfg_path, out, _ = write_cfg(tmp_path)
    cfg = cli.Config.load(str(cfg_path))
    cli.cmd_synth(cfg)
    pre_dir = cli.cmd_pretrain(cfg)
    ckpts = sorted(pre_dir.glob("ckpt_*.json"))
    assert len(ckpts) == 2
    manifest = json.loads((pre_dir / "manifest.json").read_text())
    assert manifest["seeds"] == [7, 8]
    assert manifest["statuses"] == ["ok", "ok"]
    assert (pre_dir / "history_0000.csv").read_text().startswith("epoch,train_loss,val_loss")
    # rerun is byte-identical
    before = {p.name: p.read_bytes() for p in pre_dir.iterdir()}
    cli.cmd_pretrain(cfg)
    after = {p.name: p.read_bytes() for p in pre_dir.iterdir()}
    assert before == after


def test_transfer_timewarp_touches_only_bias_entries(tmp_path):
    cfg_path, out, _ = write_cfg(tmp_path)
    cfg = cli.Config.load(str(cfg_path))
    cli.cmd_synth(cfg)
    cli.cmd_pretrain(cfg)
    tdir = cli.cmd_transfer(cfg, "TimeWarp", "fm1")
    pre, _ = nn.load_params(out / "pretrain" / "ckpt_0000.json")
    post, extra = nn.load_params(tdir / "ckpt_0000.json")
    assert extra["method"] == "TimeWarp"
    hidden = pre.lstm.hidden_size
    changed = sum(
        int(np.sum(post.tensors()[name] != arr)) for name, arr in pre.tensors().items()
    )
    assert changed == 2 * hidden
    surface = (tdir / "surface_0000.csv").read_text().splitlines()
    assert len(surface) == 1 + 626  # header + 625 grid + appended zero shift
    shifts = (tdir / "shifts.csv").read_text().splitlines()
    assert shifts[0] == "realization,alpha_f,alpha_i"
    assert len(shifts) == 3


def test_transfer_no_transfer_ignores_checkpoints(tmp_path):
    cfg_path, out, _ = write_cfg(tmp_path, realizations=1)
    cfg = cli.Config.load(str(cfg_path))
    cli.cmd_synth(cfg)
    # no pretrain run at all: NoTransfer must still work
    tdir = cli.cmd_transfer(cfg, "NoTransfer", "fm100")
    assert len(sorted(tdir.glob("ckpt_*.json"))) == 1
    with pytest.raises(ConfigError):
        cli.cmd_transfer(cfg, "FullFineTune", "fm100")


def test_evaluate_report_schema_and_filters(tmp_path):
    cfg_path, out, _ = write_cfg(tmp_path, realizations=1)
    cfg = cli.Config.load(str(cfg_path))
    cli.cmd_synth(cfg)
    cli.cmd_pretrain(cfg)
    cli.cmd_transfer(cfg, "TimeWarp", "fm1")
    cli.cmd_transfer(cfg, "TimeWarp", "fm100")
    eval_dir = cli.cmd_evaluate(cfg)
    lines = (eval_dir / "report.csv").read_text().splitlines()
    assert lines[0] == "method,class,filter,r2_mean,r2_std,bias_mean,bias_std,rmse_mean,rmse_std,n"
    rows = [line.split(",")[:3] for line in lines[1:]]
    # both filters for fine fuels, only "all" for the slow class
    assert ["TimeWarp", "fm1", "all"] in rows
    assert ["TimeWarp", "fm1", "le30"] in rows
    assert ["TimeWarp", "fm100", "all"] in rows
    assert ["TimeWarp", "fm100", "le30"] not in rows
    assert (eval_dir / "medians.csv").exists()
    text = cli.cmd_report(cfg)
    assert "TimeWarp" in text


def test_evaluate_perfect_oracle_model(tmp_path):
    # A constructed time-lag unit with an identity featurization reproduces
    # the no-rain synthetic targets exactly: rmse 0, r2 1 on the test span.
    cfg_path, out, dataset = write_cfg(tmp_path, synth__rain_rate=0.0)
    cfg = cli.Config.load(str(cfg_path))
    cli.cmd_synth(cfg)
    oracle = nn.construct_timelag_lstm(1.0, 0, input_size=data.N_FEATURES)
    identity = data.Normalizer(mean=np.zeros(8), std=np.ones(8))
    unit = data.TargetScaler(mean=0.0, std=1.0)
    ckpt_dir = out / "transfer" / "Oracle" / "fm1"
    ckpt_dir.mkdir(parents=True)
    nn.save_params(oracle, ckpt_dir / "ckpt_0000.json",
                   extra={"normalizer": identity.to_dict(),
                          "target_scaler": unit.to_dict(),
                          "method": "Oracle", "fuel_class": "fm1"})
    eval_dir = cli.cmd_evaluate(cfg, method_name="Oracle")
    row = (eval_dir / "report.csv").read_text().splitlines()[1].split(",")
    assert row[:3] == ["Oracle", "fm1", "all"]
    assert float(row[3]) > 1.0 - 1e-12  # r2
    assert float(row[7]) < 1e-12  # rmse


def test_transfer_stage_never_reads_test_partition(tmp_path, monkeypatch):
    cfg_path, out, _ = write_cfg(tmp_path, realizations=1)
    cfg = cli.Config.load(str(cfg_path))
    cli.cmd_synth(cfg)
    cli.cmd_pretrain(cfg)

    class CountingSplit:
        def __init__(self, inner):
            self._inner = inner
            self.test_reads = 0

        @property
        def train(self):
            return self._inner.train

        @property
        def val(self):
            return self._inner.val

        @property
        def test(self):
            self.test_reads += 1
            return self._inner.test

    counters = []
    real_split = cli.split_dataset

    def counting_split(cfg, frame, series):
        wrapped = CountingSplit(real_split(cfg, frame, series))
        counters.append(wrapped)
        return wrapped

    monkeypatch.setattr(cli, "split_dataset", counting_split)
    cli.cmd_transfer(cfg, "TimeWarp", "fm1")
    assert counters and all(c.test_reads == 0 for c in counters)


def test_end_to_end_determinism(tmp_path):
    outputs = []
    for name in ("a", "b"):
        base = tmp_path / name
        base.mkdir()
        cfg_path, out, _ = write_cfg(base, realizations=1, grid__n_per_axis=5)
        cfg = cli.Config.load(str(cfg_path))
        cli.cmd_synth(cfg)
        cli.cmd_pretrain(cfg)
        cli.cmd_transfer(cfg, "TimeWarp", "fm1")
        eval_dir = cli.cmd_evaluate(cfg)
        outputs.append(
            (
                (eval_dir / "report.csv").read_bytes(),
                (out / "pretrain" / "ckpt_0000.json").read_bytes(),
                (out / "transfer" / "TimeWarp" / "fm1" / "ckpt_0000.json").read_bytes(),
            )
        )
    assert outputs[0] == outputs[1]


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    # transfer without --class is a configuration error: exit code 2
    monkeypatch.setattr("sys.argv", ["fmwarp", "transfer"])
    with pytest.raises(SystemExit) as exc:
        cli.main()
    assert exc.value.code == 2
    # evaluate before anything exists is an evaluation error: exit code 5
    cfg_path, _, _ = write_cfg(tmp_path)
    monkeypatch.setattr("sys.argv", ["fmwarp", "evaluate", "--config", str(cfg_path)])
    with pytest.raises(SystemExit) as exc:
        cli.main()
    assert exc.value.code == 5


def test_cli_run_synth_via_argv(tmp_path):
    cfg_path, _, dataset = write_cfg(tmp_path)
    assert cli.run(["synth", "--config", str(cfg_path)]) == 0
    assert dataset.exists()


def test_cli_transfer_uses_config_method_list(tmp_path):
    cfg_path, out, _ = write_cfg(
        tmp_path, realizations=1, methods="TimeWarp,NoTransfer", grid__n_per_axis=5
    )
    cfg = cli.Config.load(str(cfg_path))
    cli.cmd_synth(cfg)
    cli.cmd_pretrain(cfg)
    assert cli.run(["transfer", "--config", str(cfg_path), "--class", "fm1"]) == 0
    assert (out / "transfer" / "TimeWarp" / "fm1" / "ckpt_0000.json").exists()
    assert (out / "transfer" / "NoTransfer" / "fm1" / "ckpt_0000.json").exists()


def test_jobs_flag_matches_sequential(tmp_path):
    (tmp_path / "sa").mkdir()
    (tmp_path / "sb").mkdir()
    cfg_a = write_cfg(tmp_path / "sa")
    cfg_b = write_cfg(tmp_path / "sb")
    for (cfg_path, out, _), jobs in ((cfg_a, 1), (cfg_b, 2)):
        cfg = cli.Config.load(str(cfg_path))
        cli.cmd_synth(cfg)
        cli.cmd_pretrain(cfg, jobs=jobs)
    files_a = sorted((cfg_a[1] / "pretrain").glob("ckpt_*.json"))
    files_b = sorted((cfg_b[1] / "pretrain").glob("ckpt_*.json"))
    assert [p.read_bytes() for p in files_a] == [p.read_bytes() for p in files_b]


def test_write_cfg_paths_need_parents(tmp_path):
    # synth creates missing parent directories for the dataset path
    cfg_path, _, dataset = write_cfg(tmp_path)
    cfg = cli.Config.load(str(cfg_path), {"data.path": str(tmp_path / "deep" / "d.csv")})
    path = cli.cmd_synth(cfg)
    assert path.exists()
