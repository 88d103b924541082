import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from scusfl import cli
from scusfl import experiments as ex
from scusfl import semantic_codec as sc
from scusfl.config import RunConfig, write_config
from scusfl.data import Dataset, NormStats
from scusfl.metrics import (CSV_COLUMNS, RoundRecord, evaluate, read_csv, records_to_csv, summarize,
                            task_success)
from scusfl.nsm import NsmPolicy
from scusfl.orchestrator import Simulation
from scusfl.split_models import NoSplit, build_model, default_arch, partition

GOLDEN = Path(__file__).parent / "golden"


def record(i=0, latency=1.0, **kw):
    base = dict(round=i, regime="usfl", train_loss=0.5, test_accuracy=0.5, feature_psnr=math.nan, task_loss=0.6,
                uplink_bytes=10, downlink_bytes=20, grad_uplink_bytes=5, sync_bytes=7, latency_s=latency,
                cr_histogram="", success=True)
    base.update(kw)
    return RoundRecord(**base)


# -- records, CSV and summary ---------------------------------------------------

def test_csv_header_golden():
    assert records_to_csv([]).splitlines()[0] == (GOLDEN / "round_header.csv").read_text().strip()
    assert ",".join(CSV_COLUMNS) == (GOLDEN / "round_header.csv").read_text().strip()


def test_grid_and_sweep_headers_golden(tmp_path):
    assert ex.write_grid([], tmp_path / "g.csv").read_text() == (GOLDEN / "grid_header.csv").read_text()
    assert ex.write_sweep([], tmp_path / "s.csv").read_text() == (GOLDEN / "sweep_header.csv").read_text()


def test_csv_value_formatting():
    text = records_to_csv([record(latency=math.inf, success=False)])
    row = text.splitlines()[1].split(",")
    assert row[CSV_COLUMNS.index("feature_psnr")] == ""
    assert row[CSV_COLUMNS.index("latency_s")] == "inf"
    assert row[CSV_COLUMNS.index("success")] == "0"


def test_record_validation():
    with pytest.raises(ValueError):
        record(uplink_bytes=-1)
    with pytest.raises(ValueError):
        record(test_accuracy=1.5)
    with pytest.raises(ValueError):
        record(latency=0.0)


def test_task_success_examples():
    recs = [record(i, lat) for i, lat in enumerate([0.1, 0.2, 0.3, 0.4])]
    assert task_success(recs, math.inf) == 1.0
    assert task_success(recs, 0.0) == 0.0
    assert 0.0 < task_success(recs, 0.25) < 1.0
    assert task_success(recs, 0.25) == 0.5


def test_summary_totals_are_column_sums(mlp_cfg, mlp_data, mlp_codecs):
    recs = list(Simulation(mlp_cfg.with_(regime="scusfl", rounds=3), *mlp_data, mlp_codecs).run())
    summary = summarize(recs, 1.0)
    for col, total in summary["totals"].items():
        assert total == pytest.approx(sum(getattr(r, col) for r in recs), rel=1e-12)
    assert summary["rounds"] == 3


# -- evaluation ---------------------------------------------------------------

def _balanced(n_classes=10, per=30):
    y = np.repeat(np.arange(n_classes), per)
    x = np.eye(n_classes)[y]
    return Dataset(x, y, n_classes, NormStats(np.zeros(1), np.ones(1)))


def test_perfect_prediction_accuracy():
    ds = _balanced()
    assert evaluate(None, ds, logits_fn=lambda xb: 10.0 * xb).accuracy == 1.0


def test_constant_logits_is_chance():
    ds = _balanced()
    res = evaluate(None, ds, logits_fn=lambda xb: np.zeros((len(xb), 10)))
    assert res.accuracy == pytest.approx(0.1, abs=0.03)
    assert res.task_loss == pytest.approx(math.log(10))


def test_identity_codec_noiseless_psnr_cap(mlp_data):
    model = build_model(default_arch("mlp"), 0)
    segs = partition(model)
    res = evaluate(segs, mlp_data[1], sc.identity_codec(24), "awgn", math.inf)
    assert res.psnr == sc.PSNR_CAP_DB
    plain = evaluate(segs, mlp_data[1])
    assert res.accuracy == plain.accuracy
    assert math.isnan(evaluate(partition(model, NoSplit(7)), mlp_data[1]).psnr)


# -- run_experiment / grid / sweep -------------------------------------------------

@pytest.fixture
def cfg_file(tmp_path, mlp_cfg):
    path = tmp_path / "run.toml"
    write_config(mlp_cfg.with_(regime="scusfl", policy=NsmPolicy.static("1/3")), path)
    return path


def test_cli_run_is_byte_identical(tmp_path, cfg_file):
    assert cli.main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "scusfl.csv").read_bytes(), (tmp_path / "b" / "scusfl.csv").read_bytes()
    assert a == b
    summary = json.loads((tmp_path / "a" / "scusfl.summary.json").read_text())
    rows = read_csv(tmp_path / "a" / "scusfl.csv")
    assert summary["totals"]["uplink_bytes"] == sum(int(r["uplink_bytes"]) for r in rows)
    assert (tmp_path / "a" / "scusfl.config.toml").exists()


def test_cli_seed_override_changes_output(tmp_path, cfg_file):
    cli.main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg_file), "--seed", "11", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "scusfl.csv").read_bytes() != (tmp_path / "b" / "scusfl.csv").read_bytes()


def test_scusfl_vs_usfl_uplink_ratio(tmp_path, mlp_cfg, mlp_data, mlp_codecs):
    cfg = mlp_cfg.with_(policy=NsmPolicy.static("1/3"))
    a = ex.run_experiment(cfg.with_(regime="scusfl"), tmp_path, mlp_data, mlp_codecs)
    b = ex.run_experiment(cfg.with_(regime="usfl"), tmp_path, mlp_data)
    for ra, rb in zip(read_csv(a), read_csv(b)):
        assert Fraction(int(ra["uplink_bytes"]), int(rb["uplink_bytes"])) == Fraction(1, 3)


def test_local_bytes_zero(tmp_path, mlp_cfg, mlp_data):
    path = ex.run_experiment(mlp_cfg.with_(regime="local"), tmp_path, mlp_data)
    for row in read_csv(path):
        assert row["uplink_bytes"] == row["downlink_bytes"] == "0"


def test_cli_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nnum_clients = 0\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "run.num_clients" in capsys.readouterr().err
    bad.write_text("[channel]\nmodel = \"rician\"\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "channel.model" in capsys.readouterr().err


def test_cli_data_dir_env_fallback(tmp_path, monkeypatch, capsys):
    cfgp = tmp_path / "c.toml"
    cfgp.write_text('[data]\ndataset = "cifar10"\n')
    monkeypatch.setenv("SIMCTL_DATA_DIR", str(tmp_path / "nowhere"))
    assert cli.main(["run", "--config", str(cfgp), "--out", str(tmp_path)]) == 2
    assert "nowhere" in capsys.readouterr().err


def test_grid_cardinality(mlp_cfg, mlp_data, mlp_codecs):
    segs = partition(build_model(default_arch("mlp"), 0))
    cells = ex.run_grid(mlp_cfg, data=mlp_data, codecs=mlp_codecs, segments=segs)
    assert len(cells) == 2 * 4 * 5
    assert {(c.channel, c.cr, c.snr_db) for c in cells} == {
        (m, cr, float(s)) for m in ("awgn", "rayleigh") for cr in sc.STANDARD_CRS for s in (0, 5, 10, 15, 20)}


def test_sweep_rows(mlp_cfg, mlp_data, mlp_codecs):
    rows = ex.run_latency_sweep(mlp_cfg.with_(rounds=1, policy=NsmPolicy.static("1/3"), samples_per_client=32),
                                client_counts=(1, 2), data=mlp_data, codecs=mlp_codecs)
    assert [(r.regime, r.num_clients) for r in rows] == [(g, n) for g in ("fl", "sfl", "usfl", "scusfl")
                                                         for n in (1, 2)]
    by = {(r.regime, r.num_clients): r for r in rows}
    assert by[("usfl", 2)].uplink_bytes == 2 * by[("usfl", 1)].uplink_bytes


def test_cli_pretrain_writes_loadable_checkpoint(tmp_path, cfg_file):
    assert cli.main(["pretrain", "--config", str(cfg_file), "--cr", "1/6", "--snr", "5", "--epochs", "1",
                     "--out", str(tmp_path)]) == 0
    codec = sc.load_codec(tmp_path / "codec_1_6_seed7.bin")
    assert codec.cr == Fraction(1, 6) and codec.train_snr_db == 5.0 and codec.frozen


def test_cli_grid_and_sweep(tmp_path, cfg_file):
    assert cli.main(["grid", "--config", str(cfg_file), "--crs", "1/3", "--snrs", "0,20", "--channels", "awgn",
                     "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "grid.csv")) == 2
    assert cli.main(["sweep", "--config", str(cfg_file), "--clients", "1,2", "--regimes", "usfl",
                     "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "sweep.csv")) == 2


def test_checkpoint_cache_is_reused(tmp_path, mlp_cfg, mlp_data):
    cfg = mlp_cfg.with_(policy=NsmPolicy.static("1/8"),
                        codec=mlp_cfg.codec.__class__(pretrain_epochs=1, checkpoint_dir=str(tmp_path)))
    first = ex.prepare_codecs(cfg, mlp_data[0])
    assert (tmp_path / "codec_1_8_seed7.bin").exists()
    second = ex.prepare_codecs(cfg, mlp_data[0])
    assert first[Fraction(1, 8)].param_hash() == second[Fraction(1, 8)].param_hash()


def test_identity_option(mlp_cfg, mlp_data):
    cfg = mlp_cfg.with_(codec=mlp_cfg.codec.__class__(identity=True))
    codecs = ex.prepare_codecs(cfg, mlp_data[0])
    assert list(codecs) == [Fraction(1)]


def test_presets_registered():
    assert set(ex.PRESETS) == {"fig4a", "fig4b", "fig5-awgn", "fig5-rayleigh"}
    with pytest.raises(KeyError):
        ex.run_preset("fig9", "out")


def test_auto_dataset_falls_back(monkeypatch, caplog):
    monkeypatch.delenv("SIMCTL_DATA_DIR", raising=False)
    train, _ = ex.load_data(RunConfig(dataset="auto", arch="mlp", n_train=50, n_test=10))
    assert len(train) == 50
    assert "falling back" in caplog.text
