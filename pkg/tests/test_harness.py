import csv
import json

import numpy as np
import pytest

from uilab.config import parse_config
from uilab.harness import CSV_HEADER, execute_trial, read_raw, run_pipeline, run_trial, write_pixmap

SMALL = """
dataset.height = 6
dataset.width = 6
dataset.train_size = 64
dataset.test_size = 32
arch.hidden_widths = 16
train.epochs = 30
train.lr = 0.01
attack.iters = 30
attack.restarts = 1
trials = 2
methods = none, unlearnshield, noise, prune
"""


@pytest.fixture(scope="module")
def small_cfg():
    return parse_config(SMALL)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_none_cos_exactly_one(small_cfg):
    from dataclasses import replace
    cfg = replace(small_cfg, defense=replace(small_cfg.defense, method="none"))
    rec = run_trial(cfg, 0)
    assert rec.cos_delta == 1.0 and rec.outdiff == 0.0


def test_trial_deterministic(small_cfg):
    a = run_trial(small_cfg, 1).as_dict()
    b = run_trial(small_cfg, 1).as_dict()
    a.pop("wall_time_s"), b.pop("wall_time_s")
    assert a == b


def test_forget_sample_from_train(small_cfg):
    from uilab.harness import prepare
    res = execute_trial(small_cfg, 0)
    tr, _, _ = prepare(small_cfg)
    assert np.array_equal(tr.images[res.forget_index], res.forget)


def test_pipeline_outputs(tmp_path, small_cfg):
    summary = run_pipeline(small_cfg, tmp_path)
    rows = _rows(tmp_path / "results.csv")
    assert rows[0] == CSV_HEADER
    assert ",".join(rows[0]) == ("run_id,trial,seed,defense,ssim,psnr,mse,acc_test,outdiff,"
                                 "cos_delta,mia_auc,attack_final_loss,wall_time_s")
    assert len(rows) == 1 + 4 * 2
    assert set(summary["methods"]) == {"none", "unlearnshield", "noise", "prune"}
    assert json.loads((tmp_path / "summary.json").read_text()) == summary
    ppm = (tmp_path / "recon" / "none_t000.ppm").read_bytes()
    assert ppm.startswith(b"P6\n6 6\n255\n") and len(ppm) == len(b"P6\n6 6\n255\n") + 6 * 6 * 3
    raw = read_raw(tmp_path / "recon" / "none_t000.f64", (6, 6, 1))
    assert raw.min() >= 0 and raw.max() <= 1


def test_pipeline_single_row(tmp_path, small_cfg):
    from dataclasses import replace
    run_pipeline(replace(small_cfg, trials=1, methods=("none",)), tmp_path)
    assert len(_rows(tmp_path / "results.csv")) == 2


def _strip_time(rows):
    return [r[:-1] for r in rows]


def test_parallel_matches_serial(tmp_path, small_cfg):
    run_pipeline(small_cfg, tmp_path / "s", jobs=1)
    run_pipeline(small_cfg, tmp_path / "p", jobs=2)
    assert _strip_time(_rows(tmp_path / "s" / "results.csv")) == _strip_time(_rows(tmp_path / "p" / "results.csv"))


def test_failed_trial_recorded(tmp_path, small_cfg):
    from dataclasses import replace
    # zero-rate unlearning leaves nothing to protect or attack
    cfg = replace(small_cfg, unlearn=replace(small_cfg.unlearn, eta=0.0), methods=("unlearnshield",))
    summary = run_pipeline(cfg, tmp_path)
    rows = _rows(tmp_path / "results.csv")
    assert len(rows) == 3 and rows[1][4] == "nan"
    assert len(summary["errors"]) == 2 and "unlearnshield" not in summary["methods"]


def test_pixmap_rgb(tmp_path):
    px = np.zeros((2, 3, 3))
    px[0, 0] = [1.0, 0.5, 0.0]
    write_pixmap(tmp_path / "a.ppm", px)
    data = (tmp_path / "a.ppm").read_bytes()
    assert data[:11] == b"P6\n3 2\n255\n" and data[11:14] == bytes([255, 128, 0])
