"""Train, unlearn, defend, attack, evaluate; CSV and image persistence."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from uilab.attack import Reconstruction, adaptive_uia, run_uia
from uilab.config import ExperimentConfig
from uilab.data import gen_dataset
from uilab.defense import defend
from uilab.errors import UILabError
from uilab.metrics import MetricsRecord, cos_sim, mia_auc, mse, outdiff, psnr, ssim
from uilab.model import Dataset, ParamVector, accuracy, train
from uilab.unlearning import diffparm, unlearn

log = logging.getLogger(__name__)

CSV_HEADER = [
    "run_id", "trial", "seed", "defense", "ssim", "psnr", "mse", "acc_test", "outdiff",
    "cos_delta", "mia_auc", "attack_final_loss", "wall_time_s",
]


@lru_cache(maxsize=8)
def _prepare(dataset_cfg, arch, train_cfg):
    train_set, test_set = gen_dataset(dataset_cfg)
    theta_o = train(train_set, arch, train_cfg)
    return train_set, test_set, theta_o


def prepare(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, ParamVector]:
    """Dataset and original model; cached, since every trial shares them."""
    return _prepare(cfg.dataset, cfg.model_arch(), cfg.train)


def trial_seed(cfg: ExperimentConfig, trial_index: int) -> int:
    return cfg.base_seed + trial_index


def forget_index(cfg: ExperimentConfig, trial_index: int, n_train: int) -> int:
    return int(np.random.default_rng([trial_seed(cfg, trial_index), 7]).integers(n_train))


@dataclass
class TrialResult:
    record: MetricsRecord
    recon: Reconstruction
    forget: np.ndarray
    forget_index: int
    defense_trace: list


def _cos_delta(D: np.ndarray, D_star: np.ndarray) -> float:
    if np.array_equal(D, D_star):
        return 1.0
    return cos_sim(D, D_star)


def execute_trial(cfg: ExperimentConfig, trial_index: int) -> TrialResult:
    train_set, test_set, theta_o = prepare(cfg)
    seed = trial_seed(cfg, trial_index)
    idx = forget_index(cfg, trial_index, len(train_set))
    x = train_set.sample(idx)

    theta_u = unlearn(theta_o, x, cfg.unlearn)
    dcfg = replace(cfg.defense, seed=cfg.defense.seed + seed)
    t0 = time.perf_counter()
    theta_def, trace = defend(theta_o, theta_u, x, dcfg)
    wall = time.perf_counter() - t0

    acfg = replace(cfg.attack, eta=cfg.unlearn.eta, steps=cfg.unlearn.steps,
                   seed=cfg.attack.seed + seed)
    label = x.label if acfg.label_mode == "known" else None
    recon = run_uia(theta_o, theta_def, acfg, label)
    if acfg.adaptive and dcfg.method == "unlearnshield":
        # attacker knows the procedure, not the defender's seed
        recon = adaptive_uia(theta_o, theta_def, replace(dcfg, seed=acfg.seed), acfg, label, init=recon)

    D = diffparm(theta_u, theta_o)
    D_star = diffparm(theta_def, theta_o)
    members = Dataset(x.pixels[None], np.array([x.label]))
    rec = MetricsRecord(
        ssim=ssim(recon.pixels, x.pixels),
        psnr=psnr(recon.pixels, x.pixels),
        mse=mse(recon.pixels, x.pixels),
        acc_test=accuracy(theta_def, test_set),
        outdiff=outdiff(theta_u, theta_def, x),
        cos_delta=_cos_delta(D, D_star),
        mia_auc=mia_auc(theta_def, members, test_set),
        attack_final_loss=recon.final_loss,
        wall_time_s=wall,
    )
    return TrialResult(rec, recon, x.pixels, idx, trace)


def run_trial(cfg: ExperimentConfig, trial_index: int) -> MetricsRecord:
    return execute_trial(cfg, trial_index).record


def undefended_mia(cfg: ExperimentConfig, trial_index: int) -> float:
    """MIA AUC of the plain unlearned model for the trial's forget sample."""
    train_set, test_set, theta_o = prepare(cfg)
    x = train_set.sample(forget_index(cfg, trial_index, len(train_set)))
    theta_u = unlearn(theta_o, x, cfg.unlearn)
    return mia_auc(theta_u, Dataset(x.pixels[None], np.array([x.label])), test_set)


# ---------------------------------------------------------------------------
# persistence


def write_pixmap(path, pixels: np.ndarray) -> None:
    """8-bit binary PPM; single-channel images are replicated to RGB."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    elif px.shape[2] != 3:
        px = np.repeat(px.mean(axis=2, keepdims=True), 3, axis=2)
    data = np.round(np.clip(px, 0, 1) * 255).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_raw(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(pixels, dtype="<f8").tobytes())


def read_raw(path, shape) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f8").reshape(shape).astype(np.float64)


def _row(cfg, method, trial, rec: MetricsRecord) -> list:
    d = rec.as_dict()
    return [cfg.run_id(), trial, trial_seed(cfg, trial), method] + [repr(float(d[k])) for k in CSV_HEADER[4:]]


def _job(args):
    cfg, method, trial = args
    mcfg = replace(cfg, defense=replace(cfg.defense, method=method))
    try:
        return method, trial, execute_trial(mcfg, trial), None
    except UILabError as e:
        return method, trial, None, f"{type(e).__name__}: {e}"


def run_pipeline(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> dict:
    """All trials for every method in ``cfg.methods``.

    Writes ``results.csv``, ``recon/<method>_t<trial>.{ppm,f64}``, and
    ``summary.json``. A failing trial becomes a NaN row plus an entry in the
    summary's ``errors`` list; the run continues.
    """
    out = Path(out_dir)
    (out / "recon").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    work = [(cfg, m, t) for m in cfg.methods for t in range(cfg.trials)]
    if jobs > 1:
        prepare(cfg)
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_job, work))
    else:
        results = [_job(w) for w in work]

    rows, errors = [], []
    per_method: dict[str, list[MetricsRecord]] = {m: [] for m in cfg.methods}
    for method, trial, res, err in results:
        if res is None:
            log.warning("trial %d (%s) failed: %s", trial, method, err)
            errors.append({"method": method, "trial": trial, "error": err})
            rec = MetricsRecord()
        else:
            rec = res.record
            stem = out / "recon" / f"{method}_t{trial:03d}"
            write_pixmap(stem.with_suffix(".ppm"), res.recon.pixels)
            write_raw(stem.with_suffix(".f64"), res.recon.pixels)
            per_method[method].append(rec)
        rows.append(_row(cfg, method, trial, rec))

    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(rows)

    summary = {"run_id": cfg.run_id(), "trials": cfg.trials, "methods": {}, "errors": errors}
    for method, recs in per_method.items():
        if not recs:
            continue
        means = {k: float(np.mean([r.as_dict()[k] for r in recs])) for k in CSV_HEADER[4:]}
        summary["methods"][method] = {"n": len(recs), "mean": means}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
