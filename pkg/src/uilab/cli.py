"""Command-line entry point: ``uilab <subcommand>``.

Artifacts passed between stages:

* ``gen-data`` writes ``train.npz`` / ``test.npz`` (images, labels)
* ``train`` writes ``theta_o.ckpt``
* ``unlearn`` writes ``theta_u.ckpt`` and ``forget.npz``
* ``defend`` writes ``theta_def.ckpt`` and ``defense_trace.json``
* ``attack`` writes ``recon.ppm`` / ``recon.f64`` / ``recon.json``
* ``eval`` writes ``metrics.json``
* ``pipeline`` writes ``results.csv``, ``summary.json``, ``recon/``

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from uilab import harness
from uilab.attack import adaptive_uia, run_uia
from uilab.checkpoint import read_checkpoint, write_checkpoint
from uilab.config import ExperimentConfig, load_config
from uilab.data import gen_dataset
from uilab.defense import METHODS, defend
from uilab.errors import NumericalError, ValidationError
from uilab.metrics import MetricsRecord, cos_sim, mia_auc, mse, outdiff, psnr, ssim
from uilab.model import Dataset, Sample, accuracy, train
from uilab.unlearning import diffparm, unlearn

log = logging.getLogger("uilab")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    return cfg


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _save_dataset(path, ds: Dataset) -> None:
    np.savez(path, images=ds.images, labels=ds.labels)


def _load_dataset(path) -> Dataset:
    try:
        with np.load(path) as z:
            return Dataset(z["images"], z["labels"])
    except (OSError, KeyError) as e:
        raise ValidationError(f"cannot read dataset {path}: {e}") from e


def _load_forget(path) -> Sample:
    try:
        with np.load(path) as z:
            return Sample(z["pixels"], int(z["label"]))
    except (OSError, KeyError) as e:
        raise ValidationError(f"cannot read forget sample {path}: {e}") from e


def _ckpt(path, cfg: ExperimentConfig):
    d = cfg.dataset
    return read_checkpoint(path, (d.height, d.width, d.channels))


def _data(args, cfg):
    """Dataset from --data DIR when given, else regenerated from the config."""
    if args.data:
        return _load_dataset(Path(args.data) / "train.npz"), _load_dataset(Path(args.data) / "test.npz")
    return gen_dataset(cfg.dataset)


def cmd_gen_data(args, cfg):
    out = _out(args)
    tr, te = gen_dataset(cfg.dataset)
    _save_dataset(out / "train.npz", tr)
    _save_dataset(out / "test.npz", te)
    print(f"wrote {len(tr)} train / {len(te)} test samples to {out}")


def cmd_train(args, cfg):
    out = _out(args)
    tr, te = _data(args, cfg)
    theta = train(tr, cfg.model_arch(), cfg.train)
    write_checkpoint(out / "theta_o.ckpt", theta)
    print(f"train acc {accuracy(theta, tr):.4f}  test acc {accuracy(theta, te):.4f}")


def cmd_unlearn(args, cfg):
    out = _out(args)
    tr, _ = _data(args, cfg)
    theta_o = _ckpt(args.model, cfg)
    idx = args.index if args.index is not None else harness.forget_index(cfg, 0, len(tr))
    if not 0 <= idx < len(tr):
        raise ValidationError(f"forget index {idx} out of range [0, {len(tr)})")
    x = tr.sample(idx)
    theta_u = unlearn(theta_o, x, cfg.unlearn)
    write_checkpoint(out / "theta_u.ckpt", theta_u)
    np.savez(out / "forget.npz", pixels=x.pixels, label=x.label, index=idx)
    print(f"unlearned sample {idx} (label {x.label}); |Delta| = {np.linalg.norm(diffparm(theta_u, theta_o)):.6g}")


def cmd_defend(args, cfg):
    out = _out(args)
    theta_o = _ckpt(args.original, cfg)
    theta_u = _ckpt(args.unlearned, cfg)
    x = _load_forget(args.forget)
    dcfg = replace(cfg.defense, method=args.method or cfg.defense.method,
                   seed=cfg.defense.seed + cfg.base_seed)
    theta_def, trace = defend(theta_o, theta_u, x, dcfg)
    write_checkpoint(out / "theta_def.ckpt", theta_def)
    (out / "defense_trace.json").write_text(json.dumps(trace, indent=1))
    D, Ds = diffparm(theta_u, theta_o), diffparm(theta_def, theta_o)
    c = 1.0 if np.array_equal(D, Ds) else cos_sim(D, Ds)
    print(f"{dcfg.method}: cos(Delta, Delta*) = {c:.6f}")


def cmd_attack(args, cfg):
    out = _out(args)
    theta_o = _ckpt(args.original, cfg)
    theta_obs = _ckpt(args.observed, cfg)
    acfg = replace(cfg.attack, eta=cfg.unlearn.eta, steps=cfg.unlearn.steps,
                   seed=cfg.attack.seed + cfg.base_seed)
    recon = run_uia(theta_o, theta_obs, acfg, args.label)
    if acfg.adaptive:
        dcfg = replace(cfg.defense, method="unlearnshield", seed=acfg.seed)
        recon = adaptive_uia(theta_o, theta_obs, dcfg, acfg, args.label, init=recon)
    harness.write_pixmap(out / "recon.ppm", recon.pixels)
    harness.write_raw(out / "recon.f64", recon.pixels)
    meta = {"label_guess": recon.label_guess, "final_loss": recon.final_loss,
            "shape": list(recon.pixels.shape)}
    (out / "recon.json").write_text(json.dumps(meta, indent=1))
    print(f"label guess {recon.label_guess}, final loss {recon.final_loss:.6g}")


def cmd_eval(args, cfg):
    out = _out(args)
    _, te = _data(args, cfg)
    theta_u = _ckpt(args.unlearned, cfg)
    theta_def = _ckpt(args.defended, cfg)
    x = _load_forget(args.forget)
    rec = MetricsRecord(acc_test=accuracy(theta_def, te), outdiff=outdiff(theta_u, theta_def, x),
                        mia_auc=mia_auc(theta_def, Dataset(x.pixels[None], np.array([x.label])), te))
    if args.original:
        theta_o = _ckpt(args.original, cfg)
        D, Ds = diffparm(theta_u, theta_o), diffparm(theta_def, theta_o)
        rec.cos_delta = 1.0 if np.array_equal(D, Ds) else cos_sim(D, Ds)
    if args.recon:
        r = harness.read_raw(args.recon, x.pixels.shape)
        rec.ssim, rec.psnr, rec.mse = ssim(r, x.pixels), psnr(r, x.pixels), mse(r, x.pixels)
    d = rec.as_dict()
    (out / "metrics.json").write_text(json.dumps(d, indent=1))
    for k, v in d.items():
        if not np.isnan(v):
            print(f"{k:18s} {v:.6g}")


def cmd_pipeline(args, cfg):
    out = _out(args)
    if args.trials:
        cfg = replace(cfg, trials=args.trials)
    if args.methods:
        cfg = replace(cfg, methods=tuple(m.strip() for m in args.methods.split(",")))
    summary = harness.run_pipeline(cfg, out, jobs=args.jobs)
    for m, s in summary["methods"].items():
        mean = s["mean"]
        print(f"{m:14s} n={s['n']:3d} ssim={mean['ssim']:.4f} acc={mean['acc_test']:.4f} "
              f"outdiff={mean['outdiff']:.4g} cos={mean['cos_delta']:.4f}")
    for e in summary["errors"]:
        print(f"failed: {e['method']} trial {e['trial']}: {e['error']}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat dotted-key config file")
    common.add_argument("--seed", type=int, help="override base_seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="uilab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    sp = add("train", cmd_train, "train the original model")
    sp.add_argument("--data", help="directory with train.npz/test.npz")
    sp = add("unlearn", cmd_unlearn, "unlearn one training sample")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data")
    sp.add_argument("--index", type=int, help="training index to forget")
    sp = add("defend", cmd_defend, "post-process an unlearned model")
    sp.add_argument("--original", required=True)
    sp.add_argument("--unlearned", required=True)
    sp.add_argument("--forget", required=True, help="forget.npz from `unlearn`")
    sp.add_argument("--method", choices=METHODS)
    sp = add("attack", cmd_attack, "reconstruct the forgotten sample")
    sp.add_argument("--original", required=True)
    sp.add_argument("--observed", required=True, help="released post-unlearning model")
    sp.add_argument("--label", type=int, help="known label (default: enumerate)")
    sp = add("eval", cmd_eval, "compute metrics for a defended model")
    sp.add_argument("--unlearned", required=True)
    sp.add_argument("--defended", required=True)
    sp.add_argument("--forget", required=True)
    sp.add_argument("--original")
    sp.add_argument("--recon", help="recon.f64 from `attack`")
    sp.add_argument("--data")
    sp = add("pipeline", cmd_pipeline, "run every trial for every method")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--methods", help="comma-separated defense methods")
    sp.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args, _config(args))
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
