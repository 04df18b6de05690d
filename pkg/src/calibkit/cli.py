"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``posthoc``, ``gap-hist``, ``dump``.
All artifacts land under a run directory named by the config hash. The
dataset root may be given with ``--data-root`` or the ``CALIBKIT_DATA_ROOT``
environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from calibkit import data as data_io
from calibkit import mc_dropout, models, report, training
from calibkit.metrics import PredictionBatch, build_report
from calibkit.temperature import TemperatureFit, apply_temperature, fit_temperature

HOLDOUT_FRACTION = 0.1  # share of the training split used to fit the temperature


def _data_root(args):
    return args.data_root or os.environ.get("CALIBKIT_DATA_ROOT")


def _load_run(ckpt_path, dataset_id, data_root):
    model = models.load_checkpoint(ckpt_path)
    cfg_dict = model.meta.get("config") or {}
    cfg = training.RunConfig.from_dict(cfg_dict) if cfg_dict else training.RunConfig(dataset=dataset_id)
    if dataset_id != cfg.dataset:
        cfg = training.RunConfig.from_dict({**cfg.to_dict(), "dataset": dataset_id})
    split = data_io.load_dataset(cfg.dataset, data_root or cfg.dataset_root,
                                 cfg.seed, cfg.split_fractions, cfg.dataset_params)
    return model, cfg, split


def _test_logits(model, x):
    with torch.no_grad():
        return model.forward_deterministic(torch.from_numpy(x)).double().numpy()


def _run_dir(cfg, out=None, leaf=""):
    base = out or os.path.join(cfg.out_dir, f"run-{cfg.config_hash()}")
    path = os.path.join(base, leaf) if leaf else base
    os.makedirs(path, exist_ok=True)
    return path


def cmd_train(args):
    cfg = training.RunConfig.from_json(args.config)
    run_dir = training.run_and_persist(cfg)
    log = training.TrainLog.load(os.path.join(run_dir, "trainlog.jsonl"))
    report.plot_convergence(os.path.join(run_dir, "convergence.png"), log.records)
    print(run_dir)
    return 0


def _resolve_temperature(arg):
    if arg is None:
        return None
    if os.path.exists(arg):
        return TemperatureFit.load(arg).temperature
    return float(arg)


def cmd_eval(args):
    model, cfg, split = _load_run(args.checkpoint, args.dataset, _data_root(args))
    temperature = _resolve_temperature(args.temperature)

    def batch_for(x):
        logits = _test_logits(model, x)
        if temperature is not None:
            return apply_temperature(logits, split.y_test, temperature)
        return PredictionBatch.from_logits(logits, split.y_test)

    in_batch = batch_for(split.x_test)
    bundle = report.ReportBundle(
        config_hash=cfg.config_hash(),
        bins=args.bins,
        in_domain=build_report(in_batch, args.bins),
        temperature=temperature,
    )
    for spec_text in args.corrupt or []:
        spec = data_io.CorruptionSpec.parse(spec_text)
        corrupted = batch_for(data_io.corrupt(split.x_test, spec))
        bundle.ood.append((spec, build_report(corrupted, args.bins)))
    out_dir = _run_dir(cfg, args.out, "eval")
    bundle.save(out_dir, batch=in_batch)
    print(os.path.join(out_dir, "report.json"))
    return 0


def cmd_posthoc(args):
    model, cfg, split = _load_run(args.checkpoint, args.dataset, _data_root(args))
    rng = np.random.default_rng(cfg.seed + 3)
    idx = rng.permutation(len(split.x_train))
    hold = idx[: max(1, int(HOLDOUT_FRACTION * len(idx)))]
    logits = _test_logits(model, split.x_train[hold])
    fit = fit_temperature(logits, split.y_train[hold])
    out_dir = _run_dir(cfg, args.out)
    path = os.path.join(out_dir, "temperature.json")
    fit.save(path)
    print(path)
    return 0


def cmd_gap_hist(args):
    model, cfg, split = _load_run(args.checkpoint, args.dataset, _data_root(args))
    if len(split.x_test) == 0:
        raise ValueError("empty dataset")
    if model.dropout_rate == 0:
        print("warning: checkpoint has dropout rate 0; certainty is 1 everywhere",
              file=sys.stderr)
        p = 0.5  # masks drawn but all-ones injected below
    else:
        p = model.dropout_rate
    with torch.no_grad():
        feats = model.features(torch.from_numpy(split.x_test))
        cfg_mc = mc_dropout.McConfig(args.passes, p, cfg.seed)
        masks = None
        if model.dropout_rate == 0:
            masks = torch.ones((args.passes, *feats.shape))
        est = mc_dropout.estimate(feats, model.classify, cfg_mc, masks=masks)
    edges, counts = report.gap_histogram(est.mean_confidence.numpy(),
                                         est.certainty.numpy())
    out_dir = _run_dir(cfg, args.out)
    report.write_gap_table(os.path.join(out_dir, "gap_hist.csv"), edges, counts,
                           cfg.config_hash())
    report.plot_gap_histogram(os.path.join(out_dir, "gap_hist.png"), edges, counts)
    print(os.path.join(out_dir, "gap_hist.csv"))
    return 0


def cmd_dump(args):
    model, cfg, split = _load_run(args.checkpoint, args.dataset, _data_root(args))
    logits = _test_logits(model, split.x_test)
    dump = data_io.LogitsDump(
        dataset_id=cfg.dataset,
        logits=logits,
        labels=split.y_test,
        model_checksum=model.parameter_checksum(),
        temperature=_resolve_temperature(args.temperature),
    )
    data_io.write_dump(args.out, dump)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calibkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train from a JSON config")
    p_train.add_argument("config")
    p_train.set_defaults(func=cmd_train)

    def eval_like(p):
        p.add_argument("checkpoint")
        p.add_argument("dataset")
        p.add_argument("--data-root", default=None)
        p.add_argument("--out", default=None)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    eval_like(p_eval)
    p_eval.add_argument("--corrupt", action="append", metavar="KIND:SEVERITY[:SEED]")
    p_eval.add_argument("--temperature", default=None, help="file or value")
    p_eval.add_argument("--bins", type=int, default=15)
    p_eval.set_defaults(func=cmd_eval)

    p_post = sub.add_parser("posthoc", help="fit a temperature on a hold-out split")
    eval_like(p_post)
    p_post.set_defaults(func=cmd_posthoc)

    p_gap = sub.add_parser("gap-hist", help="|certainty - mean confidence| histogram")
    eval_like(p_gap)
    p_gap.add_argument("--passes", type=int, default=10)
    p_gap.set_defaults(func=cmd_gap_hist)

    p_dump = sub.add_parser("dump", help="write test-split logits to a binary dump")
    p_dump.add_argument("checkpoint")
    p_dump.add_argument("dataset")
    p_dump.add_argument("out")
    p_dump.add_argument("--data-root", default=None)
    p_dump.add_argument("--temperature", default=None)
    p_dump.set_defaults(func=cmd_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, training.TrainingAborted) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
