"""Command-line entry point: ``cfprompt <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Artifacts live under ``--out``::

    data/{corpus,train,test,encoder}.cfsd   gen-data
    models/denoiser.ckpt                    pretrain-diffusion
    models/classifier.ckpt                  train-classifier
    cf/counterfactuals.cfsd, cf/pairs.csv   gen-cf (plus cf/images/*.pgm)
    models/{encoder,prompts}.ckpt           train-prompts (plus metrics/prompt_history.csv)
    metrics/eval.csv                        eval
    metrics/sweep_<axis>.csv                sweep
    metrics/theory.csv                      verify-theory

The thread count of the numerical backend can be capped with the
``CFPROMPT_THREADS`` environment variable.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiments as ex
from .config import STRATEGY_CHOICES, load_config
from .counterfactual import evaluate_batch
from .errors import ContractViolation, MissingArtifactError, NumericError
from .io import read_dataset, require, write_csv, write_dataset, write_triplet
from .scm import DatasetSplit, ScmDataset

log = logging.getLogger("cfprompt")

SUBCOMMANDS = ("gen-data", "pretrain-diffusion", "train-classifier", "gen-cf", "train-prompts", "eval", "sweep",
               "verify-theory")

HISTORY_COLUMNS = ["epoch", "L_basic", "L_cf", "L_total", "seen_acc", "unseen_acc"]
PAIR_COLUMNS = ["index", "y", "y_cf", "l2", "linf", "label_flipped", "flip_confidence", "non_causal_leakage",
                "causal_distance", "quality_score"]
EVAL_COLUMNS = ["seen_acc", "unseen_acc", "mean_acc", "zs_seen_acc", "zs_unseen_acc"]


class LineageError(ContractViolation):
    pass


class Paths:
    def __init__(self, out):
        self.out = Path(out)
        self.corpus = self.out / "data" / "corpus.cfsd"
        self.train = self.out / "data" / "train.cfsd"
        self.test = self.out / "data" / "test.cfsd"
        self.encoder_data = self.out / "data" / "encoder.cfsd"
        self.denoiser = self.out / "models" / "denoiser.ckpt"
        self.classifier = self.out / "models" / "classifier.ckpt"
        self.encoder = self.out / "models" / "encoder.ckpt"
        self.prompts = self.out / "models" / "prompts.ckpt"
        self.cf = self.out / "cf" / "counterfactuals.cfsd"
        self.pairs = self.out / "cf" / "pairs.csv"
        self.images = self.out / "cf" / "images"
        self.metrics = self.out / "metrics"


def _load(path, producer):
    data, info = read_dataset(require(path, producer))
    return data, info["lineage"]


def _split(cfg, paths):
    train, _ = _load(paths.train, "gen-data")
    test, _ = _load(paths.test, "gen-data")
    return DatasetSplit(cfg.seen, cfg.unseen, cfg.shots, train, test, cfg.seed)


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(cfg, paths, args):
    h = cfg.hash()
    manifest = {"sigma_x": cfg.sigma_x, "seed": cfg.seed, "seen": ",".join(map(str, cfg.seen)),
                "unseen": ",".join(map(str, cfg.unseen)), "shots": cfg.shots}
    split = ex.make_split(cfg)
    write_dataset(paths.corpus, ex.make_corpus(cfg), cfg.num_classes, h, {**manifest, "role": "corpus"})
    write_dataset(paths.train, split.train, cfg.num_classes, h, {**manifest, "role": "few-shot train"})
    write_dataset(paths.test, split.test, cfg.num_classes, h, {**manifest, "role": "test"})
    write_dataset(paths.encoder_data, ex.make_encoder_data(cfg), cfg.num_classes, h,
                  {**manifest, "role": "encoder pretraining"})
    cfg.save(paths.out / "config.txt")
    log.info("wrote datasets to %s", paths.out / "data")


def cmd_pretrain_diffusion(cfg, paths, args):
    corpus, _ = _load(paths.corpus, "gen-data")
    model = ex.fit_denoiser(cfg, corpus)
    ex.save_denoiser(paths.denoiser, model, cfg.hash())
    log.info("denoiser final loss %.4f", float(np.mean(model.loss_curve_[-100:])))


def cmd_train_classifier(cfg, paths, args):
    corpus, _ = _load(paths.corpus, "gen-data")
    model = ex.fit_classifier(cfg, corpus)
    ex.save_classifier(paths.classifier, model, cfg.hash())
    log.info("classifier final loss %.4f", float(np.mean(model.loss_curve_[-100:])))


def _models(paths):
    den, _ = ex.load_denoiser(require(paths.denoiser, "pretrain-diffusion"))
    clf, _ = ex.load_classifier(require(paths.classifier, "train-classifier"))
    return den, clf


def cmd_gen_cf(cfg, paths, args):
    train, _ = _load(paths.train, "gen-data")
    den, clf = _models(paths)
    batch = ex.make_generator(cfg, den, clf).generate(train.x, train.y)
    h = cfg.hash()
    cf = ScmDataset(y=batch.y_cf, n=train.n, u_x=train.u_x, x=batch.x_cf)
    write_dataset(paths.cf, cf, cfg.num_classes, h, {"role": "counterfactuals", "scale": cfg.scale,
                                                     "strategy": cfg.strategy})
    q = evaluate_batch(batch, clf)
    rows = [{"index": i, "y": batch.y[i], "y_cf": batch.y_cf[i], **{k: v[i] for k, v in q.items()}}
            for i in range(len(batch))]
    write_csv(paths.pairs, rows, PAIR_COLUMNS, "cf-pairs", h)
    for i in range(min(cfg.dump_images, len(batch))):
        write_triplet(paths.images, i, batch.x[i], batch.x_cf[i])
    log.info("flip rate %.3f, mean L2 %.3f", float(np.mean(q["label_flipped"])), float(np.mean(q["l2"])))


def cmd_train_prompts(cfg, paths, args):
    split = _split(cfg, paths)
    enc_data, _ = _load(paths.encoder_data, "gen-data")
    cf, _ = _load(paths.cf, "gen-cf")
    if len(cf) != len(split.train):
        raise ContractViolation("counterfactual set does not pair with the training set; rerun gen-cf")
    text = ex.make_text_encoder(cfg)
    enc = ex.fit_image_encoder(cfg, enc_data)
    learner = ex.prompt_learner(cfg, enc, text)
    learner.fit(split.train.x, split.train.y, X_cf=cf.x, callback=ex.epoch_callback(split))
    h = cfg.hash()
    ex.save_encoder(paths.encoder, enc, h)
    ex.save_prompts(paths.prompts, learner, h)
    write_csv(paths.metrics / "prompt_history.csv", learner.history_, HISTORY_COLUMNS, "prompt-history", h)
    last = learner.history_[-1]
    log.info("seen %.3f unseen %.3f", last["seen_acc"], last["unseen_acc"])


def cmd_eval(cfg, paths, args):
    enc, enc_lineage = ex.load_encoder(require(paths.encoder, "train-prompts"))
    learner, lineage = ex.load_prompts(require(paths.prompts, "train-prompts"), enc)
    split = _split(cfg, paths)
    _, test_lineage = _load(paths.test, "gen-data")
    h = cfg.hash()
    stale = {name: lin for name, lin in (("prompts", lineage), ("encoder", enc_lineage), ("test data", test_lineage))
             if lin != h}
    if stale and not args.allow_lineage_mismatch:
        names = ", ".join(sorted(stale))
        raise LineageError(f"{names} produced by a different config (hash {h[:12]} expected); "
                           "rerun the producing subcommands or pass --allow-lineage-mismatch")
    acc = ex.prompt_accuracies(learner, split)
    zs = ex.prompt_accuracies(learner.unfitted_copy(), split)
    row = {**acc, "zs_seen_acc": zs["seen_acc"], "zs_unseen_acc": zs["unseen_acc"]}
    write_csv(paths.metrics / "eval.csv", [row], EVAL_COLUMNS, "eval", h)
    print(" ".join(f"{k}={row[k]:.4f}" for k in EVAL_COLUMNS))


def cmd_sweep(cfg, paths, args):
    if not args.axis or args.values is None:
        raise ContractViolation("sweep needs --axis and --values")
    den, clf = _models(paths)
    columns, rows = ex.run_sweep(cfg, args.axis, args.values, den, clf)
    out = write_csv(paths.metrics / f"sweep_{args.axis}.csv", rows, columns, f"sweep-{args.axis}", cfg.hash())
    for r in rows:
        print(" ".join(f"{c}={r[c]}" for c in columns[:4]))
    log.info("wrote %s", out)


def cmd_verify_theory(cfg, paths, args):
    rows = ex.theory_checks(cfg)
    write_csv(paths.metrics / "theory.csv", rows, ex.THEORY_COLUMNS, "theory", cfg.hash())
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']} [{r['family']}] value={r['value']:.3e} "
              f"bound={r['bound']:.1e}")
    return 0 if all(r["passed"] for r in rows) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-diffusion": cmd_pretrain_diffusion,
    "train-classifier": cmd_train_classifier,
    "gen-cf": cmd_gen_cf,
    "train-prompts": cmd_train_prompts,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "verify-theory": cmd_verify_theory,
}


def build_parser():
    p = argparse.ArgumentParser(prog="cfprompt", description="Counterfactual generation and prompt learning on "
                                                             "synthetic causal image data.")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--scale", type=float, help="guidance scale s")
    p.add_argument("--lambda", dest="lambda_cf", type=float, help="weight of the counterfactual loss")
    p.add_argument("--shots", type=int)
    p.add_argument("--prompt-length", type=int)
    p.add_argument("--strategy", choices=STRATEGY_CHOICES)
    p.add_argument("--axis", choices=sorted(ex.SWEEP_AXES), help="sweep axis")
    p.add_argument("--values", help="comma separated sweep values")
    p.add_argument("--allow-lineage-mismatch", action="store_true",
                   help="let eval use artifacts produced by a different config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    overrides = {"seed": args.seed, "out": args.out, "scale": args.scale, "lambda_cf": args.lambda_cf,
                 "shots": args.shots, "prompt_length": args.prompt_length, "strategy": args.strategy}
    threads = os.environ.get("CFPROMPT_THREADS")
    try:
        cfg = load_config(args.config, overrides)
        with threadpool_limits(int(threads) if threads else None):
            status = COMMANDS[args.command](cfg, Paths(cfg.out), args)
    except (ContractViolation, MissingArtifactError, NumericError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
