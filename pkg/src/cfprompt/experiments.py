"""Pipeline stages, sweeps and the theory checks, shared by the CLI and the acceptance suite.

Every random draw is derived from ``(config.seed, repeat, stage)`` so a
config and a seed fully determine every artifact.
"""
from __future__ import annotations

import logging

import numpy as np

from .anticausal import AntiCausalClassifier
from .config import ExperimentConfig
from .counterfactual import CounterfactualGenerator, inverse_pair_harness, evaluate_batch
from .diffusion import DiffusionDenoiser, make_schedule, schedule_from_betas
from .errors import ContractViolation
from .io import read_checkpoint, write_checkpoint
from .numerics import ParamSet, numeric_jacobian
from .prompt import CounterfactualPromptLearner, ImageEncoder, TextEncoder
from .scm import AnalyticScm, ScmSpec, make_splits, sample_class_conditional, sample_dataset

log = logging.getLogger(__name__)

STAGES = {
    "corpus": 1, "split": 2, "encoder-data": 3, "denoiser": 4, "classifier": 5,
    "text": 6, "encoder": 7, "prompts": 8, "cf": 9, "cf-eval": 10, "theory": 11,
}

SWEEP_AXES = {"s": "scale", "lambda": "lambda_cf", "shots": "shots", "length": "prompt_length",
              "strategy": "strategy"}

PROMPT_COLUMNS = ["seen_acc", "unseen_acc", "L_basic", "L_cf", "mean_acc", "zs_seen_acc", "zs_unseen_acc",
                  "cf_margin", "cf_distance", "cf_flip_rate", "repeats"]
QUALITY_COLUMNS = ["flip_rate", "flip_confidence", "quality_score", "l2", "linf", "non_causal_leakage",
                   "causal_distance", "count"]


def stage_seed(cfg: ExperimentConfig, stage, repeat=0):
    return int(np.random.SeedSequence([cfg.seed, repeat, STAGES[stage]]).generate_state(1)[0])


# -- data ------------------------------------------------------------------------


def scm_spec(cfg):
    return ScmSpec(num_classes=cfg.num_classes, sigma_x=cfg.sigma_x)


def schedule(cfg):
    return make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)


def make_corpus(cfg):
    """Unlabelled-style pretraining corpus over all classes for the denoiser and classifier."""
    return sample_dataset(scm_spec(cfg), cfg.corpus_size, stage_seed(cfg, "corpus"))


def make_split(cfg, repeat=0, shots=None):
    return make_splits(scm_spec(cfg), cfg.seen, cfg.unseen, cfg.shots if shots is None else shots,
                       stage_seed(cfg, "split", repeat), cfg.test_per_class)


def make_encoder_data(cfg, repeat=0):
    """Seen-class images for pretraining the frozen image encoder."""
    return sample_class_conditional(scm_spec(cfg), cfg.seen, cfg.encoder_per_class,
                                    stage_seed(cfg, "encoder-data", repeat))


def make_cf_eval_set(cfg):
    return sample_dataset(scm_spec(cfg), cfg.eval_images, stage_seed(cfg, "cf-eval"))


# -- models ----------------------------------------------------------------------


def fit_denoiser(cfg, corpus):
    return DiffusionDenoiser(hidden=cfg.diffusion_hidden, n_steps=cfg.diffusion_steps, batch_size=cfg.batch_size,
                             learning_rate=cfg.lr, schedule=schedule(cfg),
                             random_state=stage_seed(cfg, "denoiser")).fit(corpus.x)


def fit_classifier(cfg, corpus):
    return AntiCausalClassifier(num_classes=cfg.num_classes, hidden=cfg.classifier_hidden,
                                n_steps=cfg.classifier_steps, batch_size=cfg.batch_size, learning_rate=cfg.lr,
                                schedule=schedule(cfg),
                                random_state=stage_seed(cfg, "classifier")).fit(corpus.x, corpus.y)


def make_generator(cfg, denoiser, classifier, repeat=0, candidates="seen"):
    """Counterfactual generator; by default the counterfactual class is restricted to seen classes."""
    cand = cfg.seen if candidates == "seen" else candidates
    return CounterfactualGenerator(denoiser, classifier, scale=cfg.scale, strategy=cfg.strategy,
                                   candidates=cand, random_state=stage_seed(cfg, "cf", repeat)).fit()


def make_text_encoder(cfg, repeat=0):
    return TextEncoder(cfg.num_classes, cfg.token_dim, cfg.embed_dim, seed=stage_seed(cfg, "text", repeat))


def fit_image_encoder(cfg, data, repeat=0):
    return ImageEncoder(embed_dim=cfg.embed_dim, n_steps=cfg.encoder_steps, batch_size=cfg.batch_size,
                        learning_rate=cfg.lr, random_state=stage_seed(cfg, "encoder", repeat)).fit(data.x, data.y)


def prompt_learner(cfg, encoder, text, repeat=0):
    return CounterfactualPromptLearner(
        encoder, text, prompt_length=cfg.prompt_length, temperature=cfg.tau, lambda_cf=cfg.lambda_cf,
        n_epochs=cfg.prompt_epochs, batch_size=cfg.prompt_batch_size, learning_rate=cfg.prompt_lr,
        random_state=stage_seed(cfg, "prompts", repeat),
    )


def prompt_accuracies(learner, split):
    seen, unseen = split.test_subset(split.seen), split.test_subset(split.unseen)
    s = learner.score(seen.x, seen.y, classes=list(split.seen))
    u = learner.score(unseen.x, unseen.y, classes=list(split.unseen))
    return {"seen_acc": s, "unseen_acc": u, "mean_acc": 0.5 * (s + u)}


def epoch_callback(split):
    """Per-epoch accuracy columns for the prompt-training history."""
    def cb(learner):
        acc = prompt_accuracies(learner, split)
        return {"seen_acc": acc["seen_acc"], "unseen_acc": acc["unseen_acc"]}
    return cb


class PromptStudy:
    """Runs prompt-learning trials, caching encoders and counterfactual sets across sweep values."""

    def __init__(self, cfg: ExperimentConfig, denoiser, classifier):
        self.cfg = cfg
        self.denoiser = denoiser
        self.classifier = classifier
        self._encoders = {}
        self._cf = {}

    def encoders(self, repeat):
        if repeat not in self._encoders:
            text = make_text_encoder(self.cfg, repeat)
            enc = fit_image_encoder(self.cfg, make_encoder_data(self.cfg, repeat), repeat)
            self._encoders[repeat] = (text, enc)
        return self._encoders[repeat]

    def counterfactuals(self, cfg, repeat):
        key = (repeat, cfg.shots, cfg.strategy, cfg.scale)
        if key not in self._cf:
            split = make_split(cfg, repeat)
            gen = make_generator(cfg, self.denoiser, self.classifier, repeat)
            self._cf[key] = gen.generate(split.train.x, split.train.y)
        return self._cf[key]

    def trial(self, repeat=0, **overrides):
        cfg = self.cfg.replace(**overrides)
        split = make_split(cfg, repeat)
        text, enc = self.encoders(repeat)
        cf = self.counterfactuals(cfg, repeat)
        learner = prompt_learner(cfg, enc, text, repeat).fit(split.train.x, split.train.y, X_cf=cf.x_cf)
        zero = learner.unfitted_copy()
        acc = prompt_accuracies(learner, split)
        zs = prompt_accuracies(zero, split)
        q = evaluate_batch(cf, self.classifier)
        last = learner.history_[-1]
        return {
            **acc,
            "zs_seen_acc": zs["seen_acc"],
            "zs_unseen_acc": zs["unseen_acc"],
            "L_basic": last["L_basic"],
            "L_cf": last["L_cf"],
            "cf_margin": learner.cf_margin(split.train.x, split.train.y, cf.x_cf),
            "cf_distance": float(np.mean(q["l2"])),
            "cf_flip_rate": float(np.mean(q["label_flipped"])),
            "non_causal_leakage": float(np.mean(q["non_causal_leakage"])),
            "causal_distance": float(np.mean(q["causal_distance"])),
        }

    def average(self, **overrides):
        rows = [self.trial(r, **overrides) for r in range(self.cfg.repeats)]
        out = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        out["repeats"] = len(rows)
        out["per_repeat"] = rows
        return out


# -- sweeps ----------------------------------------------------------------------


def parse_sweep_values(axis, values):
    if axis not in SWEEP_AXES:
        raise ContractViolation(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    if not values:
        raise ContractViolation("a sweep needs at least one value")
    cast = {"s": float, "lambda": float, "shots": int, "length": int, "strategy": str}[axis]
    return [cast(str(v).strip()) if cast is not str else str(v).strip() for v in values]


def quality_at_scale(cfg, denoiser, classifier, data, scale):
    """Counterfactual quality on ``data`` (all classes admissible) at guidance scale ``scale``."""
    gen = make_generator(cfg.replace(scale=scale), denoiser, classifier, candidates=None)
    q = evaluate_batch(gen.generate(data.x, data.y), classifier)
    row = {k: float(np.mean(v)) for k, v in q.items()}
    row["flip_rate"] = row.pop("label_flipped")
    row["count"] = len(data)
    return row


def run_sweep(cfg, axis, values, denoiser, classifier, study=None):
    """One row per value; returns ``(columns, rows)``."""
    values = parse_sweep_values(axis, values)
    if axis == "s":
        data = make_cf_eval_set(cfg)
        rows = [{"s": v, **quality_at_scale(cfg, denoiser, classifier, data, v)} for v in values]
        return ["s", *QUALITY_COLUMNS], rows
    study = study or PromptStudy(cfg, denoiser, classifier)
    field = SWEEP_AXES[axis]
    rows = []
    for v in values:
        log.info("sweep %s = %s", axis, v)
        res = study.average(**{field: v})
        res.pop("per_repeat")
        rows.append({axis: v, **res})
    extra = ["non_causal_leakage", "causal_distance"] if axis == "strategy" else []
    return [axis, *PROMPT_COLUMNS, *extra], rows


# -- theory checks ---------------------------------------------------------------


def latent_map_jacobian(scm: AnalyticScm, y, n, u):
    """Numeric Jacobian of ``u -> g*(f(y, n, u), y, n)``."""
    return numeric_jacobian(lambda uu: scm.g_star(scm.f(y, n, uu[None])[0][None], y, n)[0], u)


def theory_checks(cfg, trials=1000, points=100, draws=10_000, delta=0.01):
    """Rows of ``(check, family, value, bound, passed)``."""
    seed = stage_seed(cfg, "theory")
    rows = []

    def add(check, family, value, bound, passed):
        rows.append({"check": check, "family": family, "value": float(value), "bound": float(bound),
                     "passed": bool(passed)})

    for family, unit in (("additive-orthogonal", True), ("post-nonlinear", False)):
        scm = AnalyticScm(dim=3, family=family, unit_scale=unit, seed=seed)
        rep = inverse_pair_harness(scm, delta=0.0, trials=trials, seed=seed)
        add("exact_inverse_cf_error", family, rep.max_counterfactual_error, 1e-10,
            rep.max_counterfactual_error <= 1e-10)

        rng = np.random.default_rng(seed + 1)
        y, n, u, _ = scm.sample(points, rng)
        min_eig, q_err = np.inf, 0.0
        for i in range(points):
            J = numeric_jacobian(lambda uu: scm.f(y[i:i + 1], n[i:i + 1], uu[None])[0], u[i])
            min_eig = min(min_eig, np.linalg.eigvalsh(0.5 * (J + J.T)).min())
            Jq = latent_map_jacobian(scm, y[i:i + 1], n[i:i + 1], u[i])
            G = Jq @ Jq.T
            q_err = max(q_err, np.abs(G - np.trace(G) / len(G) * np.eye(len(G))).max())
        add("jacobian_f_min_sym_eigenvalue", family, min_eig, 0.0, min_eig > 0)
        add("latent_map_scalar_orthogonal_error", family, q_err, 1e-8, q_err <= 1e-8)

        y, n, u, x = scm.sample(draws, np.random.default_rng(seed + 2))
        lat = scm.g_star(x, y, n)
        parents = np.column_stack([y, n])
        corr = np.abs(np.corrcoef(lat.T, parents.T)[: lat.shape[1], lat.shape[1]:]).max()
        add("latent_parent_max_abs_corr", family, corr, 0.05, corr < 0.05)

    orth = AnalyticScm(dim=3, family="additive-orthogonal", unit_scale=True, seed=seed)
    rep = inverse_pair_harness(orth, delta=delta, trials=trials, seed=seed)
    add("distorted_reconstruction_error", "additive-orthogonal", rep.max_reconstruction_error, delta + 1e-10,
        rep.max_reconstruction_error <= delta + 1e-10)
    add("distorted_cf_error", "additive-orthogonal", rep.max_counterfactual_error, delta + 1e-10,
        rep.max_counterfactual_error <= delta + 1e-10)
    leak = inverse_pair_harness(orth, delta=0.0, trials=trials, seed=seed, leak=0.5)
    # a label-dependent latent reconstructs exactly yet breaks counterfactuals
    add("leaky_latent_reconstruction_error", "additive-orthogonal", leak.max_reconstruction_error, 1e-10,
        leak.max_reconstruction_error <= 1e-10)
    add("leaky_latent_cf_error", "additive-orthogonal", leak.max_counterfactual_error, 1e-10,
        leak.max_counterfactual_error > 1e-10)
    return rows


THEORY_COLUMNS = ["check", "family", "value", "bound", "passed"]


# -- checkpoints -----------------------------------------------------------------

_SKIP = {"schedule", "encoder", "text_encoder", "denoiser", "classifier"}


def _plain_params(est):
    out = {}
    for k, v in est.get_params(deep=False).items():
        if k in _SKIP:
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _restore(cls, meta, tensors, prefix=""):
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["params"].items()}
    est = cls(**params)
    est.params_ = ParamSet({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    est.arch_ = meta["arch"]
    est.n_features_in_ = meta["n_features_in"]
    return est


def save_denoiser(path, model, lineage):
    tensors = {"p." + k: v for k, v in model.params_.values.items()}
    tensors["schedule.betas"] = model.schedule_.betas
    meta = {"kind": "denoiser", "params": _plain_params(model), "arch": model.arch_,
            "n_features_in": model.n_features_in_}
    return write_checkpoint(path, tensors, meta, lineage)


def load_denoiser(path):
    tensors, meta, lineage = read_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ContractViolation(f"{path} is not a denoiser checkpoint")
    model = _restore(DiffusionDenoiser, meta, tensors, "p.")
    model.schedule_ = schedule_from_betas(tensors["schedule.betas"])
    return model, lineage


def save_classifier(path, model, lineage):
    tensors = {"p." + k: v for k, v in model.params_.values.items()}
    tensors["schedule.betas"] = model.schedule_.betas
    meta = {"kind": "classifier", "params": _plain_params(model), "arch": model.arch_,
            "n_features_in": model.n_features_in_, "num_classes": len(model.classes_)}
    return write_checkpoint(path, tensors, meta, lineage)


def load_classifier(path):
    tensors, meta, lineage = read_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise ContractViolation(f"{path} is not a classifier checkpoint")
    model = _restore(AntiCausalClassifier, meta, tensors, "p.")
    model.schedule_ = schedule_from_betas(tensors["schedule.betas"])
    model.classes_ = np.arange(meta["num_classes"])
    return model, lineage


def save_encoder(path, encoder, lineage):
    tensors = {"p." + k: v for k, v in encoder.params_.values.items()}
    meta = {"kind": "image-encoder", "params": _plain_params(encoder), "arch": encoder.arch_,
            "n_features_in": encoder.n_features_in_}
    return write_checkpoint(path, tensors, meta, lineage)


def load_encoder(path):
    tensors, meta, lineage = read_checkpoint(path)
    if meta.get("kind") != "image-encoder":
        raise ContractViolation(f"{path} is not an image-encoder checkpoint")
    return _restore(ImageEncoder, meta, tensors, "p."), lineage


def save_prompts(path, learner, lineage):
    tensors = {"p." + k: v for k, v in learner.params_.values.items()}
    tensors.update({"text." + k: v for k, v in learner.text_encoder.arrays().items()})
    meta = {"kind": "prompts", "params": _plain_params(learner), "meta_arch": learner.meta_arch_,
            "frozen_checksum": learner.frozen_checksum_, "train_classes": [int(c) for c in learner.train_classes_]}
    return write_checkpoint(path, tensors, meta, lineage)


def load_prompts(path, encoder):
    """Rebuild a fitted learner around an already loaded image encoder."""
    tensors, meta, lineage = read_checkpoint(path)
    if meta.get("kind") != "prompts":
        raise ContractViolation(f"{path} is not a prompt checkpoint")
    text = TextEncoder.from_arrays(**{k[5:]: v for k, v in tensors.items() if k.startswith("text.")})
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["params"].items()}
    learner = CounterfactualPromptLearner(encoder=encoder, text_encoder=text, **params)
    learner.params_ = ParamSet({k[2:]: v for k, v in tensors.items() if k.startswith("p.")})
    learner.meta_arch_ = meta["meta_arch"]
    learner.train_classes_ = np.asarray(meta["train_classes"])
    learner.classes_ = np.arange(text.num_classes)
    learner.frozen_checksum_ = learner._frozen_checksum()
    if learner.frozen_checksum_ != meta["frozen_checksum"]:
        raise ContractViolation("image encoder does not match the one the prompts were trained with")
    return learner, lineage
