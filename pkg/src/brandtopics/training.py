"""Training loop: pretraining hand-off, stochastic optimization of
-ELBO + lambda * (L_s + L_a), checkpointing and logging.

One step draws a class-balanced batch, one reparameterized posterior sample,
soft documents under x and -x (shared noise), and takes one Adam step on the
combined objective with global-norm gradient clipping.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import gumbel, model as btm, pretrain as pf_mod, sentiment
from .corpus import Corpus, sample_balanced_batch
from .errors import NumericalError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "btm-checkpoint"
CHECKPOINT_VERSION = 1

LOG_HEADER = "step\telbo\tl_s\tl_a\ttotal\twall_time\n"


@dataclass
class TrainConfig:
    """Hyperparameters; defaults are the reference settings (K=30, batch 1024,
    50k steps, tau=1, lambda=100). Learning rate and optimizer constants are
    declared assumptions, surfaced here rather than hard-coded."""

    num_topics: int = 30
    batch_size: int = 1024
    max_steps: int = 50000
    tau: float = 1.0
    lambda_weight: float = 100.0
    truncation: int = 8
    learning_rate: float = 0.01
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 5000
    prior_shape: float = 0.3
    prior_rate: float = 0.3
    pretrain_iters: int = 200
    pretrain_tol: float = 1e-5
    grad_clip: float = 10.0
    init_scale: float = 0.1
    polarity_init_scale: float = 0.1

    def validate(self) -> None:
        positive = ("num_topics", "batch_size", "tau", "truncation",
                    "learning_rate", "log_every", "prior_shape", "prior_rate",
                    "grad_clip", "init_scale", "polarity_init_scale")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"config field {name} must be positive")
        if self.lambda_weight < 0:
            raise ValidationError("lambda_weight must be >= 0")
        if self.max_steps < 0 or self.pretrain_iters < 0:
            raise ValidationError("step counts must be >= 0")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_file(self, path: str) -> None:
        lines = [f"{key} = {value}\n" for key, value in self.as_dict().items()]
        with open(path, "w") as handle:
            handle.writelines(lines)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        """Parse a key = value config file; unknown keys are an error."""
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        with open(path) as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}:{lineno}: expected key = value")
                key, _, raw = line.partition("=")
                key = key.strip()
                if key not in fields:
                    raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
                caster = int if fields[key] in ("int", int) else float
                values[key] = caster(raw.strip())
        cfg = cls(**values)
        cfg.validate()
        return cfg


@dataclass
class LossBreakdown:
    step: int
    elbo: float
    l_s: float
    l_a: float
    total: float
    wall_time: float

    def tsv_row(self) -> str:
        return (f"{self.step}\t{self.elbo!r}\t{self.l_s!r}\t{self.l_a!r}"
                f"\t{self.total!r}\t{self.wall_time:.6f}\n")


@dataclass
class TrainState:
    """Mutable loop state: step counter, Adam moments, both RNG streams."""

    step: int
    optimizer: torch.optim.Adam
    gen: torch.Generator
    batch_rng: np.random.Generator


def train_view(corpus: Corpus) -> Corpus:
    """The train documents as a corpus of their own; row i of this view is the
    model's document i."""
    train = corpus.train_ids
    return Corpus(counts=corpus.counts[train], brand_ids=corpus.brand_ids[train],
                  labels=corpus.labels[train],
                  is_test=np.zeros(len(train), dtype=bool),
                  brand_names=list(corpus.brand_names),
                  brand_truth=corpus.brand_truth)


def compute_losses(params: btm.VariationalParams, clf: sentiment.SentimentClassifier,
                   priors: btm.PriorSpec, counts: torch.Tensor,
                   brand_ids: torch.Tensor, labels: torch.Tensor,
                   sample: btm.ReparamSample, cfg: TrainConfig,
                   num_train_docs: int,
                   uniforms: torch.Tensor | None = None):
    """Losses for one batch given a fixed posterior sample and, when the
    classifier objective is on, fixed Gumbel uniforms. Deterministic in its
    inputs, which is what the finite-difference gradient checks rely on.

    Returns (loss, elbo, l_s, l_a) as 0-dim tensors; l_s and l_a are zero
    tensors when lambda_weight == 0 (the classifier path is skipped).
    """
    lam = btm.rate_batch(sample.theta, sample.beta, sample.eta, sample.x, brand_ids)
    elbo = btm.elbo_components(params, priors, counts, brand_ids, sample,
                               num_train_docs, lam=lam).total()
    if cfg.lambda_weight > 0:
        if uniforms is None:
            raise ValidationError("uniforms are required when lambda_weight > 0")
        z = gumbel.soft_document(lam, cfg.tau, cfg.truncation, uniforms=uniforms)
        lam_rev = btm.rate_batch(sample.theta, sample.beta, sample.eta,
                                 -sample.x, brand_ids)
        z_rev = gumbel.soft_document(lam_rev, cfg.tau, cfg.truncation,
                                     uniforms=uniforms)
        pair = sentiment.AdversarialPair.from_labels(z, z_rev, labels)
        l_s, l_a = sentiment.adversarial_losses(clf, pair)
    else:
        l_s = torch.zeros((), dtype=torch.float64)
        l_a = torch.zeros((), dtype=torch.float64)
    loss = -elbo + cfg.lambda_weight * (l_s + l_a)
    return loss, elbo, l_s, l_a


def train_step(state: TrainState, params: btm.VariationalParams,
               clf: sentiment.SentimentClassifier, priors: btm.PriorSpec,
               train: Corpus, cfg: TrainConfig) -> LossBreakdown:
    """One optimization step; raises NumericalError (with the loss breakdown)
    on a non-finite loss, leaving the last checkpoint on disk untouched."""
    t0 = time.perf_counter()
    batch = sample_balanced_batch(train, cfg.batch_size, state.batch_rng)
    doc_ids = torch.from_numpy(batch.doc_ids)
    counts = torch.from_numpy(
        np.asarray(train.counts[batch.doc_ids].todense(), dtype=np.float64))
    brand_ids = torch.from_numpy(train.brand_ids[batch.doc_ids])
    labels = torch.from_numpy(train.labels[batch.doc_ids])

    sample = params.sample_posterior(doc_ids, state.gen)
    uniforms = None
    if cfg.lambda_weight > 0:
        uniforms = torch.rand(counts.shape + (cfg.truncation,),
                              generator=state.gen, dtype=torch.float64)
    loss, elbo, l_s, l_a = compute_losses(params, clf, priors, counts, brand_ids,
                                          labels, sample, cfg,
                                          num_train_docs=train.num_docs,
                                          uniforms=uniforms)
    breakdown = LossBreakdown(step=state.step, elbo=float(elbo), l_s=float(l_s),
                              l_a=float(l_a), total=float(loss),
                              wall_time=time.perf_counter() - t0)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {state.step}: {breakdown}")

    state.optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for group in state.optimizer.param_groups for p in group["params"]],
        cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    breakdown.wall_time = time.perf_counter() - t0
    return breakdown


@dataclass
class TrainResult:
    params: btm.VariationalParams
    clf: sentiment.SentimentClassifier
    priors: btm.PriorSpec
    trace: list[LossBreakdown]
    checkpoint_path: str | None


def _new_state(params, clf, cfg) -> TrainState:
    optimizer = torch.optim.Adam(
        list(params.parameters()) + list(clf.parameters()), lr=cfg.learning_rate)
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    return TrainState(step=0, optimizer=optimizer, gen=gen,
                      batch_rng=np.random.default_rng(cfg.seed))


def initialize(corpus: Corpus, cfg: TrainConfig,
               pf: pf_mod.PFParams | None = None):
    """Pretrain (unless a fit is supplied) and build model, classifier, state."""
    cfg.validate()
    train = train_view(corpus)
    if pf is None:
        logger.info("pretraining %d-topic factorization on %d train docs",
                    cfg.num_topics, train.num_docs)
        pf = pf_mod.pretrain(train.counts, cfg.num_topics,
                             prior_shape=cfg.prior_shape, prior_rate=cfg.prior_rate,
                             iters=cfg.pretrain_iters, seed=cfg.seed,
                             tol=cfg.pretrain_tol)
    init = pf_mod.init_locations_from_pf(pf, init_scale=cfg.init_scale)
    params = btm.VariationalParams.from_pretrained(
        init, num_brands=train.num_brands,
        polarity_init_scale=cfg.polarity_init_scale)
    clf = sentiment.SentimentClassifier(train.num_terms)
    priors = btm.PriorSpec(gamma_shape=cfg.prior_shape, gamma_rate=cfg.prior_rate)
    return train, params, clf, priors, _new_state(params, clf, cfg), pf


def save_checkpoint(path: str, params, clf, priors, state, cfg,
                    num_train_docs: int) -> None:
    """Atomic, versioned checkpoint with everything needed to resume bitwise:
    parameters, classifier, Adam moments, both RNG states, step counter."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": cfg.as_dict(),
        "priors": dataclasses.asdict(priors),
        "num_train_docs": num_train_docs,
        "params_state": params.state_dict(),
        "clf_state": clf.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "torch_gen_state": state.gen.get_state(),
        "batch_rng_state": state.batch_rng.bit_generator.state,
    }
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               suffix=".pt")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str):
    """Restore (params, clf, priors, state, cfg, num_train_docs)."""
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT \
            or payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path} is not a version-{CHECKPOINT_VERSION} "
                              f"{CHECKPOINT_FORMAT} file")
    cfg = TrainConfig(**payload["config"])
    priors = btm.PriorSpec(**payload["priors"])
    shapes = {key: tuple(value.shape) for key, value in payload["params_state"].items()}
    params = btm.VariationalParams(
        num_docs=shapes["theta_loc"][0], num_topics=shapes["theta_loc"][1],
        num_terms=shapes["beta_loc"][1], num_brands=shapes["x_loc"][0])
    params.load_state_dict(payload["params_state"])
    clf = sentiment.SentimentClassifier(shapes["beta_loc"][1])
    clf.load_state_dict(payload["clf_state"])
    state = _new_state(params, clf, cfg)
    state.step = payload["step"]
    state.optimizer.load_state_dict(payload["optimizer_state"])
    state.gen.set_state(payload["torch_gen_state"])
    state.batch_rng.bit_generator.state = payload["batch_rng_state"]
    return params, clf, priors, state, cfg, payload["num_train_docs"]


def fit(corpus: Corpus, cfg: TrainConfig, out_dir: str | None = None,
        pf: pf_mod.PFParams | None = None,
        resume_from: str | None = None) -> TrainResult:
    """Pretrain, then run train_step to max_steps with periodic checkpoints.

    With resume_from, training continues from the stored step, RNG states and
    optimizer moments, so the trace matches an uninterrupted run. The returned
    trace holds one LossBreakdown per executed step; the TSV log stream is
    written at log_every granularity.
    """
    if resume_from is not None:
        params, clf, priors, state, cfg, num_train_docs = load_checkpoint(resume_from)
        train = train_view(corpus)
        if train.num_docs != num_train_docs or params.num_terms != train.num_terms:
            raise ValidationError("checkpoint does not match corpus dimensions")
    else:
        train, params, clf, priors, state, pf = initialize(corpus, cfg, pf=pf)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            pf_mod.save_pf(pf, os.path.join(out_dir, "pretrain.npz"))

    checkpoint_path = None
    log_handle = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.pt")
        log_path = os.path.join(out_dir, "train_log.tsv")
        fresh = resume_from is None or not os.path.exists(log_path)
        log_handle = open(log_path, "w" if fresh else "a")
        if fresh:
            log_handle.write(LOG_HEADER)

    trace: list[LossBreakdown] = []
    try:
        while state.step < cfg.max_steps:
            breakdown = train_step(state, params, clf, priors, train, cfg)
            trace.append(breakdown)
            if log_handle and (breakdown.step % cfg.log_every == 0
                               or state.step == cfg.max_steps):
                log_handle.write(breakdown.tsv_row())
                log_handle.flush()
            if checkpoint_path and cfg.checkpoint_every \
                    and state.step % cfg.checkpoint_every == 0 \
                    and state.step < cfg.max_steps:
                save_checkpoint(checkpoint_path, params, clf, priors, state,
                                cfg, train.num_docs)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, params, clf, priors, state,
                            cfg, train.num_docs)
    finally:
        if log_handle:
            log_handle.close()
    params.check_finite()
    return TrainResult(params=params, clf=clf, priors=priors, trace=trace,
                       checkpoint_path=checkpoint_path)
