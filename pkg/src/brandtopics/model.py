"""Variational posterior for the brand-polarity topic model.

Latents and variational families:
  theta (doc-topic intensity, positive)  ~ lognormal(theta_loc, theta_scale)
  beta  (topic-word intensity, positive) ~ lognormal(beta_loc, beta_scale)
  eta   (per-topic polarity word offset) ~ normal(eta_loc, eta_scale)
  x     (per-brand polarity score)       ~ normal(x_loc, x_scale)

Scales are stored pre-softplus so they stay positive unconstrained. The
Poisson rate for document d of brand b is
  lambda_dv = sum_k theta_dk * exp(log beta_kv + x_b * eta_kv)
with the x*eta exponent clamped to +-30 (clamps are counted, see
saturation_count). The ELBO is estimated from a single reparameterized
sample; mini-batch likelihood and per-document theta terms are scaled by
(train docs / batch size), global terms are not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import NumericalError, ValidationError
from .util import softplus_inv

EXP_CLAMP = 30.0

_saturation = {"count": 0}


def saturation_count() -> int:
    """Number of rate() exponent entries clamped at +-30 since the last reset."""
    return _saturation["count"]


def reset_saturation_count() -> None:
    _saturation["count"] = 0


@dataclass(frozen=True)
class PriorSpec:
    """Gamma(shape, rate) prior for theta and beta; standard normal for eta and x."""

    gamma_shape: float = 0.3
    gamma_rate: float = 0.3
    normal_loc: float = 0.0
    normal_scale: float = 1.0

    def __post_init__(self):
        if self.gamma_shape <= 0 or self.gamma_rate <= 0:
            raise ValidationError("gamma prior shape and rate must be positive")


@dataclass
class ReparamSample:
    """One reparameterized posterior draw plus the standard-normal noises used."""

    theta: torch.Tensor
    beta: torch.Tensor
    eta: torch.Tensor
    x: torch.Tensor
    log_theta: torch.Tensor = field(repr=False)
    log_beta: torch.Tensor = field(repr=False)
    noises: dict = field(repr=False)
    doc_ids: torch.Tensor = field(repr=False)


class VariationalParams(nn.Module):
    """Location/scale parameters of the mean-field posterior, all float64."""

    def __init__(self, num_docs: int, num_topics: int, num_terms: int,
                 num_brands: int, init_scale: float = 0.1):
        super().__init__()
        raw = softplus_inv(init_scale)

        def param(*shape, fill=0.0):
            return nn.Parameter(torch.full(shape, fill, dtype=torch.float64))

        self.theta_loc = param(num_docs, num_topics)
        self.theta_scale_raw = param(num_docs, num_topics, fill=raw)
        self.beta_loc = param(num_topics, num_terms)
        self.beta_scale_raw = param(num_topics, num_terms, fill=raw)
        self.eta_loc = param(num_topics, num_terms)
        self.eta_scale_raw = param(num_topics, num_terms, fill=raw)
        self.x_loc = param(num_brands)
        self.x_scale_raw = param(num_brands, fill=raw)

    @classmethod
    def from_pretrained(cls, init: dict[str, np.ndarray], num_brands: int,
                        polarity_init_scale: float = 0.1) -> "VariationalParams":
        """Build from the pretraining hand-off dict; eta and x start at their
        prior means (zero locations)."""
        num_docs, num_topics = init["theta_loc"].shape
        num_terms = init["beta_loc"].shape[1]
        params = cls(num_docs, num_topics, num_terms, num_brands,
                     init_scale=polarity_init_scale)
        with torch.no_grad():
            for name in ("theta_loc", "theta_scale_raw", "beta_loc", "beta_scale_raw"):
                getattr(params, name).copy_(torch.from_numpy(init[name]))
        return params

    @property
    def num_docs(self) -> int:
        return self.theta_loc.shape[0]

    @property
    def num_topics(self) -> int:
        return self.theta_loc.shape[1]

    @property
    def num_terms(self) -> int:
        return self.beta_loc.shape[1]

    @property
    def num_brands(self) -> int:
        return self.x_loc.shape[0]

    def scale(self, name: str) -> torch.Tensor:
        return nn.functional.softplus(getattr(self, name + "_scale_raw"))

    def check_finite(self) -> None:
        for name, tensor in self.named_parameters():
            if not torch.isfinite(tensor).all():
                raise NumericalError(f"parameter {name} contains non-finite values")

    def draw_noises(self, num_batch_docs: int,
                    gen: torch.Generator | None = None) -> dict[str, torch.Tensor]:
        """Standard-normal noise for one sample; draw order is fixed so RNG
        state round-trips through checkpoints."""
        k, v = self.beta_loc.shape

        def randn(*shape):
            return torch.randn(*shape, generator=gen, dtype=torch.float64)

        return {
            "theta": randn(num_batch_docs, k),
            "beta": randn(k, v),
            "eta": randn(k, v),
            "x": randn(self.num_brands),
        }

    def reparameterize(self, doc_ids: torch.Tensor,
                       noises: dict[str, torch.Tensor]) -> ReparamSample:
        """Deterministic transform of noises into a posterior sample."""
        log_theta = (self.theta_loc[doc_ids]
                     + self.scale("theta")[doc_ids] * noises["theta"])
        log_beta = self.beta_loc + self.scale("beta") * noises["beta"]
        eta = self.eta_loc + self.scale("eta") * noises["eta"]
        x = self.x_loc + self.scale("x") * noises["x"]
        return ReparamSample(theta=torch.exp(log_theta), beta=torch.exp(log_beta),
                             eta=eta, x=x, log_theta=log_theta, log_beta=log_beta,
                             noises=noises, doc_ids=doc_ids)

    def sample_posterior(self, doc_ids: torch.Tensor,
                         gen: torch.Generator | None = None) -> ReparamSample:
        return self.reparameterize(doc_ids, self.draw_noises(len(doc_ids), gen))


def _clamped_exp(exponent: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        _saturation["count"] += int((exponent.abs() > EXP_CLAMP).sum())
    return torch.exp(torch.clamp(exponent, min=-EXP_CLAMP, max=EXP_CLAMP))


def rate(theta_d: torch.Tensor, beta: torch.Tensor, eta: torch.Tensor,
         x_b: torch.Tensor) -> torch.Tensor:
    """Per-document Poisson rates: sum_k theta_dk exp(log beta_kv + x_b eta_kv)."""
    return theta_d @ (beta * _clamped_exp(x_b * eta))


def rate_batch(theta: torch.Tensor, beta: torch.Tensor, eta: torch.Tensor,
               x: torch.Tensor, brand_ids: torch.Tensor) -> torch.Tensor:
    """Rates for a batch of documents, grouping by brand so the adjusted
    topic-word matrix is built once per distinct brand rather than per doc."""
    order = torch.argsort(brand_ids)
    sorted_ids = brand_ids[order]
    boundaries = [0] + (torch.nonzero(sorted_ids[1:] != sorted_ids[:-1]).ravel() + 1
                        ).tolist() + [len(sorted_ids)]
    pieces = []
    for start, stop in zip(boundaries[:-1], boundaries[1:]):
        b = sorted_ids[start]
        adjusted = beta * _clamped_exp(x[b] * eta)
        pieces.append(theta[order[start:stop]] @ adjusted)
    inverse = torch.empty_like(order)
    inverse[order] = torch.arange(len(order))
    return torch.cat(pieces, dim=0)[inverse]


def poisson_loglik(counts: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Poisson log-likelihood over the last axis, dropping the log c! constant:
    sum_v (c_v log lambda_v - lambda_v)."""
    return (counts * torch.log(lam) - lam).sum(dim=-1)


def gamma_logpdf(x: torch.Tensor, log_x: torch.Tensor, shape: float,
                 rate: float) -> torch.Tensor:
    const = shape * math.log(rate) - math.lgamma(shape)
    return (shape - 1.0) * log_x - rate * x + const


def normal_logpdf(x: torch.Tensor, loc, scale) -> torch.Tensor:
    z = (x - loc) / scale
    return -0.5 * z * z - torch.log(torch.as_tensor(scale, dtype=torch.float64)) \
        - 0.5 * math.log(2.0 * math.pi)


def lognormal_logpdf(log_x: torch.Tensor, loc, scale) -> torch.Tensor:
    """Density of exp(normal) evaluated via the log of the variable:
    log q(x) = log Normal(log x; loc, scale) - log x."""
    return normal_logpdf(log_x, loc, scale) - log_x


@dataclass
class ElboComponents:
    """Single-sample ELBO pieces; likelihood and theta terms carry the
    train-docs/batch scaling, global terms do not."""

    loglik: torch.Tensor
    log_prior_theta: torch.Tensor
    log_prior_beta: torch.Tensor
    log_prior_eta: torch.Tensor
    log_prior_x: torch.Tensor
    log_q_theta: torch.Tensor
    log_q_beta: torch.Tensor
    log_q_eta: torch.Tensor
    log_q_x: torch.Tensor
    scale: float

    def total(self) -> torch.Tensor:
        return (self.loglik
                + self.log_prior_theta + self.log_prior_beta
                + self.log_prior_eta + self.log_prior_x
                - self.log_q_theta - self.log_q_beta
                - self.log_q_eta - self.log_q_x)

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in (
            "loglik", "log_prior_theta", "log_prior_beta", "log_prior_eta",
            "log_prior_x", "log_q_theta", "log_q_beta", "log_q_eta", "log_q_x")}


def elbo_components(params: VariationalParams, priors: PriorSpec,
                    counts: torch.Tensor, brand_ids: torch.Tensor,
                    sample: ReparamSample, num_train_docs: int,
                    lam: torch.Tensor | None = None) -> ElboComponents:
    """Assemble the one-sample ELBO for a batch. `lam` may be passed in when
    the caller already computed rates (the trainer reuses them for sampling)."""
    scale = num_train_docs / counts.shape[0]
    if lam is None:
        lam = rate_batch(sample.theta, sample.beta, sample.eta, sample.x, brand_ids)
    doc_ids = sample.doc_ids
    m, n = priors.gamma_shape, priors.gamma_rate
    return ElboComponents(
        loglik=scale * poisson_loglik(counts, lam).sum(),
        log_prior_theta=scale * gamma_logpdf(sample.theta, sample.log_theta, m, n).sum(),
        log_prior_beta=gamma_logpdf(sample.beta, sample.log_beta, m, n).sum(),
        log_prior_eta=normal_logpdf(sample.eta, priors.normal_loc,
                                    priors.normal_scale).sum(),
        log_prior_x=normal_logpdf(sample.x, priors.normal_loc,
                                  priors.normal_scale).sum(),
        log_q_theta=scale * lognormal_logpdf(
            sample.log_theta, params.theta_loc[doc_ids],
            params.scale("theta")[doc_ids]).sum(),
        log_q_beta=lognormal_logpdf(sample.log_beta, params.beta_loc,
                                    params.scale("beta")).sum(),
        log_q_eta=normal_logpdf(sample.eta, params.eta_loc,
                                params.scale("eta")).sum(),
        log_q_x=normal_logpdf(sample.x, params.x_loc, params.scale("x")).sum(),
        scale=scale,
    )


def elbo(params: VariationalParams, priors: PriorSpec, counts: torch.Tensor,
         brand_ids: torch.Tensor, sample: ReparamSample,
         num_train_docs: int) -> torch.Tensor:
    """One-sample ELBO estimate; raises NumericalError with a component
    breakdown if the estimate is not finite."""
    components = elbo_components(params, priors, counts, brand_ids, sample,
                                 num_train_docs)
    total = components.total()
    if not torch.isfinite(total):
        raise NumericalError(
            f"non-finite ELBO; components: {components.as_floats()}")
    return total
