"""Differentiable word-count sampling.

Word counts are approximated by a Poisson truncated to {0..n-1} whose tail
mass is absorbed into the last outcome, then relaxed with Gumbel-Softmax so
the sampled soft count is differentiable in the Poisson rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ValidationError

# Rates are floored before logs are taken; zero-probability buckets get this
# log-probability instead of -inf so downstream softmax stays finite.
RATE_FLOOR = 1e-8
LOG_PROB_FLOOR = -1e30
_POSITIVE_FLOOR = 1e-300


@dataclass
class TruncatedPoissonPMF:
    """Poisson probabilities over outcomes 0..truncation-1; the last bucket
    holds the tail mass, so each row sums to 1 by construction."""

    probs: torch.Tensor
    lam: torch.Tensor
    truncation: int


@dataclass
class SoftCount:
    """Gumbel-Softmax relaxed draw: simplex weights over outcomes and the
    resulting soft count value = sum_i weights_i * i."""

    weights: torch.Tensor
    value: torch.Tensor
    tau: float


def truncated_pmf(lam: torch.Tensor, n: int) -> TruncatedPoissonPMF:
    """Truncated Poisson probabilities, computed in log space.

    probs[k] = lam^k exp(-lam) / k! for k <= n-2; probs[n-1] = max(0, 1 - rest).
    """
    lam = torch.as_tensor(lam, dtype=torch.float64)
    if n < 2:
        raise ValidationError(f"truncation must be >= 2, got {n}")
    if not torch.isfinite(lam).all() or (lam < 0).any():
        raise ValidationError("rates must be finite and >= 0")
    ks = torch.arange(n - 1, dtype=lam.dtype)
    lam_col = lam.unsqueeze(-1)
    log_body = torch.xlogy(ks, lam_col) - lam_col - torch.lgamma(ks + 1)
    body = torch.exp(log_body)
    tail = torch.clamp(1.0 - body.sum(dim=-1, keepdim=True), min=0.0)
    return TruncatedPoissonPMF(probs=torch.cat([body, tail], dim=-1),
                               lam=lam, truncation=n)


def gumbel_softmax_draw(pmf: TruncatedPoissonPMF, tau: float,
                        gen: torch.Generator | None = None,
                        uniforms: torch.Tensor | None = None) -> SoftCount:
    """One relaxed categorical draw per pmf row.

    g_i = -log(-log(u_i)) with u_i ~ Uniform(0,1); weights are
    softmax((g_i + log pi_i) / tau), and the value is the weighted mean of the
    outcomes 0..n-1. Pass `uniforms` to reuse noise across calls.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    probs = pmf.probs
    if uniforms is None:
        uniforms = torch.rand(probs.shape, generator=gen, dtype=probs.dtype)
    u = uniforms.clamp(min=_POSITIVE_FLOOR)
    gumbels = -torch.log(-torch.log(u))
    log_pi = torch.where(probs > 0,
                         torch.log(probs.clamp(min=_POSITIVE_FLOOR)),
                         torch.full_like(probs, LOG_PROB_FLOOR))
    weights = torch.softmax((gumbels + log_pi) / tau, dim=-1)
    outcomes = torch.arange(pmf.truncation, dtype=probs.dtype)
    return SoftCount(weights=weights, value=(weights * outcomes).sum(dim=-1), tau=tau)


def soft_document(lam: torch.Tensor, tau: float, n: int,
                  gen: torch.Generator | None = None,
                  uniforms: torch.Tensor | None = None,
                  l1_normalize: bool = False) -> torch.Tensor:
    """Soft count per term: independent relaxed truncated-Poisson draws.

    `lam` has shape (..., V); the result drops the outcome axis and matches
    `lam`. Rates are floored at RATE_FLOOR. `uniforms`, when given, must have
    shape lam.shape + (n,).
    """
    pmf = truncated_pmf(torch.clamp(torch.as_tensor(lam, dtype=torch.float64),
                                    min=RATE_FLOOR), n)
    draw = gumbel_softmax_draw(pmf, tau, gen=gen, uniforms=uniforms)
    values = draw.value
    if l1_normalize:
        values = values / values.sum(dim=-1, keepdim=True).clamp(min=RATE_FLOOR)
    return values
