"""Plain Poisson factorization fit by coordinate-ascent variational inference.

Used to initialize the document-topic and topic-word posteriors of the full
model. Both factors get Gamma(prior_shape, prior_rate) priors and Gamma
variational posteriors; per-(doc, term) auxiliary topic responsibilities are
proportional to the factors' geometric means. All updates touch only the
nonzero count entries plus K-sized marginals, so memory stays near the size
of the sparse count matrix.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.special import digamma

from .errors import NumericalError, ValidationError
from .util import softplus_inv

logger = logging.getLogger(__name__)

PF_FORMAT = "pf-checkpoint"
PF_FORMAT_VERSION = 1


@dataclass
class PFParams:
    """Gamma variational parameters for document-topic and topic-word factors."""

    theta_shape: np.ndarray
    theta_rate: np.ndarray
    beta_shape: np.ndarray
    beta_rate: np.ndarray
    prior_shape: float
    prior_rate: float

    def theta_mean(self) -> np.ndarray:
        return self.theta_shape / self.theta_rate

    def beta_mean(self) -> np.ndarray:
        return self.beta_shape / self.beta_rate

    def check_finite_positive(self, sweep: int) -> None:
        for name in ("theta_shape", "theta_rate", "beta_shape", "beta_rate"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all() or (arr <= 0).any():
                raise NumericalError(
                    f"{name} became non-positive or non-finite at sweep {sweep}")


def pf_rate(theta_mean: np.ndarray, beta_mean: np.ndarray, d: int, v: int) -> float:
    """Poisson rate for one (document, term) cell: sum_k theta[d,k] * beta[k,v]."""
    return float(theta_mean[d] @ beta_mean[:, v])


def _geometric_mean(shape: np.ndarray, rate: np.ndarray) -> np.ndarray:
    return np.exp(digamma(shape)) / rate


def _nonzero_normalizer(geo_theta, geo_beta, rows, cols):
    # s_dv = sum_k G(theta_dk) G(beta_kv), evaluated only at nonzero cells.
    return np.einsum("nk,nk->n", geo_theta[rows], geo_beta[:, cols].T)


def responsibilities(pf: PFParams, counts: sparse.csr_matrix):
    """Per-nonzero topic responsibilities; returns (rows, cols, phi[nnz, K])."""
    coo = counts.tocoo()
    geo_theta = _geometric_mean(pf.theta_shape, pf.theta_rate)
    geo_beta = _geometric_mean(pf.beta_shape, pf.beta_rate)
    unnorm = geo_theta[coo.row] * geo_beta[:, coo.col].T
    return coo.row, coo.col, unnorm / unnorm.sum(axis=1, keepdims=True)


def mean_loglik(pf: PFParams, counts: sparse.csr_matrix) -> float:
    """Training Poisson log-likelihood at the variational means (log c! dropped)."""
    theta = pf.theta_mean()
    beta = pf.beta_mean()
    coo = counts.tocoo()
    lam_nz = np.einsum("nk,nk->n", theta[coo.row], beta[:, coo.col].T)
    total_rate = float(theta.sum(axis=0) @ beta.sum(axis=1))
    return float(coo.data @ np.log(lam_nz)) - total_rate


def _init_params(n_docs, n_terms, num_topics, prior_shape, prior_rate, seed):
    # Seeded multiplicative jitter around the prior; the jitter breaks the
    # symmetry between topics that exact prior seeding would leave in place.
    rng = np.random.RandomState(seed)
    jitter = lambda shape: np.exp(0.1 * rng.randn(*shape))
    return PFParams(
        theta_shape=prior_shape * jitter((n_docs, num_topics)),
        theta_rate=prior_rate * jitter((n_docs, num_topics)),
        beta_shape=prior_shape * jitter((num_topics, n_terms)),
        beta_rate=prior_rate * jitter((num_topics, n_terms)),
        prior_shape=prior_shape,
        prior_rate=prior_rate,
    )


def pretrain(counts: sparse.csr_matrix, num_topics: int,
             prior_shape: float = 0.3, prior_rate: float = 0.3,
             iters: int = 200, seed: int = 0, tol: float = 1e-5) -> PFParams:
    """Run coordinate-ascent sweeps until `iters` or the relative change of the
    mean-rate training log-likelihood drops below `tol`.

    Each sweep updates the document side (shapes from expected auxiliary counts,
    rates from expected topic-word sums), re-normalizes responsibilities, then
    updates the topic side the same way.
    """
    if num_topics < 1:
        raise ValidationError(f"num_topics must be >= 1, got {num_topics}")
    if prior_shape <= 0 or prior_rate <= 0:
        raise ValidationError("prior shape and rate must be positive")
    counts = sparse.csr_matrix(counts)
    n_docs, n_terms = counts.shape
    pf = _init_params(n_docs, n_terms, num_topics, prior_shape, prior_rate, seed)
    if iters == 0:
        return pf

    coo = counts.tocoo()
    rows, cols, data = coo.row, coo.col, coo.data.astype(np.float64)

    def weighted(geo_theta, geo_beta):
        s = _nonzero_normalizer(geo_theta, geo_beta, rows, cols)
        return sparse.csr_matrix((data / s, (rows, cols)), shape=counts.shape)

    last = mean_loglik(pf, counts)
    for sweep in range(1, iters + 1):
        geo_theta = _geometric_mean(pf.theta_shape, pf.theta_rate)
        geo_beta = _geometric_mean(pf.beta_shape, pf.beta_rate)
        w = weighted(geo_theta, geo_beta)
        pf.theta_shape = prior_shape + geo_theta * (w @ geo_beta.T)
        pf.theta_rate = prior_rate + np.broadcast_to(
            pf.beta_mean().sum(axis=1), (n_docs, num_topics)).copy()

        geo_theta = _geometric_mean(pf.theta_shape, pf.theta_rate)
        w = weighted(geo_theta, geo_beta)
        pf.beta_shape = prior_shape + geo_beta * (w.T @ geo_theta).T
        pf.beta_rate = prior_rate + np.broadcast_to(
            pf.theta_mean().sum(axis=0)[:, None], (num_topics, n_terms)).copy()

        pf.check_finite_positive(sweep)
        current = mean_loglik(pf, counts)
        rel_change = abs(current - last) / max(abs(last), 1.0)
        logger.debug("pretrain sweep %d: mean-rate loglik %.6f", sweep, current)
        last = current
        if rel_change < tol:
            logger.info("pretrain converged after %d sweeps", sweep)
            break
    return pf


def init_locations_from_pf(pf: PFParams, init_scale: float = 0.1) -> dict[str, np.ndarray]:
    """Hand-off to the full model: lognormal locations at the log of the Gamma
    means, scales at a small constant (stored pre-softplus)."""
    raw = softplus_inv(init_scale)
    return {
        "theta_loc": np.log(pf.theta_mean()),
        "theta_scale_raw": np.full_like(pf.theta_shape, raw),
        "beta_loc": np.log(pf.beta_mean()),
        "beta_scale_raw": np.full_like(pf.beta_shape, raw),
    }


def save_pf(pf: PFParams, path: str) -> None:
    """Versioned .npz dump with a json header (dims and prior hyperparameters)."""
    d, k = pf.theta_shape.shape
    _, v = pf.beta_shape.shape
    meta = json.dumps({
        "format": PF_FORMAT, "version": PF_FORMAT_VERSION,
        "num_docs": d, "num_topics": k, "num_terms": v,
        "prior_shape": pf.prior_shape, "prior_rate": pf.prior_rate,
    })
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, meta=np.array(meta), theta_shape=pf.theta_shape,
                 theta_rate=pf.theta_rate, beta_shape=pf.beta_shape,
                 beta_rate=pf.beta_rate)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_pf(path: str) -> PFParams:
    with np.load(path) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format") != PF_FORMAT or meta.get("version") != PF_FORMAT_VERSION:
            raise ValidationError(f"{path} is not a version-{PF_FORMAT_VERSION} "
                                  f"{PF_FORMAT} file")
        pf = PFParams(
            theta_shape=archive["theta_shape"], theta_rate=archive["theta_rate"],
            beta_shape=archive["beta_shape"], beta_rate=archive["beta_rate"],
            prior_shape=float(meta["prior_shape"]), prior_rate=float(meta["prior_rate"]))
    expected = (meta["num_docs"], meta["num_topics"])
    if pf.theta_shape.shape != tuple(expected):
        raise ValidationError(f"{path}: header dims {expected} do not match arrays")
    return pf
