"""Closed-form oracles shared by the unit and acceptance tests."""

import numpy as np

from rvae.encoder import kl_to_prior


def linear_gaussian(rng, D=5, L=3):
    """s = A z + e, z ~ N(0, I), e ~ N(0, sigma2 I); A has orthogonal columns."""
    Q, _ = np.linalg.qr(rng.standard_normal((D, L)))
    A = Q * rng.uniform(0.5, 2.0, L)
    sigma2 = rng.uniform(0.1, 1.0)
    s = rng.standard_normal(D) * 1.5
    return A, sigma2, s


def elbo_diag(A, sigma2, s, mu, var):
    D = len(s)
    resid = s - A @ mu
    # E_q ||s - A z||^2 = ||s - A mu||^2 + sum_l ||A_l||^2 var_l
    e_sq = resid @ resid + np.sum((A ** 2).sum(axis=0) * var)
    e_loglik = -0.5 * D * np.log(2 * np.pi * sigma2) - e_sq / (2 * sigma2)
    return e_loglik - kl_to_prior(mu, var)


def log_evidence(A, sigma2, s):
    C = A @ A.T + sigma2 * np.eye(len(s))
    _, logdet = np.linalg.slogdet(C)
    return -0.5 * (len(s) * np.log(2 * np.pi) + logdet + s @ np.linalg.solve(C, s))


def exact_posterior(A, sigma2, s):
    prec = np.eye(A.shape[1]) + A.T @ A / sigma2
    cov = np.linalg.inv(prec)
    return cov @ A.T @ s / sigma2, cov


def gauss_kl(mu0, var0, mu1, cov1):
    """KL(N(mu0, diag var0) || N(mu1, cov1))."""
    inv1 = np.linalg.inv(cov1)
    d = mu1 - mu0
    L = len(mu0)
    return 0.5 * (np.trace(inv1 * var0) + d @ inv1 @ d - L
                  + np.linalg.slogdet(cov1)[1] - np.sum(np.log(var0)))
