"""Shared test fixtures: linear-Gaussian toy models with known marginals."""

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class LinearGaussianModel:
    """p(z) = N(0, I), p(x|z) = N(Wz + b, s2 I), encoder = exact posterior.

    With the exact posterior the importance weight p(x, z) / q(z | x) is
    constant in z and equals the marginal likelihood, which makes this the
    reference model for importance-sampling estimators.
    """

    def __init__(self, w: np.ndarray, b: np.ndarray, noise_var: float):
        self.w = np.asarray(w, dtype=float)          # (d, m)
        self.b = np.asarray(b, dtype=float)          # (d,)
        self.noise_var = float(noise_var)
        d, m = self.w.shape
        self.post_cov = np.linalg.inv(np.eye(m) + self.w.T @ self.w / noise_var)
        self.post_chol = np.linalg.cholesky(self.post_cov)
        sign, logdet = np.linalg.slogdet(self.post_cov)
        assert sign > 0
        self.post_logdet = logdet

    def posterior_mean(self, x: np.ndarray) -> np.ndarray:
        # row convention, works for (d,) vectors and (n, d) batches alike
        return ((x - self.b) @ self.w / self.noise_var) @ self.post_cov

    def _log_likelihood(self, x, z):
        d = x.shape[-1]
        resid = x - (z @ self.w.T + self.b)
        return -0.5 * (d * (LOG_2PI + np.log(self.noise_var))
                       + (resid ** 2).sum(axis=-1) / self.noise_var)

    @staticmethod
    def _log_prior(z):
        m = z.shape[-1]
        return -0.5 * (m * LOG_2PI + (z ** 2).sum(axis=-1))

    def _log_posterior(self, x, z):
        m = z.shape[-1]
        mean = self.posterior_mean(x)
        diff = z - mean
        quad = np.einsum("...i,ij,...j->...", diff,
                         np.linalg.inv(self.post_cov), diff)
        return -0.5 * (m * LOG_2PI + self.post_logdet + quad)

    def log_importance_weight(self, x: np.ndarray, rng) -> np.ndarray:
        """One posterior draw per row; weights are constant by construction."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, m = x.shape[0], self.w.shape[1]
        eps = rng.standard_normal((n, m))
        z = self.posterior_mean(x) + eps @ self.post_chol.T
        return (self._log_likelihood(x, z) + self._log_prior(z)
                - self._log_posterior(x, z))

    def elbo_samples(self, x: np.ndarray, q_mean: np.ndarray,
                     q_log_var: np.ndarray, n: int, rng) -> np.ndarray:
        """Single-sample ELBO draws under a (generally suboptimal) diagonal q."""
        x = np.asarray(x, dtype=float)
        m = self.w.shape[1]
        std = np.exp(0.5 * q_log_var)
        eps = rng.standard_normal((n, m))
        z = q_mean + std * eps
        log_q = -0.5 * (m * LOG_2PI + q_log_var.sum()
                        + (((z - q_mean) / std) ** 2).sum(axis=-1))
        return self._log_likelihood(x, z) + self._log_prior(z) - log_q


def zero_parameters(model) -> None:
    """Zero every parameter tensor in place (degenerate-model fixture)."""
    for t in model.parameters().values():
        t.data[...] = 0.0
