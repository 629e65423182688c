"""Sparse variational GP regression: ELBO objective and predictive posterior.

The variational posterior over inducing values is q(u) = N(m, S) with
S = L L^T, L lower triangular (unwhitened parameterization). For a Gaussian
likelihood the expected log-likelihood is available in closed form, so the
minibatch ELBO is

    (N / batch) * sum_j [ log N(y_j | mu_j, sigma_n^2) - v_j / (2 sigma_n^2) ]
    - KL(q(u) || N(0, K_zz))

with mu_j = K_jz K_zz^-1 m and v_j the marginal variance of q(f_j).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, plain
from .errors import DimensionMismatch, NonFinite

LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass
class PredictiveDistribution:
    """Marginal predictive mean/variance at a batch of inputs."""

    mean: np.ndarray
    variance: np.ndarray
    includes_noise: bool


@dataclass
class Metrics:
    log_density: float  # mean per-point log predictive density
    mae: float
    mse: float

    def as_dict(self):
        return {"log_density_per_point": self.log_density, "mae": self.mae,
                "mse": self.mse}


class SVGPModel:
    """Sparse GP with free inducing locations and Gaussian noise."""

    def __init__(self, kernel, inducing, noise_variance=0.1, jitter=None):
        self.kernel = kernel
        if isinstance(inducing, Param):
            self.z = inducing
        else:
            z = np.asarray(inducing, dtype=float)
            if z.ndim != 2:
                raise DimensionMismatch("inducing locations must be (M, d)")
            self.z = Param(z, "none", "inducing")
        self.m_inducing = self.z.raw.shape[0]
        self.m = Param(np.zeros(self.m_inducing), "none", "variational_mean")
        self.scale = Param(np.eye(self.m_inducing), "lower-triangular",
                           "variational_scale")
        self.noise = Param(float(noise_variance), "positive", "noise_variance")
        self.jitter = jitter

    @property
    def input_dim(self):
        return self.z.raw.shape[1]

    def params(self):
        seen, out = set(), []
        for p in [*self.kernel.params(), self.z, self.m, self.scale, self.noise]:
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def set_variational(self, mean, scale_lower):
        self.m = Param(np.asarray(mean, dtype=float).reshape(self.m_inducing),
                       "none", "variational_mean")
        self.scale = Param(np.asarray(scale_lower, dtype=float),
                           "lower-triangular", "variational_scale")

    def _posterior_terms(self, x, read):
        z = read(self.z)
        kzz, kzx, kdiag = self.kernel.cov_blocks(x, z, read)
        lower = ad.cholesky(kzz, self.jitter)
        a = ad.solve_lower(lower, kzx)  # (M, n)
        mcol = ad.reshape(read(self.m), (self.m_inducing, 1))
        alpha = ad.solve_lower(lower, mcol)
        mu = ad.transpose(a) @ alpha  # (n, 1)
        v1 = kdiag - ad.transpose(ad.sum_axis(a * a, 0))
        w = ad.solve_upper(ad.transpose(lower), a)  # K_zz^-1 K_zx
        ls = read(self.scale)
        c = ad.transpose(ls) @ w
        v = v1 + ad.transpose(ad.sum_axis(c * c, 0))
        return lower, alpha, ls, mu, v

    def elbo_parts(self, x, y, n_total, read=None):
        """Data-fit term and KL term of the bound; elbo = fit - kl."""
        read = plain if read is None else read
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        nb = x.shape[0]
        if nb == 0:
            raise ValueError("batch must be non-empty")
        if n_total < nb:
            raise ValueError("n_total must be at least the batch size")
        lower, alpha, ls, mu, v = self._posterior_terms(x, read)
        noise = read(self.noise)
        resid = y - mu
        fit = (-0.5 * nb) * ad.log(2.0 * math.pi * noise) \
            - ad.sum_all(resid * resid) / (2.0 * noise) \
            - ad.sum_all(v) / (2.0 * noise)
        fit = (float(n_total) / nb) * fit

        li_ls = ad.solve_lower(lower, ls)
        trace = ad.sum_all(li_ls * li_ls)
        quad = ad.sum_all(alpha * alpha)
        logdet_k = 2.0 * ad.sum_all(ad.log(ad.diag_part(lower)))
        logdet_s = 2.0 * ad.sum_all(ad.log(ad.diag_part(ls)))
        kl = 0.5 * (trace + quad - float(self.m_inducing) + logdet_k - logdet_s)
        return fit, kl

    def elbo(self, x, y, n_total, read=None):
        """Minibatch evidence lower bound (a Node when read is a tape)."""
        fit, kl = self.elbo_parts(x, y, n_total, read)
        out = fit - kl
        if read is None and not np.isfinite(ad.value(out)):
            raise NonFinite("ELBO evaluated to a non-finite value")
        return out

    def elbo_value(self, x, y, n_total):
        return float(ad.value(self.elbo(x, y, n_total)))

    def predict(self, x_star, include_noise=True):
        x_star = np.asarray(x_star, dtype=float)
        _, _, _, mu, v = self._posterior_terms(x_star, plain)
        mean = np.asarray(mu).reshape(-1)
        var = np.broadcast_to(np.asarray(v), (x_star.shape[0], 1)).reshape(-1)
        var = np.maximum(var, 0.0)
        if include_noise:
            var = var + float(self.noise.value)
        return PredictiveDistribution(mean=mean, variance=var.copy(),
                                      includes_noise=include_noise)

    def reinitialize(self, rng, data):
        """Fresh random restart: kernel, inducing points, q(u), and noise.

        The inducing Param is updated in place because GP-interpolated
        kernels hold a reference to the same object.
        """
        self.kernel.reinitialize(rng, data)
        xt = data.train_x()
        m = self.m_inducing
        if data.input_dim == 1:
            lo, hi = float(xt.min()), float(xt.max())
            z = np.linspace(lo, hi, m).reshape(-1, 1)
        else:
            idx = rng.choice(xt.shape[0], size=min(m, xt.shape[0]), replace=False)
            z = xt[idx]
            while z.shape[0] < m:  # tiny datasets: pad with jittered copies
                extra = xt[rng.choice(xt.shape[0], size=m - z.shape[0])]
                z = np.vstack([z, extra + rng.normal(0, 1e-3, size=extra.shape)])
        self.z.raw[...] = z
        self.m = Param(np.zeros(m), "none", "variational_mean")
        self.scale = Param(np.eye(m), "lower-triangular", "variational_scale")
        self.noise = Param(0.1 * max(data.train_y_variance(), 1e-6),
                           "positive", "noise_variance")


def metrics(pred, y_test):
    """Mean log predictive density, MAE, and MSE on held-out targets.

    The log density uses the distribution's variance as given; pass a
    noise-inclusive prediction for observation-space likelihoods.
    """
    y = np.asarray(y_test, dtype=float).reshape(-1)
    if y.shape[0] != pred.mean.shape[0]:
        raise DimensionMismatch(
            f"{y.shape[0]} targets vs {pred.mean.shape[0]} predictions")
    err = y - pred.mean
    var = pred.variance
    logdens = float(np.mean(-0.5 * (LOG_TWO_PI + np.log(var)) - 0.5 * err ** 2 / var))
    return Metrics(log_density=logdens, mae=float(np.mean(np.abs(err))),
                   mse=float(np.mean(err ** 2)))
