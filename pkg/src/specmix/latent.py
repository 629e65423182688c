"""Latent parameter functions w_i(x), l_i(x), mu_i(x) for the GSM kernel.

Three interchangeable variants:

* ``ConstantFunction`` - per-component constants; turns the GSM into the
  stationary spectral mixture.
* ``NeuralFunction`` - a shared-trunk MLP with SELU hidden layers; softplus
  output heads for weights/lengthscales, a Nyquist-scaled sigmoid head for
  frequencies.
* ``GPInterpFunction`` - values anchored at the inducing locations and
  interpolated in warped (log / logit) space, so outputs always satisfy
  positivity and the Nyquist range.

All variants return per-component column vectors; a constant variant returns
(1, 1) values that broadcast inside the kernel formulas.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Param, plain
from .errors import ConstraintViolation
from .kernels import rbf_gram

# Invariant: outputs stay strictly inside (0, F_N); clamp warped frequencies
# away from the boundary when constructing from explicit values.
_LOGIT_EPS = 1e-12


class LatentValues:
    """Per-component latent outputs: w[q], ell[q][k], mu[q][k]."""

    __slots__ = ("w", "ell", "mu")

    def __init__(self, w, ell, mu):
        self.w = w
        self.ell = ell
        self.mu = mu


def _unwarp_freq(raw, nyquist_k):
    return nyquist_k * ad.sigmoid(raw)


class ConstantFunction:
    """Constant latent functions; reproduces the SM kernel exactly."""

    variant = "constant"

    def __init__(self, weights, lengthscales, frequencies, nyquist):
        self.nyquist = np.atleast_1d(np.asarray(nyquist, dtype=float))
        self.input_dim = self.nyquist.shape[0]
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        ell = np.asarray(lengthscales, dtype=float).reshape(w.shape[0], self.input_dim)
        mu = np.asarray(frequencies, dtype=float).reshape(w.shape[0], self.input_dim)
        if np.any(w <= 0) or np.any(ell <= 0):
            raise ConstraintViolation("weights and lengthscales must be positive")
        if np.any(mu <= 0) or np.any(mu >= self.nyquist):
            raise ConstraintViolation("frequencies must lie strictly inside (0, F_N)")
        self.q = w.shape[0]
        self.weights = Param(w, "positive", "gsm.weights")
        self.lengthscales = Param(ell, "positive", "gsm.lengthscales")
        self.freq_raw = Param.from_raw(ad.logit(mu / self.nyquist), "none", "gsm.frequencies")

    def params(self):
        return [self.weights, self.lengthscales, self.freq_raw]

    def l2_params(self):
        return []

    def latents(self, x, read=plain):
        w = read(self.weights)
        ell = read(self.lengthscales)
        raw = read(self.freq_raw)
        ws, ells, mus = [], [], []
        for qi in range(self.q):
            ws.append(ad.elem(w, qi))
            ells.append([ad.elem(ell, (qi, k)) for k in range(self.input_dim)])
            mus.append([_unwarp_freq(ad.elem(raw, (qi, k)), self.nyquist[k])
                        for k in range(self.input_dim)])
        return LatentValues(ws, ells, mus)

    def latents_at_inducing(self, z, read=plain):
        return self.latents(z, read)

    def reinitialize(self, rng, data):
        pass  # constants are point estimates chosen by the caller


class NeuralFunction:
    """Shared-trunk MLP producing the three latent functions.

    Hidden layers use SELU; the weight and lengthscale heads end in
    softplus, the frequency head in F_N * sigmoid. Heads are separate
    final layers on a common representation.
    """

    variant = "neural"

    def __init__(self, q, nyquist, input_dim, hidden=(32, 32), rng=None):
        if q < 1:
            raise ValueError("component count must be >= 1")
        self.q = q
        self.nyquist = np.atleast_1d(np.asarray(nyquist, dtype=float))
        self.input_dim = int(input_dim)
        if self.nyquist.shape[0] != self.input_dim:
            raise ConstraintViolation("nyquist entries must match input_dim")
        self.hidden = tuple(int(h) for h in hidden)
        rng = np.random.default_rng(0) if rng is None else rng
        self._build(rng)

    def _build(self, rng):
        d, (h1, h2), q = self.input_dim, self.hidden, self.q
        qd = q * d

        def dense(rows, cols, name):
            return Param(rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols)),
                         "none", name)

        self.w1 = dense(h1, d, "nn.w1")
        self.b1 = Param(np.zeros(h1), "none", "nn.b1")
        self.w2 = dense(h2, h1, "nn.w2")
        self.b2 = Param(np.zeros(h2), "none", "nn.b2")
        self.head_w = dense(q, h2, "nn.head_w")
        self.bias_w = Param(np.zeros(q), "none", "nn.bias_w")
        self.head_ell = dense(qd, h2, "nn.head_ell")
        self.bias_ell = Param(np.zeros(qd), "none", "nn.bias_ell")
        self.head_mu = dense(qd, h2, "nn.head_mu")
        # spread initial frequencies over (0, F_N): stratified sigmoid quantiles
        quantiles = (np.arange(q)[:, None] + rng.uniform(0.05, 0.95, size=(q, d))) / q
        self.bias_mu = Param(ad.logit(np.clip(quantiles, 1e-3, 1 - 1e-3)).reshape(qd),
                             "none", "nn.bias_mu")

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2,
                self.head_w, self.bias_w, self.head_ell, self.bias_ell,
                self.head_mu, self.bias_mu]

    def l2_params(self):
        return [self.w1, self.w2, self.head_w, self.head_ell, self.head_mu]

    def trunk(self, x, read=plain):
        h = ad.selu(x @ ad.transpose(read(self.w1)) + read(self.b1))
        return ad.selu(h @ ad.transpose(read(self.w2)) + read(self.b2))

    def latents(self, x, read=plain):
        h = self.trunk(x, read)
        w_out = ad.softplus(h @ ad.transpose(read(self.head_w)) + read(self.bias_w))
        ell_out = ad.softplus(h @ ad.transpose(read(self.head_ell)) + read(self.bias_ell))
        mu_lin = h @ ad.transpose(read(self.head_mu)) + read(self.bias_mu)
        mu_sig = ad.sigmoid(mu_lin)
        d = self.input_dim
        ws, ells, mus = [], [], []
        for qi in range(self.q):
            ws.append(ad.cols(w_out, qi, qi + 1))
            ells.append([ad.cols(ell_out, qi * d + k, qi * d + k + 1)
                         for k in range(d)])
            mus.append([self.nyquist[k] * ad.cols(mu_sig, qi * d + k, qi * d + k + 1)
                        for k in range(d)])
        return LatentValues(ws, ells, mus)

    def latents_at_inducing(self, z, read=plain):
        return self.latents(z, read)

    def reinitialize(self, rng, data):
        self._build(rng)


class GPInterpFunction:
    """Latent functions as anchored point estimates with RBF interpolation.

    Anchor values live in warped space at the inducing locations z (shared
    with the sparse GP); at any other input the warped values are
    interpolated as K_xz K_zz^-1 u and then unwarped. The three anchor
    kernels are unit-variance RBFs whose lengthscales are optimized jointly
    (the signal variance cancels out of the interpolation weights).
    """

    variant = "gp-interp"

    def __init__(self, q, nyquist, z_param, rng=None):
        if q < 1:
            raise ValueError("component count must be >= 1")
        self.q = q
        self.nyquist = np.atleast_1d(np.asarray(nyquist, dtype=float))
        self.z_param = z_param  # shared with the SVGP model; not owned here
        m, d = z_param.raw.shape
        self.input_dim = d
        if self.nyquist.shape[0] != d:
            raise ConstraintViolation("nyquist entries must match input_dim")
        self.m_anchors = m
        rng = np.random.default_rng(0) if rng is None else rng
        span = np.ptp(z_param.raw, axis=0)
        span = np.where(span > 0, span, 1.0)
        self._build(rng, span)

    def _build(self, rng, span):
        m, d, q = self.m_anchors, self.input_dim, self.q
        qd = q * d
        self.ls_w = Param(0.2 * span, "positive", "anchor.ls_w")
        self.ls_ell = Param(0.2 * span, "positive", "anchor.ls_ell")
        self.ls_mu = Param(0.2 * span, "positive", "anchor.ls_mu")
        self.u_w = Param(rng.normal(0.0, 0.01, size=(m, q)), "none", "anchor.u_w")
        base_ell = np.log(np.exp(rng.uniform(np.log(span / 20.0), np.log(span / 2.0),
                                             size=(q, d)))).reshape(qd)
        self.u_ell = Param(base_ell + rng.normal(0.0, 0.01, size=(m, qd)),
                           "none", "anchor.u_ell")
        quantiles = (np.arange(q)[:, None] + rng.uniform(0.05, 0.95, size=(q, d))) / q
        base_mu = ad.logit(np.clip(quantiles, 1e-3, 1 - 1e-3)).reshape(qd)
        self.u_mu = Param(base_mu + rng.normal(0.0, 0.01, size=(m, qd)),
                          "none", "anchor.u_mu")

    def params(self):
        # z is owned by the model; listing it here too would double-count
        return [self.ls_w, self.ls_ell, self.ls_mu, self.u_w, self.u_ell, self.u_mu]

    def l2_params(self):
        return []

    def _interp(self, x, read, u_param, ls_param, jitter=None):
        z = read(self.z_param)
        ls = read(ls_param)
        kzz = rbf_gram(z, z, ls)
        lower = ad.cholesky(kzz, jitter)
        kzx = rbf_gram(z, x, ls)
        half = ad.solve_lower(lower, kzx)
        weights = ad.solve_upper(ad.transpose(lower), half)  # K_zz^-1 K_zx
        return ad.transpose(weights) @ read(u_param)  # (n, cols)

    def latents(self, x, read=plain, jitter=None):
        t_w = self._interp(x, read, self.u_w, self.ls_w, jitter)
        t_ell = self._interp(x, read, self.u_ell, self.ls_ell, jitter)
        t_mu = self._interp(x, read, self.u_mu, self.ls_mu, jitter)
        return self._unwarp(t_w, t_ell, t_mu)

    def latents_at_inducing(self, z, read=plain):
        # interpolation at the anchors returns the anchor values exactly
        return self._unwarp(read(self.u_w), read(self.u_ell), read(self.u_mu))

    def _unwarp(self, t_w, t_ell, t_mu):
        d = self.input_dim
        ws, ells, mus = [], [], []
        for qi in range(self.q):
            ws.append(ad.exp(ad.cols(t_w, qi, qi + 1)))
            ells.append([ad.exp(ad.cols(t_ell, qi * d + k, qi * d + k + 1))
                         for k in range(d)])
            mus.append([self.nyquist[k]
                        * ad.sigmoid(ad.cols(t_mu, qi * d + k, qi * d + k + 1))
                        for k in range(d)])
        return LatentValues(ws, ells, mus)

    def reinitialize(self, rng, data):
        span = data.input_span()
        self._build(rng, np.where(span > 0, span, 1.0))


def constant_function_from_sm(sm_kernel):
    """Constant latent functions matching an SM kernel's current parameters.

    Uses the lengthscale substitution l = 1 / (2 pi sigma), under which the
    GSM evaluates to the SM kernel.
    """
    w = sm_kernel.weights.value
    sig = sm_kernel.scales.value
    mu = np.asarray(sm_kernel.frequencies(plain))
    mu = np.clip(mu, _LOGIT_EPS, sm_kernel.nyquist * (1 - _LOGIT_EPS))
    ell = 1.0 / (2.0 * np.pi * sig)
    return ConstantFunction(w, ell, mu, sm_kernel.nyquist)
