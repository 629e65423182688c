"""Covariance functions: RBF, spectral mixture (SM), Gibbs, and the
generalised spectral mixture (GSM) whose weights, lengthscales and
frequencies vary with the input.

Every ``gram``/``diag`` method takes a ``read`` callable mapping a Param to
either its plain value or a tape node, so the same formula serves evaluation
and differentiation. Inputs are (n, d) arrays; inducing locations may arrive
as tape nodes because they are optimized.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, plain
from .errors import DimensionMismatch, NonFinite, WrongKernel

TWO_PI = 2.0 * math.pi


def _col(x, k):
    """Column k of a 2-d array or node, kept shaped (n, 1)."""
    if isinstance(x, ad.Node):
        return ad.cols(x, k, k + 1)
    return np.asarray(x, dtype=float)[:, k : k + 1]


def _ncols(x):
    return (x.value if isinstance(x, ad.Node) else np.asarray(x)).shape[1]


def rbf_gram(x, x2, lengthscales, variance=None):
    """Unit-variance RBF Gram matrix, optionally scaled by ``variance``.

    ``lengthscales`` has one entry per input column.
    """
    d = _ncols(x)
    s = None
    for k in range(d):
        diff = _col(x, k) - ad.transpose(_col(x2, k))
        lk = ad.elem(lengthscales, k)
        term = (diff * diff) / (2.0 * lk * lk)
        s = term if s is None else s + term
    out = ad.exp(-s)
    if variance is not None:
        out = variance * out
    return out


class RBFKernel:
    """Squared-exponential kernel with per-dimension lengthscales."""

    name = "rbf"

    def __init__(self, input_dim, variance=1.0, lengthscales=1.0):
        self.input_dim = input_dim
        self.variance = Param(float(variance), "positive", "rbf.variance")
        ls = np.full(input_dim, float(lengthscales)) if np.ndim(lengthscales) == 0 \
            else np.asarray(lengthscales, dtype=float)
        if ls.shape != (input_dim,):
            raise DimensionMismatch("lengthscale count must match input_dim")
        self.lengthscales = Param(ls, "positive", "rbf.lengthscales")

    def params(self):
        return [self.variance, self.lengthscales]

    def l2_params(self):
        return []

    def gram(self, x, x2=None, read=plain):
        x2 = x if x2 is None else x2
        return rbf_gram(x, x2, read(self.lengthscales), read(self.variance))

    def diag(self, x, read=plain):
        return ad.reshape(read(self.variance), (1, 1))

    def cov_blocks(self, x, z, read=plain):
        return self.gram(z, z, read=read), self.gram(z, x, read=read), self.diag(x, read)

    def reinitialize(self, rng, data):
        span = data.input_span()
        self.variance = Param(float(rng.uniform(0.5, 2.0)), "positive", "rbf.variance")
        ls = np.exp(rng.uniform(np.log(span / 50.0), np.log(span / 2.0)))
        self.lengthscales = Param(ls, "positive", "rbf.lengthscales")


class SMKernel:
    """Stationary spectral mixture: a sum of Q Gaussian spectral components.

    k(tau) = sum_q w_q^2 * prod_k exp(-2 pi^2 sigma_qk^2 tau_k^2)
                         * cos(2 pi mu_q . tau)

    Frequencies are kept inside (0, F_N) per dimension through a scaled
    sigmoid on an unconstrained array.
    """

    name = "sm"

    def __init__(self, q, nyquist, weights=None, frequencies=None, scales=None):
        if q < 1:
            raise ValueError("component count must be >= 1")
        self.q = q
        self.nyquist = np.atleast_1d(np.asarray(nyquist, dtype=float))
        self.input_dim = self.nyquist.shape[0]
        w = np.full(q, 1.0) if weights is None else np.asarray(weights, dtype=float)
        mu = (np.full((q, self.input_dim), 0.5) * self.nyquist
              if frequencies is None else np.asarray(frequencies, dtype=float))
        sig = (np.full((q, self.input_dim), 1.0)
               if scales is None else np.asarray(scales, dtype=float))
        self.weights = Param(w, "positive", "sm.weights")
        self.freq_raw = Param.from_raw(ad.logit(mu / self.nyquist), "none", "sm.frequencies")
        self.scales = Param(sig, "positive", "sm.scales")

    def params(self):
        return [self.weights, self.freq_raw, self.scales]

    def l2_params(self):
        return []

    def frequencies(self, read=plain):
        return self.nyquist * ad.sigmoid(read(self.freq_raw))

    def gram(self, x, x2=None, read=plain):
        x2 = x if x2 is None else x2
        w = read(self.weights)
        sig = read(self.scales)
        mu = self.frequencies(read)
        total = None
        for q in range(self.q):
            expo = None
            phase = None
            for k in range(self.input_dim):
                tau = _col(x, k) - ad.transpose(_col(x2, k))
                sq = ad.elem(sig, (q, k))
                e = sq * sq * (tau * tau)
                expo = e if expo is None else expo + e
                p = ad.elem(mu, (q, k)) * tau
                phase = p if phase is None else phase + p
            wq = ad.elem(w, q)
            term = wq * wq * ad.exp(-2.0 * math.pi ** 2 * expo) * ad.cos(TWO_PI * phase)
            total = term if total is None else total + term
        return total

    def diag(self, x, read=plain):
        w = read(self.weights)
        return ad.reshape(ad.sum_all(w * w), (1, 1))

    def cov_blocks(self, x, z, read=plain):
        return self.gram(z, z, read=read), self.gram(z, x, read=read), self.diag(x, read)

    def reinitialize(self, rng, data):
        span = data.input_span()
        mu = rng.uniform(0.0, 1.0, size=(self.q, self.input_dim))
        mu = np.clip(mu, 1e-3, 1 - 1e-3) * self.nyquist
        ells = np.exp(rng.uniform(np.log(span / 20.0), np.log(span / 2.0),
                                  size=(self.q, self.input_dim)))
        sig = 1.0 / (TWO_PI * ells)
        w = np.full(self.q, math.sqrt(max(data.train_y_variance(), 1e-8) / self.q))
        self.weights = Param(w, "positive", "sm.weights")
        self.freq_raw = Param.from_raw(ad.logit(mu / self.nyquist), "none", "sm.frequencies")
        self.scales = Param(sig, "positive", "sm.scales")


def gibbs_gram(ell_x, ell_x2, x, x2):
    """Gibbs kernel for one input dimension with given lengthscale columns.

    ``ell_x`` is l(x) at the rows of ``x`` shaped (n, 1); likewise for x2.
    """
    lx = np.asarray(ell_x, dtype=float).reshape(-1, 1)
    lx2 = np.asarray(ell_x2, dtype=float).reshape(-1, 1)
    if np.any(lx <= 0) or np.any(lx2 <= 0):
        raise NonFinite("gibbs lengthscales must be strictly positive")
    xc = np.asarray(x, dtype=float).reshape(-1, 1)
    x2c = np.asarray(x2, dtype=float).reshape(-1, 1)
    tau = xc - x2c.T
    s = lx * lx + (lx2 * lx2).T
    pref = np.sqrt(2.0 * lx * lx2.T / s)
    return pref * np.exp(-(tau * tau) / s)


class GSMKernel:
    """Generalised spectral mixture with input-dependent parameters.

    k(x, x') = sum_q w_q(x) w_q(x')
               * prod_k Gibbs(x_k, x'_k; l_qk(x), l_qk(x'))
               * cos(2 pi (mu_q(x).x - mu_q(x').x'))

    The three latent functions come from the attached parameter function
    (constant, neural, or anchored GP interpolation). Each factor is PSD,
    so the sum is PSD. For d > 1 the frequencies are per-dimension vectors
    and the Gibbs part is a per-dimension product.
    """

    def __init__(self, fn):
        self.fn = fn
        self.q = fn.q
        self.input_dim = fn.input_dim
        self.nyquist = fn.nyquist
        self.name = {"constant": "gsm-constant", "neural": "neural-gsm",
                     "gp-interp": "gp-gsm"}[fn.variant]

    def params(self):
        return self.fn.params()

    def l2_params(self):
        return self.fn.l2_params()

    def gram(self, x, x2=None, read=plain, lat=None, lat2=None):
        if x2 is None:
            lat = self.fn.latents(x, read) if lat is None else lat
            return self._combine(x, x, lat, lat)
        lat = self.fn.latents(x, read) if lat is None else lat
        lat2 = self.fn.latents(x2, read) if lat2 is None else lat2
        return self._combine(x, x2, lat, lat2)

    def diag(self, x, read=plain, lat=None):
        lat = self.fn.latents(x, read) if lat is None else lat
        total = None
        for q in range(self.q):
            t = lat.w[q] * lat.w[q]
            total = t if total is None else total + t
        return total

    def cov_blocks(self, x, z, read=plain):
        lat_x = self.fn.latents(x, read)
        lat_z = self.fn.latents_at_inducing(z, read)
        kzz = self._combine(z, z, lat_z, lat_z)
        kzx = self._combine(z, x, lat_z, lat_x)
        return kzz, kzx, self.diag(x, read, lat=lat_x)

    def _combine(self, xa, xb, la, lb):
        total = None
        for q in range(self.q):
            wterm = la.w[q] * ad.transpose(lb.w[q])
            gib = None
            pa = None
            pb = None
            for k in range(self.input_dim):
                ca = _col(xa, k)
                cb = _col(xb, k)
                tau = ca - ad.transpose(cb)
                li = la.ell[q][k]
                lj = ad.transpose(lb.ell[q][k])
                s = li * li + lj * lj
                g = ad.sqrt(2.0 * li * lj / s) * ad.exp(-(tau * tau) / s)
                gib = g if gib is None else gib * g
                fa = la.mu[q][k] * ca
                fb = lb.mu[q][k] * cb
                pa = fa if pa is None else pa + fa
                pb = fb if pb is None else pb + fb
            term = wterm * gib * ad.cos(TWO_PI * (pa - ad.transpose(pb)))
            total = term if total is None else total + term
        return total

    def reinitialize(self, rng, data):
        self.fn.reinitialize(rng, data)


@dataclass
class SpectrogramGrid:
    """Input-localized spectral density S(s, x) on a rectangular grid."""

    x_grid: np.ndarray
    s_grid: np.ndarray
    density: np.ndarray  # (len(s_grid), len(x_grid)), non-negative

    def to_csv(self, path):
        # header row of x values, first column of s values
        lines = ["," + ",".join(repr(float(v)) for v in self.x_grid)]
        for i, s in enumerate(self.s_grid):
            row = ",".join(repr(float(v)) for v in self.density[i])
            lines.append(f"{float(s)!r},{row}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path, encoding="utf-8") as fh:
            rows = [line.strip().split(",") for line in fh if line.strip()]
        x_grid = np.array([float(v) for v in rows[0][1:]])
        s_grid = np.array([float(r[0]) for r in rows[1:]])
        density = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(x_grid=x_grid, s_grid=s_grid, density=density)


def spectrogram(kernel, x_grid, s_grid):
    """Evaluate S(s, x) = sum_q w_q(x)^2 N(s | mu_q(x), l_q(x)^-2).

    Only one-dimensional inputs have a spectrogram; SM kernels can be
    rendered by converting them to a constant-parameter GSM first.
    """
    if not isinstance(kernel, GSMKernel):
        raise WrongKernel(f"spectrogram needs a GSM-family kernel, got {kernel.name!r}")
    if kernel.input_dim != 1:
        raise WrongKernel("spectrogram is defined for one-dimensional inputs")
    x_grid = np.asarray(x_grid, dtype=float).reshape(-1)
    s_grid = np.asarray(s_grid, dtype=float).reshape(-1)
    if x_grid.size == 0 or s_grid.size == 0:
        raise ValueError("spectrogram grids must be non-empty")
    lat = kernel.fn.latents(x_grid.reshape(-1, 1), plain)
    nx, ns = x_grid.size, s_grid.size
    density = np.zeros((ns, nx))
    s_col = s_grid.reshape(-1, 1)
    for q in range(kernel.q):
        w2 = np.broadcast_to(np.asarray(lat.w[q]).reshape(1, -1) ** 2, (1, nx))
        mu = np.broadcast_to(np.asarray(lat.mu[q][0]).reshape(1, -1), (1, nx))
        var = np.broadcast_to(np.asarray(lat.ell[q][0]).reshape(1, -1) ** -2.0, (1, nx))
        pdf = np.exp(-0.5 * (s_col - mu) ** 2 / var) / np.sqrt(TWO_PI * var)
        density += w2 * pdf
    return SpectrogramGrid(x_grid=x_grid, s_grid=s_grid, density=density)
