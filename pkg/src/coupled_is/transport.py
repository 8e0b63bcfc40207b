"""Marginal transports from the unit cube to R^d.

A transport ``T`` pushes ``Uniform(0, 1)^d`` onto a marginal distribution.
Three kinds are supported:

``gaussian-linear``
    ``x = mean + A Phi^{-1}(u)`` with ``A`` the symmetric square root of the
    covariance (a gradient of a convex potential), or its Cholesky factor.
``elliptical-linear``
    ``x = mean + A F^{-1}(u)`` for a :class:`LinearEllipticalDist`.
``product-quantile``
    ``x_j = Q_j(u_j)`` for independent 1-D marginals given as frozen
    ``scipy.stats`` distributions.

Besides ``forward``/``inverse`` on uniforms, every transport has
``from_gaussian`` which takes standard-normal scores ``z`` (``u = Phi(z)``)
and avoids losing tail precision by never forming ``u`` explicitly.
"""

import numpy as np
from scipy.special import ndtr, ndtri

from ._util import as_rows, make_rng
from .density import GaussianDist, LinearEllipticalDist

EPS_U = 1e-15
KINDS = ("gaussian-linear", "elliptical-linear", "product-quantile")


def _norm_logpdf(z):
    return -0.5 * (np.log(2.0 * np.pi) + z * z)


class MarginalTransport:
    """Invertible map from the unit cube to a marginal.

    Parameters
    ----------
    kind : str
        One of ``"gaussian-linear"``, ``"elliptical-linear"``,
        ``"product-quantile"``.
    marginal : GaussianDist, LinearEllipticalDist or list
        For ``product-quantile`` a list of frozen 1-D scipy distributions.
    root : {"symmetric", "cholesky"}
        Square root used by ``gaussian-linear``.
    """

    def __init__(self, kind, marginal, root="symmetric"):
        if kind not in KINDS:
            raise ValueError(f"unknown transport kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.marginal = marginal
        self.root = root
        if kind == "gaussian-linear":
            if not isinstance(marginal, GaussianDist):
                raise TypeError("gaussian-linear transport needs a GaussianDist")
            if root == "symmetric":
                A = marginal.sym_sqrt
            elif root == "cholesky":
                A = marginal.chol
            else:
                raise ValueError(f"unknown square root {root!r}")
            self.mean = marginal.mean
            self.scale = np.asarray(A)
            self._inv = np.linalg.inv(self.scale)
            self._logdet = np.linalg.slogdet(self.scale)[1]
            self._dim = marginal.dim
        elif kind == "elliptical-linear":
            if not isinstance(marginal, LinearEllipticalDist):
                raise TypeError("elliptical-linear transport needs a LinearEllipticalDist")
            self.mean = marginal.mean
            self.scale = marginal.scale
            self._dim = marginal.dim
        else:
            self.marginal = list(marginal)
            if not self.marginal:
                raise ValueError("product-quantile transport needs at least one marginal")
            self._dim = len(self.marginal)

    @property
    def dim(self):
        return self._dim

    def __repr__(self):
        return f"MarginalTransport(kind={self.kind!r}, dim={self.dim})"

    # -- uniform-space maps ------------------------------------------------
    def forward(self, u):
        u = as_rows(u, self.dim)
        if np.any((u <= 0) | (u >= 1)) or np.any(np.isnan(u)):
            raise ValueError("forward needs every coordinate of u strictly inside (0, 1)")
        if self.kind == "product-quantile":
            cols = [dist.ppf(u[:, j]) for j, dist in enumerate(self.marginal)]
            return np.column_stack(cols)
        return self.from_gaussian(ndtri(u))

    def inverse(self, x):
        x = as_rows(x, self.dim)
        if not np.all(np.isfinite(x)):
            raise ValueError("inverse needs finite x")
        if self.kind == "product-quantile":
            u = np.column_stack([dist.cdf(x[:, j]) for j, dist in enumerate(self.marginal)])
        elif self.kind == "gaussian-linear":
            u = ndtr((x - self.mean) @ self._inv.T)
        else:
            u = self.marginal.base_cdf(self.marginal.to_base(x))
        return np.clip(u, EPS_U, 1.0 - EPS_U)

    # -- normal-score maps -------------------------------------------------
    def _quantile_from_normal(self, z):
        cols = []
        for j, dist in enumerate(self.marginal):
            zj = z[:, j]
            # upper tail through isf keeps precision when Phi(z) is near 1
            cols.append(np.where(zj > 0, dist.isf(ndtr(-zj)), dist.ppf(ndtr(zj))))
        return np.column_stack(cols)

    def from_gaussian(self, z):
        """Map normal scores ``z`` (so ``u = Phi(z)``) to the marginal."""
        z = as_rows(z, self.dim)
        if self.kind == "gaussian-linear":
            return self.mean + z @ self.scale.T
        if self.kind == "elliptical-linear":
            return self.marginal.from_gaussian(z)
        return self._quantile_from_normal(z)

    def to_gaussian(self, x):
        x = as_rows(x, self.dim)
        if self.kind == "gaussian-linear":
            return (x - self.mean) @ self._inv.T
        if self.kind == "elliptical-linear":
            return self.marginal.base_to_normal(self.marginal.to_base(x))
        return ndtri(self.inverse(x))

    def vjp_from_gaussian(self, z, g):
        """Pull a gradient ``g`` w.r.t. ``x = from_gaussian(z)`` back to ``z``."""
        z = as_rows(z, self.dim)
        g = as_rows(g, self.dim)
        if self.kind == "gaussian-linear":
            return g @ self.scale
        if self.kind == "elliptical-linear":
            m = self.marginal
            y = m.base_from_normal(z)
            dy = np.exp(_norm_logpdf(z) - m.base_logpdf(y))
            return (g @ self.scale) * dy
        x = self._quantile_from_normal(z)
        dens = np.column_stack([dist.pdf(x[:, j]) for j, dist in enumerate(self.marginal)])
        return g * np.exp(_norm_logpdf(z)) / dens

    # -- density -------------------------------------------------------------
    def logpdf(self, x):
        x = as_rows(x, self.dim)
        if self.kind == "gaussian-linear":
            return self.marginal.logpdf(x)
        if self.kind == "elliptical-linear":
            return self.marginal.logpdf(x)
        return sum(dist.logpdf(x[:, j]) for j, dist in enumerate(self.marginal))

    def grad_logpdf(self, x):
        if self.kind == "product-quantile":
            raise NotImplementedError("product-quantile transports provide no density gradient")
        return self.marginal.grad_logpdf(x)

    def sample(self, rng, n):
        rng = make_rng(rng)
        return self.from_gaussian(rng.standard_normal((n, self.dim)))


def as_transport(q, root="symmetric"):
    """Wrap a distribution in the matching transport (transports pass through)."""
    if isinstance(q, MarginalTransport):
        return q
    if isinstance(q, GaussianDist):
        return MarginalTransport("gaussian-linear", q, root=root)
    if isinstance(q, LinearEllipticalDist):
        return MarginalTransport("elliptical-linear", q)
    if isinstance(q, (list, tuple)):
        return MarginalTransport("product-quantile", q)
    if hasattr(q, "from_gaussian") and hasattr(q, "logpdf"):
        return q
    raise TypeError(f"cannot build a transport from {type(q).__name__}")
