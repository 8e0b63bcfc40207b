"""Couplings: joint laws on the cube pair with uniform marginals.

All couplings are sampled through normal scores.  ``sample_normal_pair``
returns ``(z1, z2)`` with each ``z_i ~ N(0, I)`` marginally; the uniform pair
is ``(Phi(z1), Phi(z2))``.

Variants
--------
SignCoupling
    ``z2 = s * z1`` for a fixed sign mask ``s``.  All ``+1`` is the common
    random numbers (CRN) coupling, all ``-1`` the antithetic one.
IndependentCoupling
    ``z2`` drawn independently of ``z1``.
GaussianCoupling
    ``z2 = S z1 + M w`` with ``S = U diag(sigma) V^T`` and
    ``M = U diag(sqrt(1 - sigma^2))``, so that ``(z1, z2)`` is jointly normal
    with cross-covariance ``S^T`` and unit marginals.
MixtureCoupling
    Stratified mixture of any of the above.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm, expm_frechet
from scipy.special import logsumexp, ndtr

from ._util import as_rows, make_rng


def orthogonal_from_skew(A):
    """Rotation ``expm(A - A^T)`` generated by the strictly lower part of ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("generator must be square")
    L = np.tril(A, -1)
    return expm(L - L.T)


def skew_generator_grad(A, grad_Q):
    """Gradient w.r.t. the strictly lower part of ``A`` given ``dL/dQ``.

    Uses the adjoint of the Frechet derivative of ``expm``:
    ``<G, L(K, E)> = <L(K^T, G), E>``.
    """
    L = np.tril(np.asarray(A, dtype=float), -1)
    K = L - L.T
    _, gK = expm_frechet(K.T, grad_Q)
    return np.tril(gK - gK.T, -1)


def n_params(d):
    return d * (d - 1) + d


@dataclass(frozen=True)
class GaussianCouplingParams:
    """Unconstrained coupling parameters.

    ``A_u``/``A_v`` are read through their strictly lower triangles and
    ``v`` maps to singular values ``tanh(v)``.
    """

    A_u: np.ndarray
    A_v: np.ndarray
    v: np.ndarray

    @property
    def d(self):
        return self.v.size

    @classmethod
    def identity(cls, d, v=0.0):
        return cls(np.zeros((d, d)), np.zeros((d, d)), np.full(d, float(v)))

    def to_vector(self):
        il = np.tril_indices(self.d, -1)
        return np.concatenate([self.A_u[il], self.A_v[il], self.v])

    @classmethod
    def from_vector(cls, theta, d):
        theta = np.asarray(theta, dtype=float)
        if theta.size != n_params(d):
            raise ValueError(f"expected {n_params(d)} parameters for d={d}, got {theta.size}")
        il = np.tril_indices(d, -1)
        k = il[0].size
        A_u = np.zeros((d, d))
        A_v = np.zeros((d, d))
        A_u[il] = theta[:k]
        A_v[il] = theta[k:2 * k]
        return cls(A_u, A_v, theta[2 * k:].copy())


class Coupling:
    """Base class; subclasses implement :meth:`sample_normal_pair`."""

    variant = "base"
    d = 0
    has_density = False

    def sample_normal_pair(self, rng, n):
        raise NotImplementedError

    def sample_pair(self, rng, n):
        """Draw ``n`` uniform pairs ``(U1, U2)``, each of shape ``(n, d)``."""
        if n < 1:
            raise ValueError("n must be at least 1")
        z1, z2 = self.sample_normal_pair(make_rng(rng), n)
        return ndtr(z1), ndtr(z2)

    def log_density_normal(self, z1, z2):
        raise ValueError(f"singular coupling has no density ({self.variant})")

    def log_density(self, u1, u2):
        """Log copula density ``log c(u1, u2)`` on the open cube pair."""
        from scipy.special import ndtri

        u1 = as_rows(u1, self.d)
        u2 = as_rows(u2, self.d)
        if np.any((u1 <= 0) | (u1 >= 1) | (u2 <= 0) | (u2 >= 1)):
            raise ValueError("log_density needs u strictly inside (0, 1)")
        return self.log_density_normal(ndtri(u1), ndtri(u2))

    def to_dict(self):
        raise NotImplementedError

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


class SignCoupling(Coupling):
    """Deterministic coupling ``z2 = signs * z1`` (CRN, antithetic or mixed)."""

    def __init__(self, signs):
        signs = np.atleast_1d(np.asarray(signs, dtype=float))
        if not np.all(np.isin(signs, (-1.0, 1.0))):
            raise ValueError("sign mask entries must be +1 or -1")
        self.signs = signs
        self.d = signs.size
        if np.all(signs > 0):
            self.variant = "crn"
        elif np.all(signs < 0):
            self.variant = "antithetic"
        else:
            self.variant = "sign-mask"

    def __repr__(self):
        return f"SignCoupling({self.signs.astype(int).tolist()})"

    def sample_normal_pair(self, rng, n):
        z1 = rng.standard_normal((n, self.d))
        if self.variant == "crn":
            return z1, z1.copy()
        if self.variant == "antithetic":
            return z1, -z1
        return z1, z1 * self.signs

    def to_dict(self):
        return {"variant": self.variant, "d": self.d, "signs": self.signs.astype(int).tolist()}


def crn(d):
    return SignCoupling(np.ones(d))


def antithetic(d):
    return SignCoupling(-np.ones(d))


class IndependentCoupling(Coupling):
    variant = "independent"
    has_density = True

    def __init__(self, d):
        self.d = int(d)

    def __repr__(self):
        return f"IndependentCoupling(d={self.d})"

    def sample_normal_pair(self, rng, n):
        z = rng.standard_normal((n, 2 * self.d))
        return z[:, :self.d], z[:, self.d:]

    def log_density_normal(self, z1, z2):
        return np.zeros(as_rows(z1, self.d).shape[0])

    def to_dict(self):
        return {"variant": "independent", "d": self.d}


class GaussianCoupling(Coupling):
    """Gaussian copula with cross matrix ``S = U diag(sigma) V^T``.

    Build from unconstrained parameters with :meth:`from_params` or from a
    matrix with :meth:`from_matrix`.  Singular values of magnitude one are
    allowed (the coupling is then deterministic along those directions, and
    has no density).
    """

    variant = "gaussian"

    def __init__(self, U, sigma, V, params=None):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        d = sigma.size
        if U.shape != (d, d) or V.shape != (d, d):
            raise ValueError("U, V must be d x d with d = len(sigma)")
        eye = np.eye(d)
        if np.abs(U.T @ U - eye).max() > 1e-10 or np.abs(V.T @ V - eye).max() > 1e-10:
            raise ValueError("U and V must be orthogonal")
        if np.any(np.abs(sigma) > 1.0 + 1e-12):
            raise ValueError("I - S S^T is not positive semidefinite (singular value above 1)")
        self.U, self.V = U, V
        self.sigma = np.clip(sigma, -1.0, 1.0)
        self.d = d
        self.params = params
        if params is not None:
            # sech(v) is accurate where 1 - tanh(v)^2 would round to 0
            self.resid = 1.0 / np.cosh(params.v)
        else:
            self.resid = np.sqrt(np.clip(1.0 - self.sigma**2, 0.0, None))
        self.has_density = bool(np.all(self.resid > 0))

    @classmethod
    def from_params(cls, params):
        U = orthogonal_from_skew(params.A_u)
        V = orthogonal_from_skew(params.A_v)
        return cls(U, np.tanh(params.v), V, params=params)

    @classmethod
    def from_matrix(cls, S):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        U, s, Vt = np.linalg.svd(S)
        return cls(U, s, Vt.T)

    @property
    def S(self):
        return (self.U * self.sigma) @ self.V.T

    def __repr__(self):
        return f"GaussianCoupling(sigma={self.sigma.tolist()})"

    def sample_normal_pair(self, rng, n):
        z1 = rng.standard_normal((n, self.d))
        w = rng.standard_normal((n, self.d))
        return z1, self.transform(z1, w)

    def transform(self, z1, w):
        """``z2 = U (sigma * V^T z1 + resid * w)`` for row batches."""
        a = z1 @ self.V
        return (self.sigma * a + self.resid * w) @ self.U.T

    def log_density_normal(self, z1, z2):
        if not self.has_density:
            raise ValueError("singular coupling has no density (|sigma| = 1 in some direction)")
        z1 = as_rows(z1, self.d)
        z2 = as_rows(z2, self.d)
        a = z1 @ self.V
        b = z2 @ self.U
        r = b - self.sigma * a
        s = self.resid
        return (-np.log(s).sum() - 0.5 * ((r / s) ** 2).sum(axis=1)
                + 0.5 * (b * b).sum(axis=1))

    def to_dict(self):
        out = {"variant": "gaussian", "d": self.d, "U": self.U.tolist(),
               "sigma": self.sigma.tolist(), "V": self.V.tolist()}
        if self.params is not None:
            out.update(A_u=self.params.A_u.tolist(), A_v=self.params.A_v.tolist(),
                       v=self.params.v.tolist())
        return out


def stratified_counts(weights, n):
    """Deterministic allocation of ``n`` rows by largest remainder."""
    raw = np.asarray(weights) * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


class MixtureCoupling(Coupling):
    """Finite mixture of couplings with stratified component allocation."""

    variant = "mixture"

    def __init__(self, weights, components):
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1 or weights.size != len(components) or weights.size == 0:
            raise ValueError("need one weight per component")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to one")
        dims = {c.d for c in components}
        if len(dims) != 1:
            raise ValueError("mixture components have different dimensions")
        self.weights = weights
        self.components = list(components)
        self.d = dims.pop()
        self.has_density = all(c.has_density for c in components)

    def __repr__(self):
        return f"MixtureCoupling(weights={self.weights.tolist()}, components={self.components})"

    def sample_normal_pair(self, rng, n):
        parts = [c.sample_normal_pair(rng, k)
                 for c, k in zip(self.components, stratified_counts(self.weights, n)) if k > 0]
        return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))

    def log_density_normal(self, z1, z2):
        if not self.has_density:
            raise ValueError("singular coupling has no density (mixture has a singular component)")
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        terms = np.stack([lw + c.log_density_normal(z1, z2)
                          for lw, c in zip(logw, self.components)])
        return logsumexp(terms, axis=0)

    def to_dict(self):
        return {"variant": "mixture", "d": self.d, "weights": self.weights.tolist(),
                "components": [c.to_dict() for c in self.components]}


def coupling_from_dict(doc):
    """Inverse of ``Coupling.to_dict``."""
    variant = doc.get("variant")
    d = int(doc["d"])
    if variant == "crn":
        return crn(d)
    if variant == "antithetic":
        return antithetic(d)
    if variant == "sign-mask":
        return SignCoupling(doc["signs"])
    if variant == "independent":
        return IndependentCoupling(d)
    if variant == "gaussian":
        if "v" in doc:
            params = GaussianCouplingParams(np.array(doc["A_u"], dtype=float),
                                            np.array(doc["A_v"], dtype=float),
                                            np.array(doc["v"], dtype=float))
            return GaussianCoupling.from_params(params)
        return GaussianCoupling(doc["U"], doc["sigma"], doc["V"])
    if variant == "mixture":
        return MixtureCoupling(doc["weights"], [coupling_from_dict(c) for c in doc["components"]])
    raise ValueError(f"unknown coupling variant {variant!r}")


def coupling_from_json(text):
    return coupling_from_dict(json.loads(text))
