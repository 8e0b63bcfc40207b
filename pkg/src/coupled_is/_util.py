"""Small numerical helpers shared across modules."""

import numpy as np
from scipy.special import logsumexp


def as_rows(x, d=None):
    """Return ``x`` as a 2-D float array of shape (n, d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :] if d is None or x.shape[0] == d else x[:, None]
    if d is not None and x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got {x.shape[1]}")
    return x


def log_mean_exp(a):
    a = np.asarray(a, dtype=float)
    return logsumexp(a) - np.log(a.size)


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_seeds(seed, count):
    """Counter-based child seeds: child ``i`` depends only on (seed, i).

    ``seed`` may itself be a child ``SeedSequence``, giving nested splits.
    """
    if isinstance(seed, np.random.SeedSequence):
        entropy, key = seed.entropy, tuple(seed.spawn_key)
    else:
        entropy, key = seed, ()
    return [np.random.SeedSequence(entropy=entropy, spawn_key=key + (i,)) for i in range(count)]


def sym_psd_sqrt(mat):
    w, v = np.linalg.eigh(mat)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def check_spd(mat, name="matrix", max_cond=1e12):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square, got shape {mat.shape}")
    scale = max(np.abs(mat).max(), 1e-300)
    if np.abs(mat - mat.T).max() > 1e-12 * scale:
        raise ValueError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(mat)
    if w[0] <= 0:
        raise ValueError(f"{name} is not positive definite (min eigenvalue {w[0]:.3e})")
    if w[-1] / w[0] > max_cond:
        raise ValueError(f"{name} is degenerate (condition number {w[-1] / w[0]:.3e})")
    return 0.5 * (mat + mat.T)
