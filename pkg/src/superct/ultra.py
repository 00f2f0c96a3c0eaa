"""Union of learned sparsifying transforms: coding, clustering and learning."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.linalg

from .patch import PatchConfig, extract_patches

log = logging.getLogger(__name__)


@dataclass
class TransformUnion:
    transforms: np.ndarray  # (K, l, l)
    gamma: float

    def __post_init__(self):
        self.transforms = np.asarray(self.transforms, dtype=np.float64)
        if self.transforms.ndim != 3 or self.transforms.shape[1] != self.transforms.shape[2]:
            raise ValueError("transforms must have shape (K, l, l)")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")

    @property
    def n_clusters(self) -> int:
        return self.transforms.shape[0]

    @property
    def patch_length(self) -> int:
        return self.transforms.shape[1]

    def with_gamma(self, gamma: float) -> "TransformUnion":
        return TransformUnion(self.transforms, gamma)

    def spectral_norms_sq(self) -> np.ndarray:
        """Largest eigenvalue of Omega_k^T Omega_k for each k."""
        return np.array([np.linalg.norm(t, 2) ** 2 for t in self.transforms])


@dataclass
class SparseCodeResult:
    labels: np.ndarray  # (J,) cluster index, 0-based
    codes: np.ndarray  # (l, J)
    costs: np.ndarray  # (J,) per-patch ||Omega p - z||^2 + gamma^2 ||z||_0

    @property
    def total(self) -> float:
        return float(self.costs.sum())


def hard_threshold(v, gamma: float) -> np.ndarray:
    """Minimizer of ||v - z||^2 + gamma^2 ||z||_0; ties at |v| == gamma go to zero."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    v = np.asarray(v, dtype=np.float64)
    return np.where(np.abs(v) > gamma, v, 0.0)


def code_cost(v: np.ndarray, z: np.ndarray, gamma: float) -> np.ndarray:
    return np.sum((v - z) ** 2, axis=0) + gamma**2 * np.count_nonzero(z, axis=0)


def _all_costs(patches, transforms, gamma):
    costs = np.empty((transforms.shape[0], patches.shape[1]))
    for k, omega in enumerate(transforms):
        v = omega @ patches
        costs[k] = code_cost(v, hard_threshold(v, gamma), gamma)
    return costs


def _assign(patches, transforms, gamma, labels):
    codes = np.empty_like(patches)
    costs = np.empty(patches.shape[1])
    for k, omega in enumerate(transforms):
        sel = labels == k
        if not sel.any():
            continue
        v = omega @ patches[:, sel]
        z = hard_threshold(v, gamma)
        codes[:, sel] = z
        costs[sel] = code_cost(v, z, gamma)
    return codes, costs


def cluster_and_code(patches, tu: TransformUnion) -> SparseCodeResult:
    """Jointly optimal cluster index and sparse code for every patch column.

    Ties between clusters go to the lowest index (``argmin`` semantics).
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] != tu.patch_length:
        raise ValueError(f"patch length {patches.shape[0]} != transform size {tu.patch_length}")
    # codes come from the same products the costs were ranked on, so the
    # returned costs are bitwise the ones the argmin saw
    vs = [omega @ patches for omega in tu.transforms]
    zs = [hard_threshold(v, tu.gamma) for v in vs]
    all_costs = np.stack([code_cost(v, z, tu.gamma) for v, z in zip(vs, zs)])
    labels = np.argmin(all_costs, axis=0)
    codes = np.empty_like(patches)
    for k, z in enumerate(zs):
        sel = labels == k
        codes[:, sel] = z[:, sel]
    costs = all_costs[labels, np.arange(patches.shape[1])]
    return SparseCodeResult(labels, codes, costs)


def ultra_regularizer_value(img, tu: TransformUnion, cfg: PatchConfig):
    """Value of the union-of-transforms penalty at its optimal clusters and codes."""
    res = cluster_and_code(extract_patches(img, cfg), tu)
    return res.total, res


# ---------------------------------------------------------------- learning

def dct_transform(side: int) -> np.ndarray:
    c = scipy.fft.dct(np.eye(side), norm="ortho", axis=0)
    return np.kron(c, c)


def initial_transforms(side: int, n_clusters: int, seed: int = 0, spread: float = 0.5) -> np.ndarray:
    """2D DCT for the first cluster, randomly rotated DCTs for the others.

    ``spread`` is the Frobenius norm of the skew generator of each rotation.
    """
    rng = np.random.default_rng(seed)
    base = dct_transform(side)
    out = [base]
    n = side * side
    for _ in range(n_clusters - 1):
        g = rng.standard_normal((n, n))
        skew = g - g.T
        rot = scipy.linalg.expm(spread * skew / np.linalg.norm(skew))
        out.append(base @ rot)
    return np.stack(out)


def transform_penalty(omega: np.ndarray) -> float:
    """||Omega||_F^2 - log|det Omega|."""
    sign, logdet = np.linalg.slogdet(omega)
    if sign == 0:
        return np.inf
    return float(np.sum(omega**2) - logdet)


def update_transform(y: np.ndarray, z: np.ndarray, lam: float) -> np.ndarray:
    """Closed-form minimizer of ||Omega Y - Z||_F^2 + lam (||Omega||_F^2 - log|det Omega|)."""
    l = y.shape[0]
    chol = np.linalg.cholesky(y @ y.T + lam * np.eye(l))
    linv = scipy.linalg.solve_triangular(chol, np.eye(l), lower=True)
    u, s, vt = np.linalg.svd(linv @ y @ z.T)
    return 0.5 * (vt.T * (s + np.sqrt(s**2 + 2 * lam))) @ u.T @ linv


def _learning_costs(patches, energy, transforms, gamma, lambda0):
    pen = np.array([transform_penalty(t) for t in transforms])
    return _all_costs(patches, transforms, gamma) + lambda0 * pen[:, None] * energy[None, :]


def learning_objective(patches, transforms, gamma, labels, lambda0) -> float:
    energy = np.sum(patches**2, axis=0)
    _, costs = _assign(patches, transforms, gamma, labels)
    pen = np.array([transform_penalty(t) for t in transforms])
    return float(costs.sum() + lambda0 * np.sum(pen[labels] * energy))


def learn_transforms(patches, n_clusters: int = 5, gamma: float = 20.0, iterations: int = 20,
                     lambda0: float = 0.01, seed: int = 0, init=None):
    """Alternating union-of-transforms learning.

    Minimizes, over transforms, clusters and codes,
    ``sum_j ||Omega_kj y_j - z_j||^2 + gamma^2 ||z_j||_0 + lambda_k Q(Omega_k)``
    with ``lambda_k = lambda0 * ||Y_k||_F^2``.  Because ``lambda_k`` is a sum
    over member patches, the clustering step charges each patch its share of
    ``Q`` so that every step is an exact block minimization.

    Returns ``(TransformUnion, objective_trace)``; the trace holds the value
    after every clustering and every transform-update step.
    """
    patches = np.asarray(patches, dtype=np.float64)
    l, n = patches.shape
    side = int(round(np.sqrt(l)))
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n < l:
        raise ValueError(f"need at least {l} patches, got {n}")
    transforms = np.array(init, dtype=np.float64) if init is not None else (
        initial_transforms(side, n_clusters, seed))
    energy = np.sum(patches**2, axis=0)
    trace = []
    labels = None
    for it in range(iterations):
        labels = np.argmin(_learning_costs(patches, energy, transforms, gamma, lambda0), axis=0)
        codes, _ = _assign(patches, transforms, gamma, labels)
        trace.append(learning_objective(patches, transforms, gamma, labels, lambda0))
        for k in range(n_clusters):
            sel = labels == k
            if not sel.any():
                log.info("iteration %d: cluster %d empty, transform kept", it, k)
                continue
            lam = lambda0 * float(energy[sel].sum())
            if lam == 0.0:
                # all-zero patches: the objective does not depend on this transform
                log.info("iteration %d: cluster %d has only zero patches, transform kept", it, k)
                continue
            transforms[k] = update_transform(patches[:, sel], codes[:, sel], lam)
        trace.append(learning_objective(patches, transforms, gamma, labels, lambda0))
    return TransformUnion(transforms, gamma), trace
