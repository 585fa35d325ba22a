"""Synthetic RDM-mixture instances shared by the fitting tests."""

import numpy as np
from scipy.optimize import nnls
from scipy.spatial.distance import squareform

from artifact.rdm import RDM, compute_rdm, vectorize_rdm

N_CRF, N_LAYER = 6, 7


def mixture_instance(seed: int, n: int = 30):
    """Target = known non-negative mixture of 42 candidate RDMs (6 CRFs x 7 layers)."""
    rng = np.random.default_rng(seed)
    labels = [f"p{i}" for i in range(n)]
    candidates = {}
    for c in range(N_CRF):
        for z in range(N_LAYER):
            d = int(rng.integers(4, 64))
            x = rng.normal(size=(n, d)) * rng.uniform(0.5, 5)
            candidates[(c, z)] = compute_rdm(dict(zip(labels, x)), labels, kind="degraded", crf=c, layer=z)
    cells = sorted(candidates)
    beta = rng.exponential(size=len(cells)) * (rng.random(len(cells)) < 0.5)
    basis = np.stack([vectorize_rdm(candidates[k]) for k in cells], axis=1)
    target = RDM(tuple(labels), squareform(basis @ beta))
    return target, candidates, dict(zip(cells, beta)), basis


def true_importance(beta_star):
    return {z: float(np.mean([beta_star[(c, z)] for c in range(N_CRF)])) for z in range(N_LAYER)}


def nnls_importance(target, basis, cells):
    """Brute-force non-negative least squares on the vectorised target."""
    coef, _ = nnls(basis, vectorize_rdm(target))
    found = dict(zip(cells, coef))
    return {z: float(np.mean([found[(c, z)] for c in range(N_CRF)])) for z in range(N_LAYER)}
