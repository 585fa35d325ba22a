"""Representational dissimilarity analysis and layer-importance fitting.

Reference RDMs are built from every tap of the clean patches, candidate RDMs
from a single tap of the patches degraded at one CRF. A non-negative linear
combination of candidates is fitted to the reference by minimising cosine
distance between strict-upper-triangle vectorisations; averaging the fitted
coefficients over CRF levels ranks the taps.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.distance import pdist, squareform

from .errors import (
    DegenerateTarget,
    DimensionMismatch,
    IncompleteGrid,
    KTooLarge,
    LabelMismatch,
    NonConvergence,
    TooFewPatches,
    ZeroVector,
)

log = logging.getLogger(__name__)

RDM_MAGIC = b"RDM1"
_CHUNK = 1 << 16

Cell = tuple[int, int]  # (crf, layer)


@dataclass
class RDM:
    labels: tuple[str, ...]
    matrix: np.ndarray
    kind: str = "reference"  # "reference" or "degraded"
    crf: int | None = None
    layer: int | None = None

    @property
    def n(self) -> int:
        return len(self.labels)

    def check(self, atol: float = 0.0) -> None:
        m = self.matrix
        if m.shape != (self.n, self.n):
            raise DimensionMismatch(f"matrix {m.shape} vs {self.n} labels")
        if not np.array_equal(m, m.T):
            raise ValueError("RDM is not symmetric")
        if np.any(np.diag(m) != 0):
            raise ValueError("RDM diagonal is not zero")
        if np.any(m < -atol):
            raise ValueError("RDM has negative entries")


def squared_distances(vectors: np.ndarray) -> np.ndarray:
    """Condensed squared euclidean distances, accumulated over column chunks in float64."""
    n, d = vectors.shape
    acc = np.zeros(n * (n - 1) // 2)
    for start in range(0, d, _CHUNK):
        acc += pdist(np.asarray(vectors[:, start:start + _CHUNK], dtype=np.float64), "sqeuclidean")
    return acc


def _stack(features: Mapping[str, np.ndarray], labels: Sequence[str]) -> np.ndarray:
    if len(labels) < 2:
        raise TooFewPatches(f"need at least 2 patches, got {len(labels)}")
    missing = [lab for lab in labels if lab not in features]
    if missing:
        raise LabelMismatch(f"no features for {missing[:5]}")
    vecs = [np.asarray(features[lab]).reshape(-1) for lab in labels]
    sizes = {v.size for v in vecs}
    if len(sizes) != 1:
        raise DimensionMismatch(f"feature vectors differ in length: {sorted(sizes)}")
    return np.stack(vecs)


def _from_condensed(sq: np.ndarray) -> np.ndarray:
    m = squareform(np.sqrt(np.maximum(sq, 0.0)), checks=False)
    np.fill_diagonal(m, 0.0)
    return m


def compute_rdm(features: Mapping[str, np.ndarray], labels: Sequence[str], *, kind="reference", crf=None, layer=None) -> RDM:
    """Euclidean-distance RDM over flattened feature vectors."""
    stacked = _stack(features, labels)
    return RDM(tuple(labels), _from_condensed(squared_distances(stacked)), kind=kind, crf=crf, layer=layer)


def compute_rdm_multi(per_layer: Iterable[Mapping[str, np.ndarray]], labels: Sequence[str], **meta) -> RDM:
    """RDM over the concatenation of several feature maps, without materialising it."""
    sq = None
    for features in per_layer:
        part = squared_distances(_stack(features, labels))
        sq = part if sq is None else sq + part
    if sq is None:
        raise DimensionMismatch("no feature layers given")
    return RDM(tuple(labels), _from_condensed(sq), **meta)


def vectorize_rdm(rdm: RDM) -> np.ndarray:
    """Strict upper triangle, row-major."""
    iu = np.triu_indices(rdm.n, k=1)
    return np.asarray(rdm.matrix, dtype=np.float64)[iu]


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


@dataclass
class FitOptions:
    mode: str = "joint"  # "joint": one fit over the (crf, layer) grid; "per_crf": one fit per CRF
    max_iter: int = 500
    gtol: float = 1e-8
    ftol: float = 1e-15
    raise_on_nonconvergence: bool = False


@dataclass
class LayerWeights:
    crfs: list[int]
    layers: list[int]
    beta: dict[Cell, float]
    importance: dict[int, float]
    residual: float
    initial_residual: float
    converged: bool
    iterations: int
    options: FitOptions = field(default_factory=FitOptions)
    residual_per_crf: dict[int, float] = field(default_factory=dict)
    excluded: list[Cell] = field(default_factory=list)

    def beta_grid(self) -> np.ndarray:
        """Array of shape (len(crfs), len(layers))."""
        return np.array([[self.beta[(c, z)] for z in self.layers] for c in self.crfs])


def _cosine_objective(coeffs: np.ndarray, basis: np.ndarray, target_unit: np.ndarray):
    """Cosine distance between basis @ coeffs and a unit-norm target, with its gradient."""
    a = basis @ coeffs
    na = np.linalg.norm(a)
    if na == 0:
        return 1.0, np.zeros_like(coeffs)
    dot = float(a @ target_unit)
    value = 1.0 - dot / na
    grad_a = -(target_unit / na - dot * a / na**3)
    return value, basis.T @ grad_a


def _fit_block(target: np.ndarray, columns: np.ndarray, opts: FitOptions):
    """Minimise cosine distance over non-negative coefficients of `columns` (P x K)."""
    k = columns.shape[1]
    norms = np.linalg.norm(columns, axis=0)
    # unit-norm columns condition the problem; coefficients are mapped back afterwards
    basis = columns / norms
    target_unit = target / np.linalg.norm(target)
    beta0 = np.full(k, 1.0 / k)
    x0 = beta0 * norms
    f0, _ = _cosine_objective(x0, basis, target_unit)
    res = minimize(
        _cosine_objective,
        x0,
        args=(basis, target_unit),
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None)] * k,
        options={"maxiter": opts.max_iter, "gtol": opts.gtol, "ftol": opts.ftol, "maxcor": 20},
    )
    x = np.maximum(res.x, 0.0)
    f, g = _cosine_objective(x, basis, target_unit)
    if f > f0:
        x, f = x0, f0
    # projected gradient: components pushing against an active bound do not count
    pg = np.where((x <= 0) & (g > 0), 0.0, g)
    converged = not (res.nit >= opts.max_iter and np.max(np.abs(pg)) > opts.gtol)
    return x / norms, float(f), float(f0), converged, int(res.nit)


def fit_weights(target: RDM, candidates: Mapping[Cell, RDM], options: FitOptions | None = None) -> LayerWeights:
    """Fit non-negative coefficients for every (crf, layer) candidate RDM.

    The cosine objective is invariant to positive rescaling of the
    coefficients, so ``beta`` is only meaningful up to scale; the rankings
    derived from it are not.
    """
    opts = options or FitOptions()
    if not candidates:
        raise ValueError("at least one candidate RDM is required")
    for cell, rdm in candidates.items():
        if rdm.labels != target.labels:
            raise LabelMismatch(f"candidate {cell} labels differ from the target's")
    t = vectorize_rdm(target)
    if not np.any(t):
        raise DegenerateTarget("target RDM is all zero")

    cells = sorted(candidates)
    crfs = sorted({c for c, _ in cells})
    layers = sorted({z for _, z in cells})
    vecs = {cell: vectorize_rdm(candidates[cell]) for cell in cells}
    excluded = [cell for cell in cells if not np.any(vecs[cell])]
    for cell in excluded:
        warnings.warn(f"candidate RDM {cell} is all zero; excluded from the fit", RuntimeWarning, stacklevel=2)

    beta = {cell: 0.0 for cell in cells}
    if opts.mode == "joint":
        groups = [[cell for cell in cells if cell not in excluded]]
    elif opts.mode == "per_crf":
        groups = [[cell for cell in cells if cell[0] == c and cell not in excluded] for c in crfs]
    else:
        raise ValueError(f"unknown fit mode {opts.mode!r}")

    residuals, initials, per_crf = [], [], {}
    converged, iterations = True, 0
    for group in groups:
        if not group:
            continue
        cols = np.stack([vecs[cell] for cell in group], axis=1)
        b, f, f0, ok, nit = _fit_block(t, cols, opts)
        for cell, value in zip(group, b):
            beta[cell] = float(value)
        residuals.append(f)
        initials.append(f0)
        converged &= ok
        iterations += nit
        if opts.mode == "per_crf":
            per_crf[group[0][0]] = f
    if not residuals:
        raise DegenerateTarget("every candidate RDM is all zero")
    if not converged:
        msg = f"fit stopped at max_iter={opts.max_iter} with projected gradient above {opts.gtol}"
        if opts.raise_on_nonconvergence:
            raise NonConvergence(msg)
        log.warning(msg)

    weights = LayerWeights(
        crfs=crfs,
        layers=layers,
        beta=beta,
        importance={},
        residual=float(np.mean(residuals)),
        initial_residual=float(np.mean(initials)),
        converged=converged,
        iterations=iterations,
        options=opts,
        residual_per_crf=per_crf,
        excluded=excluded,
    )
    weights.importance = average_importance(weights)
    return weights


def average_importance(weights: LayerWeights) -> dict[int, float]:
    """Mean of the fitted coefficients over CRF levels, per layer."""
    missing = [(c, z) for c in weights.crfs for z in weights.layers if (c, z) not in weights.beta]
    if missing:
        raise IncompleteGrid(f"beta grid is missing cells {missing}")
    n = len(weights.crfs)
    return {z: sum(weights.beta[(c, z)] for c in weights.crfs) / n for z in weights.layers}


@dataclass(frozen=True)
class SelectionResult:
    ranked_layers: tuple[int, ...]
    selected: tuple[int, ...]


def select_top_layers(importance: Mapping[int, float], k: int) -> SelectionResult:
    """Rank layers by descending importance, ties broken by lower index."""
    if k > len(importance):
        raise KTooLarge(f"k={k} exceeds the {len(importance)} available layers")
    if k < 0:
        raise ValueError("k must be non-negative")
    ranked = tuple(sorted(importance, key=lambda z: (-importance[z], z)))
    return SelectionResult(ranked_layers=ranked, selected=ranked[:k])


# --- file formats -----------------------------------------------------------

def save_rdm(path: str | Path, rdm: RDM) -> None:
    """Header (magic, N, labels, provenance) followed by row-major <f4 entries."""
    with open(path, "wb") as fh:
        fh.write(RDM_MAGIC)
        fh.write(struct.pack("<I", rdm.n))
        for lab in rdm.labels:
            raw = lab.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        kind = 0 if rdm.kind == "reference" else 1
        fh.write(struct.pack("<Bii", kind, -1 if rdm.crf is None else rdm.crf, -1 if rdm.layer is None else rdm.layer))
        fh.write(np.ascontiguousarray(rdm.matrix, dtype="<f4").tobytes())


def load_rdm(path: str | Path) -> RDM:
    with open(path, "rb") as fh:
        if fh.read(4) != RDM_MAGIC:
            raise ValueError(f"{path} is not an RDM file")
        (n,) = struct.unpack("<I", fh.read(4))
        labels = []
        for _ in range(n):
            (length,) = struct.unpack("<I", fh.read(4))
            labels.append(fh.read(length).decode("utf-8"))
        kind, crf, layer = struct.unpack("<Bii", fh.read(9))
        matrix = np.frombuffer(fh.read(4 * n * n), dtype="<f4").reshape(n, n).astype(np.float64)
    return RDM(
        tuple(labels),
        matrix,
        kind="reference" if kind == 0 else "degraded",
        crf=None if crf < 0 else crf,
        layer=None if layer < 0 else layer,
    )


def weights_to_dict(weights: LayerWeights, selection: SelectionResult | None = None) -> dict:
    doc = {
        "crfs": weights.crfs,
        "layers": weights.layers,
        "beta": [{"crf": c, "layer": z, "beta": weights.beta[(c, z)]} for c in weights.crfs for z in weights.layers],
        "importance": {str(z): weights.importance[z] for z in weights.layers},
        "residual": weights.residual,
        "initial_residual": weights.initial_residual,
        "converged": weights.converged,
        "iterations": weights.iterations,
        "residual_per_crf": {str(c): r for c, r in sorted(weights.residual_per_crf.items())},
        "excluded": [list(cell) for cell in weights.excluded],
        "options": asdict(weights.options),
    }
    if selection is not None:
        doc["ranked_layers"] = list(selection.ranked_layers)
        doc["selected"] = list(selection.selected)
    return doc


def save_layer_weights(path: str | Path, weights: LayerWeights, selection: SelectionResult | None = None) -> None:
    text = json.dumps(weights_to_dict(weights, selection), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_layer_weights(path: str | Path) -> tuple[LayerWeights, SelectionResult | None]:
    doc = json.loads(Path(path).read_text())
    weights = LayerWeights(
        crfs=list(doc["crfs"]),
        layers=list(doc["layers"]),
        beta={(e["crf"], e["layer"]): e["beta"] for e in doc["beta"]},
        importance={int(z): v for z, v in doc["importance"].items()},
        residual=doc["residual"],
        initial_residual=doc["initial_residual"],
        converged=doc["converged"],
        iterations=doc["iterations"],
        options=FitOptions(**doc["options"]),
        residual_per_crf={int(c): r for c, r in doc["residual_per_crf"].items()},
        excluded=[tuple(cell) for cell in doc["excluded"]],
    )
    selection = None
    if "selected" in doc:
        selection = SelectionResult(tuple(doc["ranked_layers"]), tuple(doc["selected"]))
    return weights, selection
