"""Empirical prior estimation from a labelled single-cell reference.

The per-gene prior mean is the per-type average. The cross-type covariance is
estimated from pseudo-replicate means: each replicate takes a random half of
the cells of every type, drawn over *aligned cell positions* (position k of
type c is paired with position k of the other types, up to the smallest type
size). When the reference carries donor structure in its cell ordering this
captures genuine cross-type covariance; for unaligned references it degrades
gracefully to a near-diagonal estimate. The replicate-mean covariance is
rescaled by the half-sampling factor so its scale matches the underlying
per-replicate variance rather than the variance of a mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .types import GenePrior, _check_unique, _freeze

N_PSEUDO_REPLICATES = 20
DEFAULT_SHRINKAGE = 0.5
_NOISE_FLOOR = 1e-6


@dataclass(frozen=True)
class ReferenceDataset:
    """Single-cell reference: genes x cells log-expression with type labels."""

    genes: list[str]
    cells: list[str]
    cell_type_labels: list[str]
    values: np.ndarray

    def __post_init__(self):
        _check_unique(self.genes, "gene")
        _check_unique(self.cells, "cell")
        if len(self.cell_type_labels) != len(self.cells):
            raise ValidationError("one label per cell required")
        v = _freeze(self.values)
        if v.shape != (len(self.genes), len(self.cells)):
            raise ValidationError(f"values shape {v.shape} does not match axes")
        if not np.isfinite(v).all():
            raise ValidationError("reference contains non-finite values")
        object.__setattr__(self, "values", v)
        counts: dict[str, int] = {}
        for lab in self.cell_type_labels:
            counts[lab] = counts.get(lab, 0) + 1
        for lab, n in counts.items():
            if n < 2:
                raise ValidationError(f"cell type {lab!r} has fewer than 2 cells")

    @property
    def cell_types(self) -> list[str]:
        return sorted(set(self.cell_type_labels))

    def type_columns(self, cell_type: str) -> np.ndarray:
        idx = [i for i, lab in enumerate(self.cell_type_labels) if lab == cell_type]
        return np.array(idx, dtype=np.intp)


def signature_matrix(ref: ReferenceDataset) -> np.ndarray:
    """G x C matrix of per-type mean expression (column order = sorted types)."""
    cols = [ref.type_columns(c) for c in ref.cell_types]
    return np.column_stack([ref.values[:, idx].mean(axis=1) for idx in cols])


def estimate_priors(ref: ReferenceDataset, shrinkage: float = DEFAULT_SHRINKAGE,
                    seed: int = 0) -> list[GenePrior]:
    """Estimate a GenePrior for every gene in the reference.

    ``shrinkage`` in [0, 1] interpolates the covariance toward its diagonal;
    1 gives an exactly diagonal matrix (before regularization).
    """
    if not 0.0 <= shrinkage <= 1.0:
        raise ValidationError("shrinkage must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    types = ref.cell_types
    C = len(types)
    type_cols = [ref.type_columns(c) for c in types]
    n_aligned = min(len(idx) for idx in type_cols)
    half = n_aligned // 2
    if half < 1:
        raise ValidationError("each cell type needs at least 2 cells")

    # shared position subsets across types: one draw per replicate
    subsets = [rng.permutation(n_aligned)[:half] for _ in range(N_PSEUDO_REPLICATES)]
    # variance of a without-replacement half-mean relative to per-position variance
    rescale = 1.0 / (1.0 / half - 1.0 / n_aligned)

    mus = signature_matrix(ref)  # (G, C)
    G = len(ref.genes)

    # pooled within-type variance per gene (noise init)
    ss = np.zeros(G)
    dof = 0
    for c, idx in enumerate(type_cols):
        centered = ref.values[:, idx] - mus[:, [c]]
        ss += (centered ** 2).sum(axis=1)
        dof += len(idx) - 1
    noise_vars = np.maximum(ss / max(dof, 1), _NOISE_FLOOR)

    priors: list[GenePrior] = []
    for g in range(G):
        reps = np.empty((N_PSEUDO_REPLICATES, C))
        for r, sub in enumerate(subsets):
            for c, idx in enumerate(type_cols):
                reps[r, c] = ref.values[g, idx[sub]].mean()
        S = np.atleast_2d(np.cov(reps.T, ddof=1)) * rescale
        sigma = (1.0 - shrinkage) * S + shrinkage * np.diag(np.diag(S))
        sigma = _regularize_spd(sigma, np.trace(S))
        priors.append(GenePrior(gene=ref.genes[g], mu=mus[g].copy(), sigma=sigma,
                                noise_var=float(noise_vars[g])))
    return priors


def _regularize_spd(sigma: np.ndarray, trace_s: float) -> np.ndarray:
    """Add scaled identity jitter until the matrix is positive definite."""
    c = sigma.shape[0]
    eps = 1e-6 * trace_s / c if trace_s > 0 else 1e-8
    sigma = 0.5 * (sigma + sigma.T)
    jitter = eps
    for _ in range(60):
        trial = sigma + jitter * np.eye(c)
        if np.linalg.eigvalsh(trial).min() > 0:
            return trial
        jitter *= 2.0
    raise ValidationError("could not regularize covariance to positive definite")
