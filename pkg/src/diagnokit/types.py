"""Core domain types with validation.

All types are immutable after construction (arrays are marked read-only) and
safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

PROPORTION_TOL = 1e-8


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    a.flags.writeable = False
    return a


def _check_unique(ids: list[str], what: str) -> None:
    seen = set()
    for x in ids:
        if x in seen:
            raise ValidationError(f"duplicate {what} ID: {x!r}")
        seen.add(x)


@dataclass(frozen=True)
class BulkMatrix:
    """Observed bulk expression, genes x samples, log-scale normalized."""

    genes: list[str]
    samples: list[str]
    values: np.ndarray

    def __post_init__(self):
        if len(self.genes) < 1 or len(self.samples) < 1:
            raise ValidationError("BulkMatrix requires at least one gene and one sample")
        _check_unique(self.genes, "gene")
        _check_unique(self.samples, "sample")
        v = _freeze(self.values)
        if v.shape != (len(self.genes), len(self.samples)):
            raise ValidationError(
                f"values shape {v.shape} does not match {len(self.genes)}x{len(self.samples)}"
            )
        if not np.isfinite(v).all():
            raise ValidationError("BulkMatrix contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    @property
    def n_samples(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class CtsTensor:
    """Cell-type-specific expression with per-entry posterior mean and variance."""

    genes: list[str]
    cell_types: list[str]
    samples: list[str]
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        _check_unique(self.genes, "gene")
        _check_unique(self.cell_types, "cell type")
        _check_unique(self.samples, "sample")
        shape = (len(self.genes), len(self.cell_types), len(self.samples))
        m = _freeze(self.mean)
        v = _freeze(self.variance)
        if m.shape != shape or v.shape != shape:
            raise ValidationError(f"tensor shapes {m.shape}/{v.shape} do not match axes {shape}")
        if not (np.isfinite(m).all() and np.isfinite(v).all()):
            raise ValidationError("CtsTensor contains non-finite values")
        if (v < 0).any():
            raise ValidationError("CtsTensor variance must be non-negative")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variance", v)


@dataclass(frozen=True)
class GenePrior:
    """Per-gene Normal prior over the C-vector of cell-type expression."""

    gene: str
    mu: np.ndarray
    sigma: np.ndarray
    noise_var: float

    def __post_init__(self):
        mu = _freeze(self.mu)
        sigma = _freeze(self.sigma)
        c = mu.shape[0]
        if mu.ndim != 1 or sigma.shape != (c, c):
            raise ValidationError(f"prior shapes inconsistent for gene {self.gene!r}")
        if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
            raise ValidationError(f"non-finite prior for gene {self.gene!r}")
        if np.abs(sigma - sigma.T).max() > 1e-10:
            raise ValidationError(f"sigma not symmetric for gene {self.gene!r}")
        eigvals = np.linalg.eigvalsh(sigma)
        if eigvals.min() <= 0:
            raise ValidationError(
                f"sigma not positive definite for gene {self.gene!r} "
                f"(min eigenvalue {eigvals.min():g})"
            )
        if not self.noise_var > 0:
            raise ValidationError(f"noise_var must be positive for gene {self.gene!r}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def n_cell_types(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class SampleMeta:
    """Per-sample cell-type proportions plus covariate vectors.

    Proportions within ``PROPORTION_TOL`` of the simplex are renormalized;
    anything further off is rejected.
    """

    sample_id: str
    proportions: np.ndarray
    bulk_cov: np.ndarray
    cts_cov: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.proportions, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValidationError(f"proportions must be a non-empty vector ({self.sample_id!r})")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValidationError(f"proportions must be finite and non-negative ({self.sample_id!r})")
        total = w.sum()
        if abs(total - 1.0) > PROPORTION_TOL:
            raise ValidationError(
                f"proportions sum to {total:.10g}, outside simplex tolerance ({self.sample_id!r})"
            )
        object.__setattr__(self, "proportions", _freeze(w / total))
        for name in ("bulk_cov", "cts_cov"):
            v = _freeze(getattr(self, name))
            if v.ndim != 1 or not np.isfinite(v).all():
                raise ValidationError(f"{name} must be a finite vector ({self.sample_id!r})")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class AdjustmentParams:
    """Learned covariate-adjustment coefficients for one gene."""

    gamma: np.ndarray  # (d1,) bulk-covariate coefficients
    b: np.ndarray      # (C, d2) cell-type-specific covariate coefficients

    def __post_init__(self):
        g = _freeze(self.gamma)
        b = _freeze(self.b)
        if g.ndim != 1 or b.ndim != 2:
            raise ValidationError("gamma must be a vector and b a C x d2 matrix")
        if not (np.isfinite(g).all() and np.isfinite(b).all()):
            raise ValidationError("adjustment params must be finite")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class RefinementConfig:
    """MCMC and prior-refinement settings.

    ``nu`` may be None, in which case C + 2 is used at refinement time.
    """

    tau: float = 0.1
    nu: float | None = None
    rounds: int = 2
    chains: int = 4
    iters: int = 2000
    burnin: int | None = None
    rhat_threshold: float = 1.05

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValidationError("tau must be non-negative")
        if self.rounds < 1:
            raise ValidationError("rounds must be a positive integer")
        if self.chains < 2:
            raise ValidationError("chains must be >= 2")
        if self.iters < 1:
            raise ValidationError("iters must be positive")
        burnin = self.iters // 2 if self.burnin is None else self.burnin
        if not 0 <= burnin < self.iters:
            raise ValidationError("burnin must satisfy 0 <= burnin < iters")
        object.__setattr__(self, "burnin", burnin)
        if not self.rhat_threshold > 1:
            raise ValidationError("rhat_threshold must exceed 1")

    def resolved_nu(self, n_cell_types: int) -> float:
        nu = float(n_cell_types + 2) if self.nu is None else float(self.nu)
        if nu < n_cell_types + 2:
            raise ValidationError(f"nu must be >= C + 2 = {n_cell_types + 2}")
        return nu


@dataclass(frozen=True)
class PairSelection:
    """Selected (gene, cell type) pairs with provenance and DE scores."""

    pairs: frozenset[tuple[str, str]]
    provenance: dict[str, str] = field(default_factory=dict)  # "gene|cell_type" -> tag
    scores: dict[str, float] = field(default_factory=dict)

    VALID_TAGS = ("marker", "stability", "both")

    def __post_init__(self):
        object.__setattr__(self, "pairs", frozenset(self.pairs))
        for pair in self.pairs:
            key = pair_key(*pair)
            tag = self.provenance.get(key)
            if tag not in self.VALID_TAGS:
                raise ValidationError(f"pair {pair} has missing or invalid provenance {tag!r}")

    def genes(self) -> list[str]:
        return sorted({g for g, _ in self.pairs})


def pair_key(gene: str, cell_type: str) -> str:
    return f"{gene}|{cell_type}"
