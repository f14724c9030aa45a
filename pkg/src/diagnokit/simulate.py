"""Synthetic ground truth, baseline deconvolvers, and recovery evaluation.

The generator follows the bulk mixture model end to end: latent per-gene
cell-type vectors with a strong shared (cross-type) covariance component,
Dirichlet proportions, Gaussian covariates with learned-coefficient effects,
and additive observation noise. The single-cell reference is generated
hierarchically from per-donor latent vectors so that aligned cell positions
across types carry the true cross-type covariance, matching how the prior
estimator reads the reference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls as _scipy_nnls

from .errors import ValidationError
from .reference import ReferenceDataset, signature_matrix
from .types import AdjustmentParams, BulkMatrix, CtsTensor, SampleMeta


@dataclass(frozen=True)
class SyntheticScenario:
    """Dimensions and magnitudes of one synthetic dataset."""

    G: int = 50
    C: int = 3
    N: int = 60
    d1: int = 2
    d2: int = 1
    dirichlet_alpha: tuple[float, ...] | None = None
    noise_sd: float = 0.5
    covariate_effect_scale: float = 0.5
    seed: int = 0
    # magnitude knobs (log-expression scale); arbitrary but fixed here
    expr_mean: float = 5.0
    expr_sd: float = 2.0
    sigma_rho_range: tuple[float, float] = (0.95, 0.99)
    sigma_scale: float = 1.3
    ref_cells_per_type: int = 50
    ref_cell_sd: float = 0.2

    def __post_init__(self):
        if min(self.G, self.C, self.N) < 1 or min(self.d1, self.d2) < 0:
            raise ValidationError("invalid scenario dimensions")
        alpha = self.dirichlet_alpha
        if alpha is None:
            alpha = tuple(1.0 for _ in range(self.C))
        alpha = tuple(float(a) for a in alpha)
        if len(alpha) != self.C or min(alpha) <= 0:
            raise ValidationError("dirichlet_alpha must be C positive entries")
        object.__setattr__(self, "dirichlet_alpha", alpha)
        if self.noise_sd < 0 or self.covariate_effect_scale < 0:
            raise ValidationError("noise_sd and covariate_effect_scale must be >= 0")


@dataclass(frozen=True)
class GroundTruthBundle:
    """Everything needed to score a deconvolution run against truth."""

    bulk: BulkMatrix
    true_z: CtsTensor
    metas: list[SampleMeta]
    ref: ReferenceDataset
    true_params: list[AdjustmentParams]
    noise: np.ndarray  # (G, N) stored observation noise
    true_sigma: np.ndarray = field(repr=False, default=None)  # (G, C, C)


def _shared_component_cov(rng: np.random.Generator, C: int,
                          rho_range: tuple[float, float], scale: float) -> np.ndarray:
    """SPD covariance with a dominant shared component and per-type jitter."""
    rho = rng.uniform(*rho_range)
    s = rng.uniform(0.9, 1.1, C)
    corr = (1.0 - rho) * np.eye(C) + rho * np.ones((C, C))
    return scale * np.outer(s, s) * corr


def generate(scenario: SyntheticScenario) -> GroundTruthBundle:
    """Draw one fully specified synthetic dataset, deterministic in the seed."""
    sc = scenario
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(sc.seed, 0x51)))
    G, C, N = sc.G, sc.C, sc.N
    genes = [f"g{i:04d}" for i in range(G)]
    cell_types = [f"ct{j + 1}" for j in range(C)]
    samples = [f"s{i:03d}" for i in range(N)]

    mus = rng.normal(sc.expr_mean, sc.expr_sd, (G, C))
    sigmas = np.stack([_shared_component_cov(rng, C, sc.sigma_rho_range, sc.sigma_scale)
                       for _ in range(G)])
    chols = np.linalg.cholesky(sigmas)
    z = mus[:, None, :] + np.einsum("gcd,gnd->gnc", chols, rng.standard_normal((G, N, C)))

    w = rng.dirichlet(np.array(sc.dirichlet_alpha), N)
    c1 = rng.standard_normal((N, sc.d1))
    c2 = rng.standard_normal((N, sc.d2))
    gamma = rng.normal(0.0, 1.0, (G, sc.d1)) * sc.covariate_effect_scale
    b = rng.normal(0.0, 1.0, (G, C, sc.d2)) * sc.covariate_effect_scale
    noise = rng.standard_normal((G, N)) * sc.noise_sd

    x = (np.einsum("nc,gnc->gn", w, z) + gamma @ c1.T
         + np.einsum("nc,gck,nk->gn", w, b, c2) + noise)

    bulk = BulkMatrix(genes=genes, samples=samples, values=x)
    true_z = CtsTensor(genes=genes, cell_types=cell_types, samples=samples,
                       mean=np.transpose(z, (0, 2, 1)),
                       variance=np.zeros((G, C, N)))
    metas = [SampleMeta(sample_id=samples[i], proportions=w[i],
                        bulk_cov=c1[i], cts_cov=c2[i]) for i in range(N)]
    true_params = [AdjustmentParams(gamma=gamma[g], b=b[g]) for g in range(G)]

    # donor-aligned reference: cell k of every type shares donor k's latent vector
    M = sc.ref_cells_per_type
    donors = mus[:, None, :] + np.einsum(
        "gcd,gmd->gmc", chols, rng.standard_normal((G, M, C)))  # (G, M, C)
    cells = []
    labels = []
    cols = []
    for j, ct in enumerate(cell_types):
        for k in range(M):
            cells.append(f"{ct}_cell{k:03d}")
            labels.append(ct)
            cols.append(donors[:, k, j] + rng.normal(0.0, sc.ref_cell_sd, G))
    ref = ReferenceDataset(genes=genes, cells=cells, cell_type_labels=labels,
                           values=np.column_stack(cols))
    return GroundTruthBundle(bulk=bulk, true_z=true_z, metas=metas, ref=ref,
                             true_params=true_params, noise=noise, true_sigma=sigmas)


def pearson(a, b) -> float:
    """Sample Pearson correlation; rejects degenerate inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValidationError("pearson needs two equal-length vectors of size >= 2")
    da = a - a.mean()
    db = b - b.mean()
    na = float(da @ da)
    nb = float(db @ db)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("pearson undefined for zero-variance input")
    return float(np.clip((da @ db) / np.sqrt(na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class RecoveryReport:
    """Per-gene and per-sample PCC distributions per cell type."""

    cell_types: list[str]
    per_gene: dict[str, list[float]]
    per_sample: dict[str, list[float]]
    excluded_per_gene: dict[str, int]
    excluded_per_sample: dict[str, int]

    def summary(self) -> dict:
        out = {}
        for level, table, excl in (("per_gene", self.per_gene, self.excluded_per_gene),
                                   ("per_sample", self.per_sample, self.excluded_per_sample)):
            stats = {}
            for ct in self.cell_types:
                vals = np.array(table[ct])
                if vals.size:
                    q1, med, q3 = np.percentile(vals, [25, 50, 75])
                    stats[ct] = {"median": float(med), "q1": float(q1), "q3": float(q3),
                                 "n": int(vals.size), "excluded": excl[ct]}
                else:
                    stats[ct] = {"median": None, "q1": None, "q3": None,
                                 "n": 0, "excluded": excl[ct]}
            out[level] = stats
        all_gene = [v for ct in self.cell_types for v in self.per_gene[ct]]
        out["median_per_gene_overall"] = float(np.median(all_gene)) if all_gene else None
        return out


def evaluate_recovery(estimate: CtsTensor, truth: CtsTensor) -> RecoveryReport:
    """Correlate estimate against truth per (gene, type) and per (sample, type).

    Entries with zero variance on either side are excluded and counted.
    """
    if (estimate.genes != truth.genes or estimate.cell_types != truth.cell_types
            or estimate.samples != truth.samples):
        raise ValidationError("estimate and truth axes do not match")
    cts = estimate.cell_types
    per_gene = {ct: [] for ct in cts}
    per_sample = {ct: [] for ct in cts}
    excl_g = {ct: 0 for ct in cts}
    excl_s = {ct: 0 for ct in cts}
    for j, ct in enumerate(cts):
        for gi in range(len(estimate.genes)):
            try:
                per_gene[ct].append(pearson(estimate.mean[gi, j], truth.mean[gi, j]))
            except ValidationError:
                excl_g[ct] += 1
        for si in range(len(estimate.samples)):
            try:
                per_sample[ct].append(pearson(estimate.mean[:, j, si], truth.mean[:, j, si]))
            except ValidationError:
                excl_s[ct] += 1
    return RecoveryReport(cell_types=list(cts), per_gene=per_gene, per_sample=per_sample,
                          excluded_per_gene=excl_g, excluded_per_sample=excl_s)


def nnls_proportions(bulk_column, signature) -> np.ndarray:
    """Non-negative least squares proportions, renormalized to the simplex.

    Uses the Lawson-Hanson active-set solver.
    """
    x = np.asarray(bulk_column, dtype=np.float64)
    s = np.asarray(signature, dtype=np.float64)
    if s.ndim != 2 or x.shape != (s.shape[0],):
        raise ValidationError("signature must be G x C and bulk_column length G")
    if s.shape[0] < s.shape[1]:
        raise ValidationError("need at least as many genes as cell types")
    if np.linalg.matrix_rank(s) < s.shape[1]:
        raise ValidationError("signature columns are rank deficient")
    p, _ = _scipy_nnls(s, x)
    total = p.sum()
    if total == 0.0:
        raise ValidationError("all-zero NNLS solution cannot be normalized")
    return p / total


def baseline_reference_mean(ref: ReferenceDataset, bulk: BulkMatrix) -> CtsTensor:
    """Naive baseline: every sample gets the reference per-type mean."""
    missing = [g for g in bulk.genes if g not in set(ref.genes)]
    if missing:
        raise ValidationError(f"bulk genes absent from reference: {missing[:5]}")
    idx = [ref.genes.index(g) for g in bulk.genes]
    sig = signature_matrix(ref)[idx]  # (G, C)
    cts = ref.cell_types
    within_var = np.column_stack([
        ref.values[np.ix_(idx, ref.type_columns(ct))].var(axis=1, ddof=1) for ct in cts])
    N = bulk.n_samples
    mean = np.repeat(sig[:, :, None], N, axis=2)
    var = np.repeat(within_var[:, :, None], N, axis=2)
    return CtsTensor(genes=bulk.genes, cell_types=cts, samples=bulk.samples,
                     mean=mean, variance=var)


def baseline_ols(bulk: BulkMatrix, metas: list[SampleMeta],
                 cell_types: list[str]) -> CtsTensor:
    """Per-gene OLS of bulk on proportions, with the per-sample residual
    redistributed along w. Ignores covariates."""
    w = np.stack([m.proportions for m in metas])  # (N, C)
    G, N = bulk.values.shape
    C = w.shape[1]
    beta, *_ = np.linalg.lstsq(w, bulk.values.T, rcond=None)  # (C, G)
    beta = beta.T  # (G, C)
    resid = bulk.values - beta @ w.T  # (G, N)
    wn = (w ** 2).sum(axis=1)  # (N,)
    mean = beta[:, :, None] + np.einsum("gn,nc->gcn", resid / wn[None, :], w)
    return CtsTensor(genes=bulk.genes, cell_types=cell_types, samples=bulk.samples,
                     mean=mean, variance=np.zeros((G, C, N)))
