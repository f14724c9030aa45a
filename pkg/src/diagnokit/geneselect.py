"""Tripartite gene / cell-type pair selection.

Three filters: curated marker pairs, a one-vs-rest differential-expression
stability test (Wilcoxon rank-sum + Benjamini-Hochberg + log2 fold change),
and noise suppression (weak-score quantile cut plus a dropout ceiling).
Markers always survive; the final set is the union.
"""
from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .reference import ReferenceDataset
from .types import PairSelection, pair_key

EXACT_ENUMERATION_MAX_N = 12
DEFAULT_FDR = 0.01
DEFAULT_LFC = 1.0
DEFAULT_NOISE_QUANTILE = 0.10
DROPOUT_CEILING = 0.95


def load_marker_list(path: str | Path) -> set[tuple[str, str]]:
    """Parse a ``{gene: [cell_types]}`` JSON file into a pair set."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad marker JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError("marker file must be a JSON object of gene -> [cell types]")
    pairs = set()
    for gene, cell_types in raw.items():
        if not isinstance(cell_types, list):
            raise ParseError(f"marker entry for {gene!r} must be a list")
        for ct in cell_types:
            pairs.add((gene, ct))
    return pairs


def _rank_with_ties(pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mid-ranks (1-based) and tie-group sizes."""
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled))
    ties = []
    i = 0
    srt = pooled[order]
    while i < len(srt):
        j = i
        while j + 1 < len(srt) and srt[j + 1] == srt[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        ties.append(j - i + 1)
        i = j + 1
    return ranks, np.array(ties, dtype=np.float64)


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    ranks, _ = _rank_with_ties(pooled)
    ra = ranks[: len(a)].sum()
    return ra - len(a) * (len(a) + 1) / 2.0


def wilcoxon_rank_sum(a, b) -> tuple[float, float]:
    """Two-sided Wilcoxon / Mann-Whitney rank-sum test.

    Returns (U, p). Mid-ranks for ties; exact enumeration of rank
    assignments when n1 + n2 <= 12, otherwise a normal approximation with
    tie-corrected variance and continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 1 or b.size < 1:
        raise ValidationError("wilcoxon_rank_sum requires non-empty inputs")
    n1, n2 = a.size, b.size
    n = n1 + n2
    u = _u_statistic(a, b)
    mean_u = n1 * n2 / 2.0

    if n <= EXACT_ENUMERATION_MAX_N:
        pooled = np.concatenate([a, b])
        dev = abs(u - mean_u)
        count = 0
        total = 0
        for idx in itertools.combinations(range(n), n1):
            mask = np.zeros(n, dtype=bool)
            mask[list(idx)] = True
            u_perm = _u_statistic(pooled[mask], pooled[~mask])
            if abs(u_perm - mean_u) >= dev - 1e-12:
                count += 1
            total += 1
        return u, count / total

    pooled = np.concatenate([a, b])
    _, ties = _rank_with_ties(pooled)
    tie_term = ((ties ** 3 - ties).sum()) / (n * (n - 1))
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var_u <= 0:
        return u, 1.0  # all values tied
    diff = u - mean_u
    cc = 0.5 if diff != 0 else 0.0
    z = (abs(diff) - cc) / math.sqrt(var_u)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return u, min(p, 1.0)


def benjamini_hochberg(pvalues) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        return p.copy()
    if ((p < 0) | (p > 1)).any() or not np.isfinite(p).all():
        raise ValidationError("p-values must lie in [0, 1]")
    n = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * n / np.arange(1, n + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted = np.minimum(adjusted, 1.0)
    out = np.empty(n)
    out[order] = adjusted
    return out


def log2_fold_change(a, b, pseudo: float = 1e-9) -> float:
    """log2 ratio of group means on the linear (base-2 exponentiated) scale."""
    if not pseudo > 0:
        raise ValidationError("pseudo must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ma = np.exp2(a).mean()
    mb = np.exp2(b).mean()
    return float(np.log2((ma + pseudo) / (mb + pseudo)))


def stability_scores(ref: ReferenceDataset, fdr_threshold: float,
                     lfc_threshold: float) -> dict[tuple[str, str], float]:
    """One-vs-rest stability set before noise suppression.

    Returns pair -> DE score (-log10 adjusted p times |log2 FC|) for pairs
    passing both the BH-adjusted p and fold-change thresholds.
    """
    types = ref.cell_types
    type_cols = {c: ref.type_columns(c) for c in types}

    tested: list[tuple[str, str]] = []
    pvals: list[float] = []
    lfcs: list[float] = []
    for gi, gene in enumerate(ref.genes):
        row = ref.values[gi]
        for ct in types:
            idx = type_cols[ct]
            mask = np.zeros(row.size, dtype=bool)
            mask[idx] = True
            a, b = row[mask], row[~mask]
            if a.size == 0 or b.size == 0:
                continue
            _, p = wilcoxon_rank_sum(a, b)
            tested.append((gene, ct))
            pvals.append(p)
            lfcs.append(log2_fold_change(a, b))

    adjusted = benjamini_hochberg(pvals)
    stability: dict[tuple[str, str], float] = {}
    for (gene, ct), p_adj, lfc in zip(tested, adjusted, lfcs):
        if p_adj < fdr_threshold and abs(lfc) > lfc_threshold:
            stability[(gene, ct)] = float(-np.log10(max(p_adj, 1e-300)) * abs(lfc))
    return stability


def select_pairs(ref: ReferenceDataset, markers: set[tuple[str, str]],
                 fdr_threshold: float = DEFAULT_FDR,
                 lfc_threshold: float = DEFAULT_LFC,
                 noise_quantile: float = DEFAULT_NOISE_QUANTILE) -> PairSelection:
    """Tripartite selection over one-vs-rest tests within the reference.

    The stability set keeps pairs with BH-adjusted p below ``fdr_threshold``
    and |log2 FC| above ``lfc_threshold``. Noise suppression then drops pairs
    whose score -log10(p_adj) * |lfc| falls strictly below the
    ``noise_quantile`` quantile (lower interpolation) of stability scores, and
    drops genes whose reference dropout rate exceeds the ceiling. Marker
    pairs always survive.
    """
    if not (fdr_threshold > 0 and lfc_threshold > 0):
        raise ValidationError("thresholds must be positive")
    if not 0 < noise_quantile < 1:
        raise ValidationError("noise_quantile must lie in (0, 1)")

    types = ref.cell_types
    gene_set = set(ref.genes)
    dropout = (ref.values == 0).mean(axis=1)

    stability = stability_scores(ref, fdr_threshold, lfc_threshold)

    if stability:
        cut = float(np.quantile(list(stability.values()), noise_quantile, method="lower"))
        stability = {pair: s for pair, s in stability.items() if s >= cut}
    gene_index = {g: i for i, g in enumerate(ref.genes)}
    stability = {pair: s for pair, s in stability.items()
                 if dropout[gene_index[pair[0]]] <= DROPOUT_CEILING}

    marker_pairs = {(g, c) for g, c in markers if g in gene_set and c in set(types)}
    pairs = marker_pairs | set(stability)
    provenance = {}
    scores = {}
    for pair in pairs:
        key = pair_key(*pair)
        in_marker = pair in marker_pairs
        in_stab = pair in stability
        provenance[key] = "both" if (in_marker and in_stab) else (
            "marker" if in_marker else "stability")
        scores[key] = float(stability.get(pair, 0.0))
    return PairSelection(pairs=frozenset(pairs), provenance=provenance, scores=scores)


def save_selection(selection: PairSelection, path: str | Path) -> None:
    records = [{"gene": g, "cell_type": c,
                "provenance": selection.provenance[pair_key(g, c)],
                "score": selection.scores[pair_key(g, c)]}
               for g, c in sorted(selection.pairs)]
    from .io import atomic_write_text
    atomic_write_text(path, json.dumps(records, indent=2) + "\n")


def load_selection(path: str | Path) -> PairSelection:
    with open(path, encoding="utf-8") as fh:
        records = json.load(fh)
    pairs = set()
    provenance = {}
    scores = {}
    for rec in records:
        pair = (rec["gene"], rec["cell_type"])
        pairs.add(pair)
        provenance[pair_key(*pair)] = rec["provenance"]
        scores[pair_key(*pair)] = float(rec["score"])
    return PairSelection(pairs=frozenset(pairs), provenance=provenance, scores=scores)
