"""Synthetic generator consistency, evaluation metrics, and baselines."""
from __future__ import annotations

import numpy as np
import pytest

from diagnokit.errors import ValidationError
from diagnokit.reference import signature_matrix
from diagnokit.simulate import (GroundTruthBundle, RecoveryReport, SyntheticScenario,
                                baseline_ols, baseline_reference_mean,
                                evaluate_recovery, generate, nnls_proportions,
                                pearson)
from diagnokit.types import CtsTensor


def test_scenario_validation():
    with pytest.raises(ValidationError):
        SyntheticScenario(G=0)
    with pytest.raises(ValidationError):
        SyntheticScenario(C=2, dirichlet_alpha=(1.0,))
    with pytest.raises(ValidationError):
        SyntheticScenario(noise_sd=-1.0)


def test_generate_deterministic():
    a = generate(SyntheticScenario(G=5, N=6, seed=11, ref_cells_per_type=6))
    b = generate(SyntheticScenario(G=5, N=6, seed=11, ref_cells_per_type=6))
    assert np.array_equal(a.bulk.values, b.bulk.values)
    assert np.array_equal(a.ref.values, b.ref.values)


def test_mixture_reconstruction_exact():
    sc = SyntheticScenario(G=8, N=10, seed=3, ref_cells_per_type=6)
    bundle = generate(sc)
    w = np.stack([m.proportions for m in bundle.metas])
    c1 = np.stack([m.bulk_cov for m in bundle.metas])
    c2 = np.stack([m.cts_cov for m in bundle.metas])
    z = np.transpose(bundle.true_z.mean, (0, 2, 1))  # (G, N, C)
    gamma = np.stack([p.gamma for p in bundle.true_params])
    b = np.stack([p.b for p in bundle.true_params])
    rebuilt = (np.einsum("nc,gnc->gn", w, z) + gamma @ c1.T
               + np.einsum("nc,gck,nk->gn", w, b, c2) + bundle.noise)
    assert np.abs(rebuilt - bundle.bulk.values).max() < 1e-12


def test_noiseless_identity_scenario():
    sc = SyntheticScenario(G=4, C=1, N=5, d1=0, d2=0, noise_sd=0.0,
                           covariate_effect_scale=0.0, dirichlet_alpha=(1.0,),
                           seed=0, ref_cells_per_type=4)
    bundle = generate(sc)
    assert np.allclose(bundle.bulk.values, bundle.true_z.mean[:, 0, :], atol=1e-12)


class TestPearson:
    def test_hand_oracle(self):
        # a=[1,2,3], b=[1,2,4]: centered dot 3, norms sqrt(2) and sqrt(14/3)
        assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(
            3.0 / np.sqrt(2.0 * 14.0 / 3.0), abs=1e-12)

    def test_perfect_and_inverse(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)

    def test_zero_variance_rejected(self):
        with pytest.raises(ValidationError):
            pearson([1, 1], [1, 2])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            pearson([1, 2], [1, 2, 3])


class TestNnls:
    def test_noiseless_recovery(self):
        rng = np.random.default_rng(0)
        sig = rng.uniform(1, 10, (8, 3))
        p_true = np.array([0.2, 0.3, 0.5])
        est = nnls_proportions(sig @ p_true, sig)
        assert np.abs(est - p_true).max() < 1e-8

    def test_grid_oracle_two_types(self):
        # brute-force search over the 2-type simplex as an independent oracle
        rng = np.random.default_rng(1)
        grid = np.linspace(0.0, 1.0, 4001)
        for _ in range(5):
            sig = rng.uniform(1, 10, (6, 2))
            p_true = rng.dirichlet(np.ones(2))
            x = sig @ p_true + rng.normal(0, 1e-3, 6)
            est = nnls_proportions(x, sig)
            resid = ((x[:, None] - sig @ np.stack([grid, 1 - grid])) ** 2).sum(axis=0)
            best = grid[np.argmin(resid)]
            assert abs(est[0] - best) < 2e-3

    def test_rank_deficient_rejected(self):
        sig = np.ones((6, 2))
        with pytest.raises(ValidationError):
            nnls_proportions(np.ones(6), sig)

    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            nnls_proportions(np.ones(3), np.ones((2, 4)))


def test_baseline_reference_mean_constant_over_samples():
    bundle = generate(SyntheticScenario(G=5, N=4, seed=2, ref_cells_per_type=6))
    base = baseline_reference_mean(bundle.ref, bundle.bulk)
    sig = signature_matrix(bundle.ref)
    assert np.allclose(base.mean[:, :, 0], sig)
    assert np.allclose(base.mean, base.mean[:, :, [0]])


def test_baseline_ols_fits_proportion_regression():
    bundle = generate(SyntheticScenario(G=6, N=30, seed=4, ref_cells_per_type=6))
    est = baseline_ols(bundle.bulk, bundle.metas, bundle.true_z.cell_types)
    assert est.mean.shape == bundle.true_z.mean.shape
    # residual redistribution preserves the bulk mixture identity
    w = np.stack([m.proportions for m in bundle.metas])
    mixed = np.einsum("nc,gcn->gn", w, est.mean)
    assert np.allclose(mixed, bundle.bulk.values, atol=1e-8)


def test_evaluate_recovery_counts_exclusions():
    genes, cts, samples = ["g0"], ["a"], ["s0", "s1", "s2"]
    truth = CtsTensor(genes=genes, cell_types=cts, samples=samples,
                      mean=np.array([[[1.0, 2.0, 3.0]]]),
                      variance=np.zeros((1, 1, 3)))
    flat = CtsTensor(genes=genes, cell_types=cts, samples=samples,
                     mean=np.ones((1, 1, 3)), variance=np.zeros((1, 1, 3)))
    report = evaluate_recovery(flat, truth)
    assert report.excluded_per_gene["a"] == 1
    assert report.per_gene["a"] == []
    assert report.summary()["median_per_gene_overall"] is None


def test_evaluate_recovery_axis_mismatch():
    t = CtsTensor(genes=["g"], cell_types=["a"], samples=["s0", "s1"],
                  mean=np.zeros((1, 1, 2)), variance=np.zeros((1, 1, 2)))
    u = CtsTensor(genes=["h"], cell_types=["a"], samples=["s0", "s1"],
                  mean=np.zeros((1, 1, 2)), variance=np.zeros((1, 1, 2)))
    with pytest.raises(ValidationError):
        evaluate_recovery(t, u)


def test_recovery_report_summary_quartiles():
    report = RecoveryReport(cell_types=["a"],
                            per_gene={"a": [0.1, 0.5, 0.9, 0.7]},
                            per_sample={"a": []},
                            excluded_per_gene={"a": 0},
                            excluded_per_sample={"a": 2})
    s = report.summary()
    assert s["per_gene"]["a"]["median"] == pytest.approx(0.6)
    assert s["per_sample"]["a"]["excluded"] == 2
    assert s["median_per_gene_overall"] == pytest.approx(0.6)
