"""Diagnostic subset construction and MLP-vs-LLM divergence tabulation.

Two subset builders isolate regimes where a feature-reading heuristic and the
trained MLP disagree: symbolic-conflict (AD-labeled samples carrying a
negative eQTL effect size) and out-of-distribution (any feature beyond a
z-score threshold of the training mean). The runner scores the MLP on each
subset and, when a client is available, scores LLM decisions through the
report prompts; offline runs omit the LLM column.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import FeatureVector, MlpModel, forward, integrated_gradients, \
    top_k_features
from .errors import ValidationError
from .report import LlmClient, PromptInput, build_prompt, parse_llm_decision

DEFAULT_SUBSET_SIZE = 100
OOD_THRESHOLD = 1.0  # z-score units


@dataclass(frozen=True)
class DivergenceReport:
    """Per-subset accuracies and the per-sample case table."""

    subset_name: str
    subset_size: int
    mlp_accuracy: float
    llm_accuracy: float | None = None
    case_table: tuple[dict, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.subset_size <= 0:
            raise ValidationError("subset_size must be positive")
        for acc in (self.mlp_accuracy, self.llm_accuracy):
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise ValidationError("accuracies must lie in [0, 1]")
        object.__setattr__(self, "case_table", tuple(self.case_table))


def symbolic_conflict_subset(features: list[FeatureVector], labels,
                             size: int = DEFAULT_SUBSET_SIZE) -> list[int]:
    """Indices of up to ``size`` AD-labeled samples with any negative BETA.

    Order follows the dataset. Raises when no sample qualifies.
    """
    y = np.asarray(labels)
    if len(features) != y.size:
        raise ValidationError("features and labels must have equal length")
    if size < 1:
        raise ValidationError("size must be positive")
    if not any("eqtl_beta" in f.tags for f in features[:1]):
        raise ValidationError("dataset has no eqtl_beta-tagged features")
    out: list[int] = []
    for i, f in enumerate(features):
        if y[i] != 1:
            continue
        beta_mask = np.array([t == "eqtl_beta" for t in f.tags])
        if (f.values[beta_mask] < 0).any():
            out.append(i)
            if len(out) == size:
                break
    if not out:
        raise ValidationError("symbolic-conflict subset is empty")
    return out


def ood_subset(features: list[FeatureVector], train_mean, train_sd,
               size: int | None = None,
               threshold: float = OOD_THRESHOLD) -> list[int]:
    """Indices of samples with any feature beyond ``threshold`` training sds."""
    mean = np.asarray(train_mean, dtype=np.float64)
    sd = np.asarray(train_sd, dtype=np.float64)
    if not features:
        raise ValidationError("empty dataset")
    d = features[0].dim
    if mean.shape != (d,) or sd.shape != (d,):
        raise ValidationError("train stats must cover every feature")
    if (sd <= 0).any():
        raise ValidationError("train sds must be positive")
    out: list[int] = []
    for i, f in enumerate(features):
        z = np.abs(f.values - mean) / sd
        if z.max() > threshold:
            out.append(i)
            if size is not None and len(out) == size:
                break
    if not out:
        raise ValidationError("OOD subset is empty")
    return out


def sign_rule_predict(f: FeatureVector) -> int:
    """Heuristic stand-in for the LLM's documented failure mode: call nonAD
    whenever any eQTL effect size is negative, else AD."""
    beta_mask = np.array([t == "eqtl_beta" for t in f.tags])
    if not beta_mask.any():
        raise ValidationError("sign rule needs eqtl_beta-tagged features")
    return 0 if (f.values[beta_mask] < 0).any() else 1


def _llm_decision(client: LlmClient, model: MlpModel, f: FeatureVector) -> int | None:
    prob = forward(model, f)
    attr = integrated_gradients(model, f)
    top = top_k_features(attr, f.names, f.values, k=min(5, f.dim))
    from .report import FeatureReading
    inp = PromptInput(
        predicted_label="AD" if prob >= 0.5 else "nonAD", probability=prob,
        top_features=tuple(FeatureReading(name=n, value=v, attribution=a)
                           for n, v, a in top),
        audience="clinician", strategy="direct")
    try:
        decision = parse_llm_decision(client.complete(build_prompt(inp)))
    except Exception:
        return None
    if decision is None:
        return None
    return 1 if decision == "AD" else 0


def run_divergence(model: MlpModel, features: list[FeatureVector], labels,
                   subsets: dict[str, list[int]],
                   client: LlmClient | None = None) -> list[DivergenceReport]:
    """Score the MLP (and optionally an LLM) on each named subset."""
    y = np.asarray(labels)
    if not subsets:
        raise ValidationError("no subsets provided")
    reports = []
    for name, idx in subsets.items():
        if not idx:
            raise ValidationError(f"subset {name!r} is empty")
        rows = []
        mlp_hits = 0
        llm_hits = 0
        llm_total = 0
        for i in idx:
            f = features[i]
            mlp_pred = int(forward(model, f) >= 0.5)
            mlp_hits += int(mlp_pred == y[i])
            row = {"sample": f.sample_id or str(i),
                   "features": {n: float(v) for n, v in zip(f.names, f.values)},
                   "label": int(y[i]), "mlp_pred": mlp_pred}
            if client is not None:
                pred = _llm_decision(client, model, f)
                if pred is not None:
                    llm_total += 1
                    llm_hits += int(pred == y[i])
                row["llm_pred"] = pred
            rows.append(row)
        llm_acc = (llm_hits / llm_total) if client is not None and llm_total else None
        reports.append(DivergenceReport(
            subset_name=name, subset_size=len(idx),
            mlp_accuracy=mlp_hits / len(idx), llm_accuracy=llm_acc,
            case_table=tuple(rows)))
    return reports


def save_reports(reports: list[DivergenceReport], path: str | Path) -> None:
    payload = [{"subset_name": r.subset_name, "subset_size": r.subset_size,
                "mlp_accuracy": r.mlp_accuracy, "llm_accuracy": r.llm_accuracy,
                "case_table": list(r.case_table)} for r in reports]
    from .io import atomic_write_text
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def load_reports(path: str | Path) -> list[DivergenceReport]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [DivergenceReport(subset_name=r["subset_name"],
                             subset_size=int(r["subset_size"]),
                             mlp_accuracy=float(r["mlp_accuracy"]),
                             llm_accuracy=(None if r.get("llm_accuracy") is None
                                           else float(r["llm_accuracy"])),
                             case_table=tuple(r.get("case_table", ())))
            for r in payload]


def reports_markdown(reports: list[DivergenceReport],
                     insights: dict[str, str] | None = None) -> str:
    """Markdown case table: Case, Features, Label, MLP, LLM, Key Insight."""
    insights = insights or {}
    lines = ["| Case | Features | Label | MLP | LLM | Key Insight |",
             "| --- | --- | --- | --- | --- | --- |"]
    for r in reports:
        for row in r.case_table:
            shown = "; ".join(f"{n}={v:.4g}" for n, v in row["features"].items())
            llm = row.get("llm_pred")
            lines.append("| {case} | {feat} | {lab} | {mlp} | {llm} | {ins} |".format(
                case=f"{r.subset_name}:{row['sample']}", feat=shown,
                lab="AD" if row["label"] == 1 else "nonAD",
                mlp="AD" if row["mlp_pred"] == 1 else "nonAD",
                llm="-" if llm is None else ("AD" if llm == 1 else "nonAD"),
                ins=insights.get(row["sample"], "")))
    return "\n".join(lines) + "\n"
