"""Single-pass domain uncertainty and the repeated-sampling baseline it is compared with."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from matplotlib.figure import Figure
from scipy import stats

from . import data as data_mod

logger = logging.getLogger(__name__)

CSV_FIELDS = ("domain", "severity", "single_pass_score", "bayesian_variance", "ms_single", "ms_bayes")
INIT_SIGMA = math.log(2.0)


@dataclass
class DomainUncertainty:
    score: float
    sigma_T: float
    sigma_S_ref: float
    wall_time_ms_per_batch: float


def _tensor_batches(dataset, batch_size, device):
    for start in range(0, len(dataset), batch_size):
        x01, _ = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        yield data_mod.normalize(torch.from_numpy(np.ascontiguousarray(x01))).to(device)


def _as_batch(x, device="cpu"):
    if isinstance(x, torch.Tensor):
        return x.to(device)
    x01 = data_mod.to_float_chw(x)
    return data_mod.normalize(torch.from_numpy(np.ascontiguousarray(x01))).to(device)


@torch.no_grad()
def predicted_sigma(model, x) -> torch.Tensor:
    """The generator's sigma map for a normalised batch (one pass through the tap and G's heads)."""
    return model.generator.perturbation(model.tap(x)).sigma


@torch.no_grad()
def calibrate_sigma_S(model, source_set, batch_size: int = 500, device="cpu") -> float:
    """Mean predicted sigma over a source split, accumulated element-wise in one pass."""
    model.eval()
    total = 0.0
    count = 0
    for x in _tensor_batches(source_set, batch_size, device):
        sigma = predicted_sigma(model, x)
        total += sigma.double().sum().item()
        count += sigma.numel()
    if count == 0:
        raise ValueError("empty source split")
    ref = total / count
    if abs(ref - INIT_SIGMA) < 0.05:
        logger.warning("sigma_S = %.4f is close to its initial value; is the generator trained?", ref)
    return ref


def uncertainty_score(sigma_T: float, sigma_S_ref: float) -> float:
    if sigma_S_ref <= 0:
        raise ValueError("sigma_S_ref must be positive")
    return (sigma_T - sigma_S_ref) / sigma_S_ref


@torch.no_grad()
def single_pass_uncertainty(model, batch_T, sigma_S_ref: float, device="cpu") -> DomainUncertainty:
    """Relative increase of the predicted sigma on a target batch over the source reference."""
    x = _as_batch(batch_T, device)
    if x.shape[0] == 0:
        raise ValueError("empty target batch")
    model.eval()
    t0 = time.perf_counter()
    sigma_T = predicted_sigma(model, x).mean().item()
    ms = 1000.0 * (time.perf_counter() - t0)
    return DomainUncertainty(uncertainty_score(sigma_T, sigma_S_ref), sigma_T, sigma_S_ref, ms)


@torch.no_grad()
def bayesian_baseline(model, batch_T, n_samples: int = 30, device="cpu") -> tuple[float, float]:
    """Mean predictive variance of the softmax over ``n_samples`` stochastic forward passes.

    Each pass draws a fresh Gaussian feature perturbation (no style mixing or
    mixup). Returns ``(variance, wall_ms)``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2 to estimate a variance")
    x = _as_batch(batch_T, device)
    if x.shape[0] == 0:
        raise ValueError("empty target batch")
    model.eval()
    t0 = time.perf_counter()
    probs = torch.stack([
        torch.softmax(model(x, mode="perturbed", use_style=False, use_mixup=False).logits, dim=-1)
        for _ in range(n_samples)
    ])
    var = probs.var(dim=0, unbiased=False).mean().item()
    ms = 1000.0 * (time.perf_counter() - t0)
    return var, ms


@dataclass
class UncertaintyRow:
    domain: str
    severity: int
    single_pass_score: float
    bayesian_variance: float
    ms_single: float
    ms_bayes: float


def score_domain(model, dataset, sigma_S_ref, *, n_samples=30, batch_size=128, max_batches=None, device="cpu"):
    """Score one evaluation domain batch by batch; returns an UncertaintyRow without domain labels."""
    sig_sum = var_sum = ms_s = ms_b = 0.0
    n_el = 0
    n_batches = 0
    for i, x in enumerate(_tensor_batches(dataset, batch_size, device)):
        if max_batches is not None and i >= max_batches:
            break
        du = single_pass_uncertainty(model, x, sigma_S_ref, device)
        var, ms = bayesian_baseline(model, x, n_samples, device)
        # sigma is averaged per element so the domain score matches a single pass over the whole split
        numel = x.shape[0]
        sig_sum += du.sigma_T * numel
        n_el += numel
        var_sum += var * numel
        ms_s += du.wall_time_ms_per_batch
        ms_b += ms
        n_batches += 1
    if n_batches == 0:
        raise ValueError("empty evaluation domain")
    sigma_T = sig_sum / n_el
    return UncertaintyRow("", 0, uncertainty_score(sigma_T, sigma_S_ref), var_sum / n_el,
                          ms_s / n_batches, ms_b / n_batches)


def uncertainty_protocol(model, specs, sigma_S_ref, *, root=None, n_samples=30, batch_size=128,
                         max_batches=None, device="cpu") -> list[UncertaintyRow]:
    rows = []
    for spec, ds in data_mod.load_cifar10c(root, specs):
        row = score_domain(model, ds, sigma_S_ref, n_samples=n_samples, batch_size=batch_size,
                           max_batches=max_batches, device=device)
        row.domain, row.severity = spec.name, spec.severity
        rows.append(row)
        logger.info("%s-%d: score %.4f  var %.5f", spec.name, spec.severity, row.single_pass_score,
                    row.bayesian_variance)
    return rows


def _corr(a, b, fn):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(fn(a, b)[0])


def spearman(a, b) -> float:
    return _corr(a, b, stats.spearmanr)


def pearson(a, b) -> float:
    return _corr(a, b, stats.pearsonr)


def per_domain_means(rows) -> dict[str, tuple[float, float]]:
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r.domain, []).append((r.single_pass_score, r.bayesian_variance))
    return {d: tuple(np.mean(v, axis=0)) for d, v in out.items()}


def severity_monotonicity(rows) -> dict[str, float]:
    """Spearman correlation between score and severity, per corruption."""
    by: dict[str, list] = {}
    for r in rows:
        by.setdefault(r.domain, []).append((r.severity, r.single_pass_score))
    return {d: spearman(*zip(*sorted(v))) for d, v in by.items()}


def compare_and_plot(scores, baselines, out_dir, *, stem: str = "uncertainty") -> dict:
    """Pair single-pass scores with baseline variances per domain and write CSV, JSON summary and figure.

    ``scores`` and ``baselines`` map ``(domain, severity)`` to a DomainUncertainty
    (or a bare score) and to ``(variance, ms)`` respectively. Returns the
    correlation summary.
    """
    if set(scores) != set(baselines):
        raise ValueError(f"domain lists differ: {sorted(set(scores) ^ set(baselines))}")
    rows = []
    for key in sorted(scores):
        s = scores[key]
        var, ms_b = baselines[key]
        score, ms_s = (s.score, s.wall_time_ms_per_batch) if isinstance(s, DomainUncertainty) else (float(s), float("nan"))
        rows.append(UncertaintyRow(key[0], int(key[1]), score, var, ms_s, ms_b))
    return write_comparison(rows, out_dir, stem=stem)


def write_comparison(rows, out_dir, *, stem: str = "uncertainty") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))

    s = [r.single_pass_score for r in rows]
    v = [r.bayesian_variance for r in rows]
    dom = per_domain_means(rows)
    ms_single = np.nanmean([r.ms_single for r in rows])
    ms_bayes = np.nanmean([r.ms_bayes for r in rows])
    summary = {
        "n_rows": len(rows),
        "spearman": spearman(s, v),
        "pearson": pearson(s, v),
        "n_domains": len(dom),
        "spearman_domains": spearman([a for a, _ in dom.values()], [b for _, b in dom.values()]),
        "pearson_domains": pearson([a for a, _ in dom.values()], [b for _, b in dom.values()]),
        "ms_single": float(ms_single),
        "ms_bayes": float(ms_bayes),
        "speedup": float(ms_bayes / ms_single) if ms_single > 0 else float("nan"),
    }
    (out_dir / f"{stem}_summary.json").write_text(json.dumps(summary, indent=2))

    labels = [f"{r.domain}-{r.severity}" for r in rows]
    fig = Figure(figsize=(max(6, 0.35 * len(rows)), 4))
    ax = fig.subplots()
    xs = np.arange(len(rows))
    ax.plot(xs, s, "o-", color="tab:blue", label="single-pass score")
    ax.set_ylabel("single-pass score", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(xs, v, "s--", color="tab:red", label="sampling variance")
    ax2.set_ylabel("predictive variance", color="tab:red")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_title(f"Spearman {summary['spearman']:.2f}, speed-up {summary['speedup']:.1f}x")
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}.png", dpi=120)
    summary["csv"] = str(csv_path)
    summary["figure"] = str(out_dir / f"{stem}.png")
    return summary
