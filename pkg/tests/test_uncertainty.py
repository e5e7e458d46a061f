import csv
import json

import numpy as np
import pytest
import torch

from cudgnet.data import ImageArrayDataset, corruption_specs, normalize, to_float_chw
from cudgnet.training import TrainConfig, build_model
from cudgnet.uncertainty import (
    CSV_FIELDS,
    DomainUncertainty,
    bayesian_baseline,
    calibrate_sigma_S,
    compare_and_plot,
    pearson,
    predicted_sigma,
    severity_monotonicity,
    single_pass_uncertainty,
    spearman,
    uncertainty_protocol,
    uncertainty_score,
    write_comparison,
)

from conftest import make_images


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return build_model(TrainConfig(depth=10, widen_factor=1, proj_dim=16)).eval()


@pytest.fixture(scope="module")
def source():
    images, labels = make_images(60, seed=5)
    return ImageArrayDataset(images, labels)


def _batch(ds, n=16):
    x01, _ = ds.batch(np.arange(n))
    return normalize(torch.from_numpy(np.ascontiguousarray(x01)))


def test_score_is_zero_on_reference():
    assert uncertainty_score(0.7, 0.7) == 0.0
    assert uncertainty_score(1.4, 0.7) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        uncertainty_score(1.0, 0.0)


def test_calibration_matches_one_shot_mean(model, source):
    x01, _ = source.batch(np.arange(len(source)))
    full = predicted_sigma(model, normalize(torch.from_numpy(np.ascontiguousarray(x01)))).double().mean().item()
    # streamed in uneven batches, the element-weighted mean must not depend on batch size
    for bs in (7, 25, 60):
        assert calibrate_sigma_S(model, source, batch_size=bs) == pytest.approx(full, rel=1e-6)


def test_single_pass_reference_domain_scores_zero(model, source):
    ref = calibrate_sigma_S(model, source)
    x01, _ = source.batch(np.arange(len(source)))
    du = single_pass_uncertainty(model, normalize(torch.from_numpy(np.ascontiguousarray(x01))), ref)
    assert isinstance(du, DomainUncertainty)
    assert du.score == pytest.approx(0.0, abs=1e-5)
    assert du.sigma_T > 0 and du.wall_time_ms_per_batch >= 0


def test_single_pass_deterministic_and_order_invariant(model, source):
    x = _batch(source, 32)
    a = single_pass_uncertainty(model, x, 0.5)
    b = single_pass_uncertainty(model, x, 0.5)
    c = single_pass_uncertainty(model, x[torch.randperm(32)], 0.5)
    assert a.score == b.score
    assert c.score == pytest.approx(a.score, rel=1e-5)


def test_single_pass_accepts_uint8_images(model, source):
    images = source.images[:8]
    du = single_pass_uncertainty(model, images, 0.5)
    ref = single_pass_uncertainty(model, normalize(torch.from_numpy(np.ascontiguousarray(to_float_chw(images)))), 0.5)
    assert du.score == pytest.approx(ref.score)


def test_baseline_variance_vanishes_with_tiny_sigma(source):
    torch.manual_seed(1)
    m = build_model(TrainConfig(depth=10, widen_factor=1, proj_dim=16)).eval()
    with torch.no_grad():
        m.generator.perturbation.sigma_conv.weight.zero_()
        m.generator.perturbation.sigma_conv.bias.fill_(-40.0)
    var, ms = bayesian_baseline(m, _batch(source, 8), n_samples=5)
    assert 0.0 <= var < 1e-8
    assert ms > 0


def test_baseline_variance_non_negative_and_validates(model, source):
    var, _ = bayesian_baseline(model, _batch(source, 8), n_samples=4)
    assert var >= 0.0
    with pytest.raises(ValueError, match=">= 2"):
        bayesian_baseline(model, _batch(source, 8), n_samples=1)


@pytest.mark.slow
def test_baseline_30_samples_close_to_300(model, source):
    x = _batch(source, 16)
    torch.manual_seed(0)
    v30, _ = bayesian_baseline(model, x, n_samples=30)
    torch.manual_seed(1)
    v300, _ = bayesian_baseline(model, x, n_samples=300)
    assert v300 > 0
    assert abs(v30 - v300) / v300 < 0.2


def test_single_pass_faster_than_sampling(model, source):
    x = _batch(source, 32)
    single_pass_uncertainty(model, x, 0.5)  # warm-up
    t_single = min(single_pass_uncertainty(model, x, 0.5).wall_time_ms_per_batch for _ in range(5))
    _, t_bayes = bayesian_baseline(model, x, n_samples=30)
    assert t_bayes / t_single >= 5.0


def test_correlation_helpers():
    a = [0.1, 0.4, 0.2, 0.9]
    assert spearman(a, a) == pytest.approx(1.0)
    assert spearman(a, [-v for v in a]) == pytest.approx(-1.0)
    assert pearson(a, [2 * v + 1 for v in a]) == pytest.approx(1.0)
    assert np.isnan(spearman([1, 1, 1], [1, 2, 3]))


def test_compare_and_plot_writes_outputs(tmp_path):
    keys = [("fog", 1), ("fog", 3), ("snow", 1), ("snow", 3)]
    scores = {k: DomainUncertainty(0.1 * i, 0.0, 1.0, 1.0) for i, k in enumerate(keys)}
    baselines = {k: (0.01 * i, 40.0) for i, k in enumerate(keys)}
    summary = compare_and_plot(scores, baselines, tmp_path)
    assert summary["spearman"] == pytest.approx(1.0)
    assert summary["speedup"] == pytest.approx(40.0)
    with open(tmp_path / "uncertainty.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == CSV_FIELDS and len(rows) == 4
    assert (tmp_path / "uncertainty.png").stat().st_size > 0
    assert json.loads((tmp_path / "uncertainty_summary.json").read_text())["n_rows"] == 4


def test_compare_rejects_mismatched_domains(tmp_path):
    with pytest.raises(ValueError, match="differ"):
        compare_and_plot({("fog", 1): 0.1}, {("snow", 1): (0.1, 1.0)}, tmp_path)


def test_protocol_on_fake_corruptions(model, fake_data_root, tmp_path):
    specs = corruption_specs(["gaussian_noise", "fog"], (1, 3, 5))
    rows = uncertainty_protocol(model, specs, 0.7, root=fake_data_root, n_samples=3, batch_size=10)
    assert [(r.domain, r.severity) for r in rows] == [(s.name, s.severity) for s in specs]
    assert all(r.bayesian_variance >= 0 for r in rows)
    summary = write_comparison(rows, tmp_path)
    assert summary["n_domains"] == 2
    mono = severity_monotonicity(rows)
    assert set(mono) == {"gaussian_noise", "fog"}
