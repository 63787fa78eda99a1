import pytest

from verification import SUITES, SuiteReport, gradient_suite, loss_suite, metric_suite, random_mask_pair, run_suite


def test_loss_anchors_hold():
    report = loss_suite()
    assert report.passed, [c.name for c in report.failures]
    assert {c.name for c in report.checks} >= {"identical_embeddings_log_b2", "identical_embeddings_log_b8"}


def test_metric_oracle_agrees():
    report = metric_suite(n_pairs=40, seed=3)
    assert report.passed, [c.name for c in report.failures]


def test_gradient_checks_pass():
    report = gradient_suite()
    assert report.passed, [(c.name, c.value) for c in report.failures]
    assert "composite_loss" in {c.name for c in report.checks}


def test_random_mask_pairs_share_shape(rng):
    for _ in range(10):
        pred, truth, n_classes = random_mask_pair(rng)
        assert pred.values.shape == truth.values.shape
        assert 2 <= n_classes <= 5
        assert pred.spacing_mm == truth.spacing_mm


def test_report_collects_failures():
    report = SuiteReport("demo")
    report.add("ok", 1e-6, 1e-4)
    report.add("bad", 1e-2, 1e-4)
    assert not report.passed
    assert [c.name for c in report.failures] == ["bad"]


def test_unknown_suite():
    with pytest.raises(ValueError):
        run_suite("speed")
    assert SUITES == ("gradients", "metrics", "losses")
