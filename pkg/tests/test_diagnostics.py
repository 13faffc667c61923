import numpy as np
import pytest

from w2vbert.audio import generate_synthetic_corpus
from w2vbert.diagnostics import (
    ablation_splits,
    check_config_minimality,
    collapse_variants,
    detect_collapse,
    line_plot_svg,
    run_collapse_experiment,
    run_layer_ablation,
)
from w2vbert.trainer import MetricsRow, read_metrics

V = 64
THRESH = 0.9 * 63 / 64


def _rows(accs, lds, every=10):
    return [MetricsRow(every * (i + 1), 0.0, d, 0.0, 0.0, 0.0, a, V * (1 - d), 0.0, 0.0)
            for i, (a, d) in enumerate(zip(accs, lds))]


class TestDetectCollapse:
    def test_threshold_value(self):
        ev = detect_collapse(_rows([1.0], [0.95]), V)
        assert ev.diversity_threshold == pytest.approx(THRESH)
        assert THRESH == pytest.approx(0.88594, abs=1e-5)

    def test_sustained_tail_collapses(self):
        ev = detect_collapse(_rows([0.995] * 200, [0.95] * 200), V)
        assert ev.collapsed and ev.first_violation is None
        assert ev.window == (1810, 2000)

    def test_single_dip_in_tail_breaks_it(self):
        accs = [1.0] * 200
        accs[195] = 0.98
        ev = detect_collapse(_rows(accs, [0.95] * 200), V)
        assert not ev.collapsed
        assert ev.first_violation == 1960

    def test_dip_before_tail_is_ignored(self):
        accs = [1.0] * 200
        accs[100] = 0.1
        assert detect_collapse(_rows(accs, [0.95] * 200), V).collapsed

    def test_accuracy_without_diversity_loss_is_not_collapse(self):
        ev = detect_collapse(_rows([1.0] * 20, [0.5] * 20), V)
        assert not ev.collapsed
        assert ev.min_diversity_loss == 0.5

    def test_collapse_shaped_trajectory(self):
        # accuracy ramps to 1 and l_d climbs towards 1 while perplexity falls to ~1
        t = np.linspace(0, 1, 200)
        accs = np.minimum(1.0, 0.02 + 1.2 * t)
        lds = 0.3 + 0.69 * np.minimum(1.0, 1.5 * t)
        assert detect_collapse(_rows(accs, lds), V).collapsed

    def test_healthy_trajectory(self):
        t = np.linspace(0, 1, 200)
        ev = detect_collapse(_rows(0.6 * t, 0.4 + 0.0 * t), V)
        assert not ev.collapsed

    def test_accepts_mappings(self):
        rows = [{"step": "10", "mlm_acc": "1.0", "l_d": "0.99"}]
        assert detect_collapse(rows, V).collapsed

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            detect_collapse([], V)


class TestVariants:
    def test_beta0_differs_only_in_beta_and_alpha(self, tiny_cfg):
        variants = collapse_variants(tiny_cfg, [0.1, 0.5], steps=10)
        assert set(variants) == {"control", "beta0_alpha0.1", "beta0_alpha0.5",
                                 "removed_alpha0.1", "removed_alpha0.5"}
        notes = check_config_minimality(variants)
        assert any("only in beta" in n for n in notes)
        assert all(c.total_steps == 10 for c in variants.values())

    def test_minimality_violation(self, tiny_cfg):
        variants = collapse_variants(tiny_cfg, [0.1], steps=10)
        variants["beta0_alpha0.1"] = variants["beta0_alpha0.1"].replace(peak_lr=1.0)
        with pytest.raises(AssertionError, match="peak_lr"):
            check_config_minimality(variants)

    @pytest.mark.parametrize("splits", [[0], [5], []])
    def test_invalid_split(self, splits):
        with pytest.raises(ValueError):
            ablation_splits(4, splits)

    def test_splits_sorted_unique(self):
        assert ablation_splits(4, [3, 1, 3, 2]) == [1, 2, 3]


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_synthetic_corpus(4, (0.5, 0.7), 4, 0)


class TestHarness:
    def test_collapse_experiment_writes_outputs(self, tiny_cfg, tiny_corpus, tmp_path):
        rep = run_collapse_experiment(tiny_cfg, [0.1], steps=4, utts=tiny_corpus,
                                      out_dir=tmp_path, plots=True)
        assert set(rep.variants) == {"control", "beta0_alpha0.1", "removed_alpha0.1"}
        assert all(v.error is None and v.evidence is not None for v in rep.variants.values())
        assert rep.recheck()
        text = (tmp_path / "report.txt").read_text()
        assert "control" in text and "collapsed" in text
        rows = read_metrics(tmp_path / "metrics_control.csv")
        assert [r.step for r in rows] == [r.step for r in rep.variants["control"].rows]
        assert (tmp_path / "plot_l_d.svg").read_text().startswith("<svg")

    def test_ablation_is_reproducible(self, tiny_cfg, tiny_corpus, tmp_path):
        cfg = tiny_cfg.replace(total_steps=2, log_every=1)
        probe_utts = generate_synthetic_corpus(8, (0.5, 0.7), 4, 500)
        a = run_layer_ablation(2, [1, 2], cfg, tiny_corpus, probe_utts, out_dir=tmp_path / "a")
        b = run_layer_ablation(2, [1, 2], cfg, tiny_corpus, probe_utts, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "probe.csv").read_bytes() == (tmp_path / "b" / "probe.csv").read_bytes()
        assert a.variants["C2"].config.n_masked_layers == 0
        assert "probe acc" in a.table()
        assert a.to_text() == b.to_text()


def test_svg_has_one_line_per_series():
    svg = line_plot_svg({"a": _rows([0.1, 0.2], [0.3, 0.4]), "b": _rows([0.5], [0.5])}, "l_d", "x")
    assert svg.count("<polyline") == 2
