"""Collapse and layer-split experiments built on the trainer and the probe."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .audio import SyntheticUtterance
from .config import TrainConfig
from .probe import ProbeResult, train_probe
from .trainer import MetricsRow, corpus_features, run_pretraining, write_metrics

log = logging.getLogger(__name__)

ACC_THRESHOLD = 0.99
LD_FRACTION = 0.9
TAIL_FRACTION = 0.1


# ------------------------------------------------------------ collapse rule

@dataclass
class CollapseEvidence:
    collapsed: bool
    window: tuple[int, int]          # first and last step of the inspected tail
    min_accuracy: float
    min_diversity_loss: float
    diversity_threshold: float
    first_violation: int | None      # step of the first tail row failing the rule

    def describe(self) -> str:
        verdict = "collapsed" if self.collapsed else "not collapsed"
        detail = (f"steps {self.window[0]}-{self.window[1]}: min mlm_acc {self.min_accuracy:.4f}, "
                  f"min l_d {self.min_diversity_loss:.4f} (threshold {self.diversity_threshold:.4f})")
        if self.first_violation is not None:
            detail += f", first failing step {self.first_violation}"
        return f"{verdict}; {detail}"


def _field(row, name):
    return getattr(row, name) if not isinstance(row, dict) else float(row[name])


def detect_collapse(rows: Sequence, codebook_size: int) -> CollapseEvidence:
    """Collapsed when every row in the last 10% of steps has mlm_acc >= 0.99 and l_d >= 0.9 (V-1)/V.

    ``rows`` are MetricsRow objects or mappings with ``step``, ``mlm_acc`` and
    ``l_d``.  The tail holds the rows whose step is past 90% of the final step
    (always at least the final row).
    """
    if len(rows) == 0:
        raise ValueError("empty metrics trajectory")
    last = int(_field(rows[-1], "step"))
    cut = last - max(1, math.ceil(TAIL_FRACTION * last))
    tail = [r for r in rows if int(_field(r, "step")) > cut] or [rows[-1]]
    threshold = LD_FRACTION * (codebook_size - 1) / codebook_size
    accs = [float(_field(r, "mlm_acc")) for r in tail]
    lds = [float(_field(r, "l_d")) for r in tail]
    bad = [int(_field(r, "step")) for r, a, d in zip(tail, accs, lds)
           if not (a >= ACC_THRESHOLD and d >= threshold)]
    return CollapseEvidence(
        collapsed=not bad,
        window=(int(_field(tail[0], "step")), last),
        min_accuracy=min(accs),
        min_diversity_loss=min(lds),
        diversity_threshold=threshold,
        first_violation=bad[0] if bad else None,
    )


# ------------------------------------------------------------------ reports

@dataclass
class VariantResult:
    name: str
    config: TrainConfig
    rows: list[MetricsRow] = field(default_factory=list)
    evidence: CollapseEvidence | None = None
    probe: ProbeResult | None = None
    error: str | None = None

    @property
    def final(self) -> MetricsRow | None:
        return self.rows[-1] if self.rows else None


@dataclass
class ExperimentReport:
    name: str
    config_digest: str
    variants: dict[str, VariantResult]
    notes: list[str] = field(default_factory=list)
    paths: dict[str, Path] = field(default_factory=dict)

    def verdicts(self) -> dict[str, dict]:
        out = {}
        for name, v in self.variants.items():
            f = v.final
            out[name] = {
                "collapsed": v.evidence.collapsed if v.evidence else None,
                "final_perplexity": f.codebook_perplexity if f else None,
                "final_mlm_accuracy": f.mlm_acc if f else None,
                "error": v.error,
            }
        return out

    def recheck(self) -> bool:
        """True when every stored verdict is reproduced from its stored trajectory."""
        for v in self.variants.values():
            if v.evidence is None:
                continue
            again = detect_collapse(v.rows, v.config.codebook_size)
            if again != v.evidence:
                return False
        return True

    def table(self) -> str:
        if any(v.probe is not None for v in self.variants.values()):
            return _ablation_table(self)
        return _collapse_table(self)

    def to_text(self) -> str:
        lines = [f"experiment: {self.name}", f"config digest: {self.config_digest}", "", self.table()]
        if self.notes:
            lines += [""] + [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, plots: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, v in self.variants.items():
            p = out / f"metrics_{name}.csv"
            write_metrics(p, v.rows)
            self.paths[f"metrics_{name}"] = p
            (out / f"config_{name}.txt").write_text(v.config.to_text(), encoding="utf-8")
        if any(v.probe is not None for v in self.variants.values()):
            self.paths["probe"] = _write_probe_csv(out / "probe.csv", self)
        if plots:
            for key, label in (("l_m", "MLM loss"), ("mlm_acc", "MLM accuracy"), ("l_d", "diversity loss")):
                p = out / f"plot_{key}.svg"
                p.write_text(line_plot_svg({n: v.rows for n, v in self.variants.items()}, key, label),
                             encoding="utf-8")
                self.paths[f"plot_{key}"] = p
        report = out / "report.txt"
        report.write_text(self.to_text(), encoding="utf-8")
        self.paths["report"] = report
        return report


def _collapse_table(rep: ExperimentReport) -> str:
    head = f"{'variant':<22}{'beta':>6}{'alpha':>7}{'removed':>9}{'collapsed':>11}{'ppl':>9}{'mlm_acc':>9}{'l_d':>8}"
    lines = [head, "-" * len(head)]
    for name, v in rep.variants.items():
        c, f = v.config, v.final
        if v.error:
            lines.append(f"{name:<22}{c.beta:>6g}{c.alpha:>7g}{str(c.remove_contrastive_module):>9}  failed: {v.error}")
            continue
        lines.append(f"{name:<22}{c.beta:>6g}{c.alpha:>7g}{str(c.remove_contrastive_module):>9}"
                     f"{str(v.evidence.collapsed):>11}{f.codebook_perplexity:>9.2f}{f.mlm_acc:>9.3f}{f.l_d:>8.3f}")
    lines.append("")
    for name, v in rep.variants.items():
        if v.evidence:
            lines.append(f"{name}: {v.evidence.describe()}")
    return "\n".join(lines)


def _ablation_table(rep: ExperimentReport) -> str:
    head = f"{'split':<8}{'N':>4}{'M':>4}{'final l_p':>11}{'probe acc':>11}{'random-init':>13}{'gain':>8}"
    lines = [head, "-" * len(head)]
    for name, v in rep.variants.items():
        c = v.config
        if v.error:
            lines.append(f"{name:<8}{c.n_contrastive_layers:>4}{c.n_masked_layers:>4}  failed: {v.error}")
            continue
        p = v.probe
        lines.append(f"{name:<8}{c.n_contrastive_layers:>4}{c.n_masked_layers:>4}{v.final.l_p:>11.4f}"
                     f"{p.frame_accuracy:>11.4f}{p.baseline_accuracy:>13.4f}{p.gain:>8.4f}")
    return "\n".join(lines)


def _write_probe_csv(path: Path, rep: ExperimentReport) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "n_contrastive_layers", "n_masked_layers", "frame_accuracy",
                    "baseline_accuracy", "n_train_frames", "n_eval_frames"])
        for name, v in rep.variants.items():
            if v.probe is None:
                continue
            p = v.probe
            w.writerow([name, v.config.n_contrastive_layers, v.config.n_masked_layers,
                        repr(p.frame_accuracy), repr(p.baseline_accuracy), p.n_train_frames, p.n_eval_frames])
    return path


def line_plot_svg(series: dict[str, list[MetricsRow]], key: str, title: str,
                  width: int = 480, height: int = 300) -> str:
    """Minimal dependency-free SVG line chart of one metric per variant."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    pts = {n: [(r.step, float(getattr(r, key))) for r in rows] for n, rows in series.items() if rows}
    xs = [x for p in pts.values() for x, _ in p] or [0, 1]
    ys = [y for p in pts.values() for _, y in p] or [0, 1]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1
    m = 40

    def sx(x):
        return m + (x - x0) / (x1 - x0) * (width - 2 * m)

    def sy(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
           f'<text x="{m}" y="{height - m + 15}" font-size="10">{x0}</text>',
           f'<text x="{width - m}" y="{height - m + 15}" font-size="10" text-anchor="end">{x1}</text>',
           f'<text x="{m - 4}" y="{height - m}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{m - 4}" y="{m + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (name, p) in enumerate(pts.items()):
        c = colors[i % len(colors)]
        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in p)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{poly}"/>')
        out.append(f'<text x="{width - m}" y="{m + 14 * i}" font-size="10" fill="{c}" text-anchor="end">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -------------------------------------------------------------- experiments

def collapse_variants(base: TrainConfig, alphas: Sequence[float], steps: int,
                      include_removal: bool = True) -> dict[str, TrainConfig]:
    """The full-model control, a beta = 0 run per alpha, and optionally a layer-removal run per alpha."""
    control = base.replace(total_steps=steps)
    out = {"control": control}
    for a in alphas:
        out[f"beta0_alpha{a:g}"] = control.replace(beta=0.0, alpha=float(a))
    if include_removal:
        for a in alphas:
            out[f"removed_alpha{a:g}"] = control.replace(remove_contrastive_module=True, alpha=float(a))
    return out


def check_config_minimality(variants: dict[str, TrainConfig]) -> list[str]:
    """Each beta = 0 variant must differ from the control only in beta (and alpha, when swept)."""
    control = variants["control"]
    notes = []
    for name, cfg in variants.items():
        if not name.startswith("beta0"):
            continue
        diff = set(control.diff(cfg))
        allowed = {"beta"} if cfg.alpha == control.alpha else {"beta", "alpha"}
        if diff != allowed:
            raise AssertionError(f"{name} differs from the control in {sorted(diff)}, expected {sorted(allowed)}")
        notes.append(f"{name} differs from control only in {', '.join(sorted(diff))}")
    return notes


def _run_variant(name: str, cfg: TrainConfig, features, on_row):
    res = VariantResult(name, cfg)
    state = None
    log.info("running variant %s", name)
    try:
        state, res.rows = run_pretraining(cfg, features,
                                          on_row=(lambda r: on_row(name, r)) if on_row else None)
    except Exception as exc:  # one failing variant must not stop the others
        res.error = f"{type(exc).__name__}: {exc}"
        log.error("variant %s failed: %s", name, res.error)
    return res, state


def run_collapse_experiment(base_cfg: TrainConfig, alphas: Sequence[float], steps: int,
                            utts: Sequence[SyntheticUtterance], *, include_removal: bool = True,
                            out_dir=None, plots: bool = False,
                            on_row: Callable[[str, MetricsRow], None] | None = None) -> ExperimentReport:
    if steps < 1:
        raise ValueError("steps must be positive")
    configs = collapse_variants(base_cfg, alphas, steps, include_removal)
    notes = check_config_minimality(configs)
    feats = corpus_features(utts)
    results = {name: _run_variant(name, c, feats, on_row)[0] for name, c in configs.items()}
    for v in results.values():
        if v.rows:
            v.evidence = detect_collapse(v.rows, v.config.codebook_size)
    rep = ExperimentReport("collapse", configs["control"].digest(), results, notes)
    if out_dir is not None:
        rep.write(out_dir, plots)
    return rep


def ablation_splits(total_layers: int, splits: Sequence[int]) -> list[int]:
    if total_layers < 1:
        raise ValueError("total_layers must be >= 1")
    bad = [n for n in splits if not 1 <= n <= total_layers]
    if bad or not splits:
        raise ValueError(f"splits must lie in [1, {total_layers}], got {list(splits)}")
    return sorted(set(int(n) for n in splits))


def run_layer_ablation(total_layers: int, splits: Sequence[int], cfg: TrainConfig,
                       utts: Sequence[SyntheticUtterance], probe_utts: Sequence[SyntheticUtterance], *,
                       out_dir=None, plots: bool = False, probe_seed: int | None = None,
                       on_row: Callable[[str, MetricsRow], None] | None = None) -> ExperimentReport:
    """Pretrain C_n for every split n (n contrastive blocks, total - n masked blocks) and probe each."""
    splits = ablation_splits(total_layers, splits)
    configs = {f"C{n}": cfg.replace(n_contrastive_layers=n, n_masked_layers=total_layers - n,
                                    remove_contrastive_module=False) for n in splits}
    feats = corpus_features(utts)
    results = {}
    for name, c in configs.items():
        res, state = _run_variant(name, c, feats, on_row)
        if state is not None:
            res.probe = train_probe(state.model, probe_utts, probe_seed if probe_seed is not None else c.seed)
        results[name] = res
    rep = ExperimentReport("layer_ablation", cfg.digest(), results,
                           [f"total conformer blocks fixed at {total_layers}"])
    if out_dir is not None:
        rep.write(out_dir, plots)
    return rep

