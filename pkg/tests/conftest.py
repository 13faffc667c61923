import numpy as np
import pytest

from w2vbert.config import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small float64 model for fast end-to-end tests."""
    return TrainConfig().replace(model_dim=8, n_heads=2, conv_kernel=3, n_contrastive_layers=1,
                                 n_masked_layers=1, ffn_expansion=2, encoder_channels=2,
                                 codebook_size=8, code_dim=8, n_distractors=3, batch_size=2,
                                 corpus_utts=4, corpus_min_s=0.5, corpus_max_s=0.7,
                                 warmup_steps=5, total_steps=6, log_every=2, checkpoint_every=3,
                                 dtype="float64")



def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    crit = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            name = nodeid.split("::test_criterion_")[1].split("[")[0]
            number, label = int(name[:2]), name[3:].replace("_", " ")
            entry = crit.setdefault(number, {"label": label, "ok": True, "details": []})
            entry["ok"] &= outcome == "passed"
            detail = dict(rep.user_properties).get("detail")
            if detail and detail not in entry["details"]:
                entry["details"].append(detail)
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(crit):
        e = crit[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}  "
                                    f"{e['label']}: " + " | ".join(e["details"]))
