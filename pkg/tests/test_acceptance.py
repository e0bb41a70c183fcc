"""Acceptance suite: one test and one printed pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` or as a script.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from incrt import verify
from incrt.cli import ExperimentConfig, execute
from incrt.spectra import decay_rate, predict_head_count

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _fmt(c):
    extra = {k: v for k, v in c.detail.items() if not isinstance(v, (list, dict)) or len(str(v)) < 80}
    return f"{c.name}: value={c.value:.6g} ({c.bound}) {json.dumps(verify._jsonable(extra))}"


def test_c01_gate_convergence(report):
    c = verify.gate_convergence(n_seeds=100, d=16)
    assert report("C01", c.passed, _fmt(c))


def test_c02_moving_target(report):
    c = verify.moving_target()
    assert report("C02", c.passed, _fmt(c))


def test_c03_deflation_identities(report):
    c = verify.deflation_identities(n_ops=50, tol=1e-6)
    assert report("C03", c.passed, _fmt(c))


def test_c04_lyapunov_stationary(report):
    c = verify.lyapunov_stationary()
    assert report("C04", c.passed, _fmt(c))


def test_c05_stopping_configuration(report):
    c = verify.stopping_configuration()
    assert report("C05", c.passed, _fmt(c))


def test_c06_decay_envelope(report):
    c = verify.decay_envelope_check(n_ops=20)
    ok = c.passed and round(decay_rate(9.1), 3) == 0.988
    assert report("C06", ok, _fmt(c))


def test_c07_head_count_law(report):
    law = predict_head_count(11.91, 2.5, 1.0) == 130 and predict_head_count(9.1, 10.0, 1.0) == 191
    c = verify.online_vs_oracle(dims=(16, 32, 64), seeds=(0, 1))
    ok = law and c.passed
    detail = f"K(11.91, 2.5)={predict_head_count(11.91, 2.5, 1.0)}, K(9.1, 10)={predict_head_count(9.1, 10.0, 1.0)}; " + _fmt(c)
    assert report("C07", ok, detail)


def test_c08_threshold_robustness(report):
    table = verify.threshold_sweep((0.2, 0.4, 0.6), seeds=range(5), d=32)
    ratios = [r["K_obs_over_K_pred"] for r in table["rows"]]
    ok = all(np.isfinite(x) and 0.85 <= x <= 1.10 for x in ratios)
    detail = "K_obs/K_pred by theta ratio " + ", ".join(
        f"{r['ratio']}: {r['K_obs_over_K_pred']:.3f} (K_pred {r['K_pred']:.1f}, K_obs {r['K_obs_mean']:.1f})" for r in table["rows"]
    ) + " (band [0.85, 1.10])"
    assert report("C08", ok, detail)


def test_c09_pruning_under_shift(report):
    c = verify.pruning_under_shift()
    assert report("C09", c.passed, _fmt(c) + f" counts={c.detail['counts']}")


def test_c10_ntk_alignment(report):
    c = verify.ntk_check(draws=32)
    detail = _fmt(c) + " cos_by_eps=" + ", ".join(f"{x:.4f}" for x in c.detail["cosine_by_eps"])
    assert report("C10", c.passed, detail)


def test_c11_gradients(report):
    c = verify.gradient_check(d=8, n=5, heads=3)
    assert report("C11", c.passed, _fmt(c))


def test_c12_preservation(report):
    c = verify.preservation_check(deltas=(1e-2, 1e-3))
    assert report("C12", c.passed, _fmt(c))


def test_c13_sequence_end_to_end(report, tmp_path):
    cfg = ExperimentConfig.load(str(CONFIGS / "sequence.json"))
    t0 = time.perf_counter()
    summary = execute(cfg, str(tmp_path))
    elapsed = time.perf_counter() - t0
    total = summary["steps"]
    events = [json.loads(line) for line in (tmp_path / "events.jsonl").read_text().splitlines() if line.strip()]
    late = [e for e in events if e["kind"] == "growth" and e["step"] >= 0.8 * total]
    ok = summary["final_acc"] >= 0.95 and not late and elapsed < 600
    detail = (
        f"val acc={summary['final_acc']:.3f} heads={summary['final_heads']} growths={summary['growths']} "
        f"late growths={len(late)} time={elapsed:.1f}s"
    )
    assert report("C13", ok, detail)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
