import logging

import numpy as np
import pytest

from fuzzyalign.config import AlignmentConfig, ScenarioConfig, TrainingConfig
from fuzzyalign.errors import Diverged
from fuzzyalign.synthetic import generate
from fuzzyalign.train import (
    gate_analysis,
    membership_analysis,
    params_from_json,
    params_to_json,
    run_experiment,
    train,
)

SEPARABLE = dict(num_identities=16, text_noise_scale=0.05, ground_noise_scale=0.05, aerial_noise_scale=0.1,
                 token_dropout_prob=0.0, altitude_spread=0.0)


def test_baseline_learns_separable_world():
    w = generate(ScenarioConfig(**SEPARABLE))
    r = run_experiment(w, "baseline_sdm", AlignmentConfig(), TrainingConfig(steps=60, batch_size=8))
    assert r.trace[-1]["loss"] < r.trace[0]["loss"]
    assert r.report.rank1 == 100.0


@pytest.mark.parametrize("variant", ["baseline_sdm", "cda", "cda_fta", "fta_unweighted"])
def test_every_variant_trains_and_is_deterministic(variant):
    w = generate(ScenarioConfig(num_identities=20))
    cfg = (AlignmentConfig(), TrainingConfig(steps=5, batch_size=6))
    a, b = run_experiment(w, variant, *cfg), run_experiment(w, variant, *cfg)
    assert a.trace_jsonl() == b.trace_jsonl()
    assert a.report == b.report
    assert all(np.isfinite(r["loss"]) for r in a.trace)
    if variant in ("cda_fta", "fta_unweighted"):
        assert "fta" in a.trace[0]


def test_cda_without_ground_falls_back_and_logs(caplog):
    w = generate(ScenarioConfig(num_identities=20, include_ground=False))
    cfg = (AlignmentConfig(), TrainingConfig(steps=5, batch_size=6))
    with caplog.at_level(logging.WARNING, logger="fuzzyalign"):
        cda = run_experiment(w, "cda", *cfg)
    assert "degenerates" in caplog.text
    base = run_experiment(w, "baseline_sdm", *cfg)
    assert [r["loss"] for r in cda.trace] == [r["loss"] for r in base.trace]


def test_divergence_reports_last_finite_step():
    w = generate(ScenarioConfig(num_identities=10))
    w.text.features[:] = np.nan
    with pytest.raises(Diverged) as info:
        train(w, "baseline_sdm", AlignmentConfig(), TrainingConfig(steps=3, batch_size=4))
    assert info.value.step == 0 and info.value.last_finite_step == -1


def test_checkpoint_round_trip():
    w = generate(ScenarioConfig(num_identities=10))
    params, _ = train(w, "cda_fta", AlignmentConfig(), TrainingConfig(steps=2, batch_size=4))
    back, meta = params_from_json(params_to_json(params, {"variant": "cda_fta"}))
    assert meta == {"variant": "cda_fta"}
    assert set(back) == set(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)


def test_identical_modalities_give_half_gates():
    w = generate(ScenarioConfig(num_identities=10))
    for m in (w.text, w.aerial, w.ground):
        m.features[:] = w.prototypes[m.ids]
    d = w.dim
    params = {f"proj.{m}": np.eye(d) for m in ("text", "aerial", "ground")}
    g = gate_analysis(params, w, AlignmentConfig())
    assert np.allclose(g["delta"], 0.0, atol=1e-15)
    assert np.allclose(g["alpha"], 0.5, atol=1e-15)


def test_gate_and_membership_track_aerial_difficulty():
    """Over 10 paired seeds: hard aerial samples get lower alpha; heavily masked ones lower mu_a."""
    alpha_hard, alpha_easy, mu_masked, mu_clear = [], [], [], []
    for seed in range(10):
        w = generate(ScenarioConfig(seed=seed))
        align = AlignmentConfig(seed=seed)
        params, _ = train(w, "cda_fta", align, TrainingConfig(seed=seed))
        g = gate_analysis(params, w, align)
        rows = g["aerial_rows"]
        quality = np.einsum("ij,ij->i", w.aerial.features[rows], w.prototypes[w.aerial.ids[rows]])
        hard = quality < np.median(quality)
        alpha_hard.append(g["alpha"][hard].mean())
        alpha_easy.append(g["alpha"][~hard].mean())
        m = membership_analysis(params, w)
        drop = w.dropout_fraction()[m["aerial_rows"]]
        mu = m["mu_a"].mean(axis=1)
        mu_masked.append(mu[drop >= 0.75].mean())
        mu_clear.append(mu[drop <= 0.25].mean())
    assert np.mean(alpha_hard) < np.mean(alpha_easy)
    assert np.mean(mu_masked) < np.mean(mu_clear)
