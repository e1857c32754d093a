import json

import numpy as np
import pytest

from panellasso.panel_lasso import PanelFit
from panellasso.panel_model import InvalidInputError, TrueModel
from panellasso.simulation import (
    ESTIMATORS,
    METRIC_COLUMNS,
    ExperimentConfig,
    compute_metrics,
    generate_covariates,
    generate_panel,
    generate_truth,
    ols_oracle,
    preset,
    run_experiment,
    support_positions,
)


def test_presets():
    a = preset("A")
    assert (a.n, a.t, a.p, a.s1, a.s2) == (10, 10, 25, 5, 2)
    assert a.error_dist == a.covariate_dist == "heavy_tailed"
    assert preset("B").s2 == 4 and preset("B").n == 100
    assert preset("C").t == 100
    for name in "DEF":
        assert preset(name).error_dist == "gaussian"
    g = preset("G")
    assert g.p == 250 and "ols_all" not in g.estimators
    i = preset("i")
    assert (i.s1, i.p, i.s2) == (10, 500, 2)
    assert all(preset(x).replications == 1000 and preset(x).rho == 0.75 for x in "ABCDEFGHI")
    with pytest.raises(InvalidInputError):
        preset("J")


def test_grid_ratio_default():
    assert preset("A").grid_ratio == 1e-3
    assert preset("I").grid_ratio == 1e-2
    assert preset("I").replace(bic_grid_ratio=0.05).grid_ratio == 0.05


def test_config_validation():
    base = preset("A").to_dict()
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_dict({**base, "replicatons": 5})
    for bad in ({"s1": 30}, {"s2": 11}, {"rho": 1.0}, {"replications": 0},
                {"error_dist": "cauchy"}, {"estimators": ["ridge"]}, {"estimators": ["adaptive"]},
                {"t_df": 2.0}, {"mse_mode": "median"}, {"bic_grid_ratio": 1.5}):
        with pytest.raises(InvalidInputError):
            ExperimentConfig.from_dict({**base, **bad})
    assert ExperimentConfig.from_dict(base) == preset("A")


def test_support_positions():
    np.testing.assert_array_equal(support_positions(25, 5), [0, 5, 10, 15, 20])
    assert support_positions(25, 0).size == 0
    t = generate_truth(preset("A").replace(s1=0))
    assert not np.any(t.beta_star)
    t = generate_truth(preset("B"))
    np.testing.assert_array_equal(t.support_c, [0, 1, 2, 3])


def test_independent_covariates():
    x = generate_covariates(100, 100, 3, 0.0, "gaussian", np.random.default_rng(0))
    c = np.corrcoef(x.T)
    assert np.abs(c[np.triu_indices(3, 1)]).max() <= 0.1


def test_toeplitz_correlation():
    x = generate_covariates(1000, 100, 2, 0.75, "gaussian", np.random.default_rng(1))
    assert np.corrcoef(x.T)[0, 1] == pytest.approx(0.75, abs=0.01)


def test_heavy_tailed_scaling_is_exact():
    # standardized t3: same stream divided by sqrt(df / (df - 2))
    x = generate_covariates(2, 3, 1, 0.0, "heavy_tailed", np.random.default_rng(5))
    ref = np.random.default_rng(5).standard_t(3.0, (6, 1)) / np.sqrt(3.0)
    np.testing.assert_allclose(x, ref, rtol=1e-15)


def test_heavy_tailed_variance():
    # t3 has no fourth moment, so the sample variance settles slowly: use NT = 1e6
    x = generate_covariates(1000, 1000, 1, 0.75, "heavy_tailed", np.random.default_rng(2))
    assert x.var() == pytest.approx(1.0, abs=0.1)


def test_error_variance_gaussian():
    cfg = preset("D").replace(n=100, t=100, p=1, s1=1)
    _, _, eps = generate_panel(cfg, 0)
    assert eps.var() == pytest.approx(1.0, abs=0.05)


def test_error_variance_heavy_tailed():
    cfg = preset("A").replace(n=1000, t=1000, p=1, s1=1)
    _, _, eps = generate_panel(cfg, 0)
    assert eps.var() == pytest.approx(1.0, abs=0.1)


def test_determinism():
    cfg = preset("A")
    a, _, ea = generate_panel(cfg, 17)
    b, _, eb = generate_panel(cfg, 17)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and np.array_equal(ea, eb)
    c, _, _ = generate_panel(cfg, 18)
    assert not np.array_equal(a.y, c.y)


def test_zero_noise_oracle_is_exact():
    data, truth, eps = generate_panel(preset("D"), 3, zero_noise=True)
    assert not np.any(eps)
    fit = ols_oracle(data, truth)
    np.testing.assert_allclose(fit.gamma_hat, truth.gamma_star, atol=1e-10)


def _fit(beta, c):
    return PanelFit(np.asarray(beta, float), np.asarray(c, float), None, 0.0, "lasso")


def test_metrics_exact_and_zero():
    tr = TrueModel([1.0, 0, 1.0], [1.0, 0])
    m = compute_metrics([_fit(tr.beta_star, tr.c_star)] * 3, [tr] * 3)
    assert m.row() == [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0]
    m = compute_metrics([_fit([0, 0, 0], [0, 0])] * 2, [tr] * 2)
    assert (m.sub_beta, m.spar_beta, m.avg_nnz_beta) == (0.0, 0.0, 0.0)


def test_metrics_hand_fixture():
    tr = TrueModel([1.0, 0, 0], [2.0, 0])
    fits = [_fit([1.0, 0, 0], [2.0, 0]),           # exact
            _fit([4.0, 4.0, 0], [2.0, 1.0]),       # superset: err beta 5, err c 1
            _fit([0, 0, 0], [0, 0])]               # empty: err beta 1, err c 2
    m = compute_metrics(fits, [tr] * 3)
    assert m.mse_beta == pytest.approx((0 + 5 + 1) / 3)
    assert m.mse_c == pytest.approx((0 + 1 + 2) / 3)
    assert m.sub_beta == pytest.approx(2 / 3) and m.spar_beta == pytest.approx(1 / 3)
    assert m.sub_c == pytest.approx(2 / 3) and m.spar_c == pytest.approx(1 / 3)
    assert m.avg_nnz_beta == pytest.approx(1.0) and m.avg_nnz_c == pytest.approx(1.0)
    rms = compute_metrics(fits, [tr] * 3, "root_mean_square")
    assert rms.mse_beta == pytest.approx(np.sqrt((0 + 25 + 1) / 3))
    with pytest.raises(InvalidInputError):
        compute_metrics([], [])


def test_single_replication_report():
    cfg = preset("F").replace(replications=1, diagnostics=False)
    res = run_experiment(cfg)
    rep = res.replications[0]
    for name in cfg.estimators:
        single = compute_metrics([rep.fits[name]], [rep.truth])
        assert res.report.estimators[name].row() == single.row()


def test_report_invariants_and_threads():
    cfg = preset("A").replace(replications=12)
    one = run_experiment(cfg)
    three = run_experiment(cfg, threads=3)
    assert one.report.to_csv() == three.report.to_csv()
    for m in one.report.estimators.values():
        assert m.spar_beta <= m.sub_beta and m.spar_c <= m.sub_c
        assert all(0 <= v <= 1 for v in (m.sub_beta, m.sub_c, m.spar_beta, m.spar_c))
    assert 0 <= one.report.event_a_rate <= 1
    header = one.report.to_csv().splitlines()[0].split(",")
    assert header == ["estimator", *METRIC_COLUMNS]


def test_infeasible_ols_recorded_blank():
    cfg = preset("G").replace(replications=2, estimators=list(ESTIMATORS), diagnostics=False)
    res = run_experiment(cfg)
    assert res.report.estimators["ols_all"] is None
    assert res.report.failures["ols_all"] == 2
    row = [r for r in res.report.to_csv().splitlines() if r.startswith("OLSA")][0]
    assert row == "OLSA" + "," * len(METRIC_COLUMNS)
    assert all("infeasible" in r.errors["ols_all"] for r in res.replications)


def test_jsonl_fields(tmp_path):
    res = run_experiment(preset("F").replace(replications=3))
    path = tmp_path / "log.jsonl"
    with path.open("w") as fh:
        res.write_jsonl(fh)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == 3 * len(res.config.estimators)
    needed = {"replication", "estimator", "mse_beta", "mse_c", "nnz_beta", "nnz_c", "sub_beta",
              "sub_c", "spar_beta", "spar_c", "event_a", "cone_ok", "kappa_real", "bound_ok"}
    assert needed <= set(recs[0])


def test_diagnostics_lemma_implication():
    res = run_experiment(preset("D").replace(replications=20, estimators=["lasso"]))
    for r in res.replications:
        d = r.diagnostics
        if d["event_a"]:
            assert d["iq1_ok"] and d["iq2_ok"] and d["cone_ok"]
            assert d["bound_ok"] in (True, None)
        assert d["objective_certificate"]
