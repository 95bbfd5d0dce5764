import math

import pytest
from scipy import stats

from agetoken import simharness
from agetoken.errors import MalformedError
from agetoken.simharness import ScenarioReport, binomial_summary, default_config, run_scenario


def test_binomial_summary_matches_hand_computation():
    s = binomial_summary(40, 500, 1 / 16)
    sigma = math.sqrt((1 / 16) * (15 / 16) / 500)
    assert s["sigma"] == round(sigma, 6)
    assert s["z"] == round((40 / 500 - 1 / 16) / sigma, 4)
    assert s["p_value"] == round(stats.binomtest(40, 500, 1 / 16).pvalue, 6)
    assert s["ci_low"] < 40 / 500 < s["ci_high"]


def test_declared_sample_sizes_have_power():
    # two-sided test at alpha=0.01 against 2x chance
    assert binomial_summary(31, 500, 1 / 16)["power_vs_2x_chance"] >= 0.9
    assert binomial_summary(250, 500, 1 / 2)["power_vs_2x_chance"] >= 0.9


def test_config_validation():
    with pytest.raises(MalformedError):
        default_config("unlinkability", clients=0).validate()
    with pytest.raises(KeyError):
        run_scenario("nope")


def test_unlinkability_deterministic_and_at_chance():
    cfg = default_config("unlinkability", clients=8, trials=40, seed=5)
    a, b = run_scenario("unlinkability", cfg), run_scenario("unlinkability", cfg)
    assert a.to_json() == b.to_json()
    assert a.passed and a.metrics["within_3_sigma"]
    assert a.metrics["unblinded_control_accuracy"] == 1.0
    per = a.metrics["per_adversary_accuracy"]
    chance = 1 / 8
    n = a.metrics["guesses"]
    for acc in per.values():
        assert abs(acc - chance) <= 3 * math.sqrt(chance * (1 - chance) / n)


def test_unlinkability_origin_only_adversary():
    cfg = default_config("unlinkability", clients=4, trials=50, collude_issuer_origin=False)
    r = run_scenario("unlinkability", cfg)
    assert r.metrics["primary_adversary"] == "origin-only-uniform" and r.passed


def test_unlinkability_single_client_is_degenerate():
    r = run_scenario("unlinkability", default_config("unlinkability", clients=1, trials=10))
    assert r.metrics["linking_accuracy"] == 1.0
    assert not r.passed and any("degenerate" in n for n in r.notes)


@pytest.mark.parametrize("interval,expected", [(None, 2.0), (0.0, 1.0), (2.0, 1.0)])
def test_double_spend_modes(interval, expected):
    r = run_scenario("double-spend", default_config("double-spend", tokens_per_client=20,
                                                     sync_interval=interval, latency_intervals=()))
    assert r.metrics["grants_per_token"] == expected and r.passed


def test_double_spend_single_origin():
    r = run_scenario("double-spend", default_config("double-spend", origins=1, tokens_per_client=10))
    assert r.metrics["grants_per_token"] == 1.0 and r.passed


def test_double_spend_latency_curve_is_reported():
    r = run_scenario("double-spend", default_config("double-spend", tokens_per_client=10,
                                                     latency_intervals=(None, 0.0, 5.0)))
    curve = r.metrics["latency_curve"]
    assert curve["off"]["grants_per_token"] == 2.0 and curve["instant"]["grants_per_token"] == 1.0
    assert 1.0 <= curve["5s"]["grants_per_token"] <= 2.0


def test_spacing_within_interval_has_no_expectation():
    r = run_scenario("double-spend", default_config("double-spend", tokens_per_client=10, sync_interval=5.0,
                                                     spend_spacing=1.0, latency_intervals=()))
    assert r.thresholds["expected_grants_per_token"] is None and r.notes


def test_issuer_hiding_without_exchange_reveals_issuer():
    r = run_scenario("issuer-hiding", default_config("issuer-hiding", exchange=False, trials=50))
    assert r.metrics["accuracy"] == 1.0 and r.passed


def test_issuer_hiding_four_sources():
    r = run_scenario("issuer-hiding", default_config("issuer-hiding", issuers=4, trials=120))
    assert r.metrics["chance"] == 0.25 and r.metrics["within_3_sigma"] and r.passed
    assert r.metrics["source_key_id_occurrences_in_origin_transcript"] == 0


def test_token_transfer():
    r = run_scenario("token-transfer", default_config("token-transfer", trials=5))
    assert r.passed
    assert r.metrics["delayed_rejection_reasons"] == {"context-expired": 5}


def test_http_transport_matches_local():
    cfg = default_config("unlinkability", clients=4, trials=5, seed=9)
    assert run_scenario("unlinkability", cfg, "http").to_json() == run_scenario("unlinkability", cfg).to_json()
    cfg = default_config("double-spend", tokens_per_client=5, sync_interval=1.0, latency_intervals=())
    assert run_scenario("double-spend", cfg, "http").to_json() == run_scenario("double-spend", cfg).to_json()


def test_report_file_round_trip(tmp_path):
    r = run_scenario("token-transfer", default_config("token-transfer", trials=2))
    path = tmp_path / "r.jsonl"
    simharness.write_reports(path, [r, r])
    back = simharness.read_reports(path)
    assert back == [r, r] and isinstance(back[0], ScenarioReport)
    table = simharness.render_table(back)
    assert table.splitlines()[0].startswith("scenario") and "PASS" in table
    assert r.version and r.config["seed"] == 0 and r.thresholds
