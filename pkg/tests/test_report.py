import pytest

from dhglm.report import (COMPARISON_COLUMNS, SUMMARY_COLUMNS, ParameterSummary, ReportError, all_passed, compare,
                          comparison_csv, comparison_text, default_tolerance, read_summary_csv, summary_csv,
                          summary_text)

# Reference negative binomial summaries: AMIS and MCMC columns (mean, sd, 95% interval)
TABLE3_AMIS = [
    ParameterSummary("beta0", 0.9932, 0.0507, 0.8941, 1.0921, 1.0),
    ParameterSummary("beta1", 0.2505, 0.0033, 0.2439, 0.2570, 0.25),
    ParameterSummary("gamma0", -0.0255, 0.1097, -0.2405, 0.1896, 0.0),
    ParameterSummary("gamma1", 4.8594, 0.2329, 4.4211, 5.3339, 5.0),
]
TABLE3_MCMC = [
    ParameterSummary("beta0", 0.9933, 0.0507, 0.8941, 1.0922, 1.0),
    ParameterSummary("beta1", 0.2505, 0.0033, 0.2439, 0.2570, 0.25),
    ParameterSummary("gamma0", -0.0263, 0.1100, -0.2423, 0.1887, 0.0),
    ParameterSummary("gamma1", 4.8568, 0.2341, 4.4129, 5.3276, 5.0),
]


def test_identical_summaries_all_pass():
    rows = compare(TABLE3_AMIS, TABLE3_AMIS)
    assert all_passed(rows)
    assert all(r.abs_diff == 0 and r.sd_ratio == 1 for r in rows)


def test_table3_columns_agree():
    rows = compare(TABLE3_AMIS, TABLE3_MCMC, tolerances=0.05)
    worst = max(rows, key=lambda r: r.abs_diff)
    assert worst.parameter == "gamma1"
    assert worst.abs_diff == pytest.approx(0.0026, abs=1e-12)
    assert all_passed(rows)


def test_perturbed_mean_fails_that_row_only():
    shifted = [ParameterSummary(s.parameter, s.mean + (1.0 if s.parameter == "beta1" else 0.0), s.sd,
                                s.lower, s.upper, s.true) for s in TABLE3_MCMC]
    rows = compare(TABLE3_AMIS, shifted)
    assert [r.parameter for r in rows if not r.passed] == ["beta1"]


def test_parameter_mismatch():
    with pytest.raises(ReportError, match="only in first \\['gamma1'\\]"):
        compare(TABLE3_AMIS, TABLE3_MCMC[:3])


def test_default_tolerance_rule():
    assert default_tolerance(0.01, 0.01) == 0.05
    assert default_tolerance(0.3, 0.4) == pytest.approx(0.5 * ((0.09 + 0.16) / 2) ** 0.5)


def test_per_parameter_tolerances():
    rows = compare(TABLE3_AMIS, TABLE3_MCMC, tolerances={"gamma1": 0.001})
    assert [r.parameter for r in rows if not r.passed] == ["gamma1"]


def test_summary_csv_round_trip(tmp_path):
    rows = TABLE3_AMIS + [ParameterSummary("tau_u", 1.9, 1.1, 0.32, 4.79)]
    text = summary_csv(rows)
    assert text.splitlines()[0] == ",".join(SUMMARY_COLUMNS)
    assert read_summary_csv(text) == rows
    p = tmp_path / "s.csv"
    p.write_text(text)
    assert read_summary_csv(p) == rows


def test_bad_summary_header():
    with pytest.raises(ReportError, match="header"):
        read_summary_csv("a,b\n1,2\n")


def test_text_tables():
    text = summary_text(TABLE3_AMIS, title="NB")
    lines = text.splitlines()
    assert lines[0] == "NB"
    assert lines[1].split() == list(SUMMARY_COLUMNS)
    assert len(lines) == 3 + len(TABLE3_AMIS)
    cmp_lines = comparison_text(compare(TABLE3_AMIS, TABLE3_MCMC), ("amis", "mcmc")).splitlines()
    assert cmp_lines[0].split()[1:3] == ["mean_amis", "mean_mcmc"]
    assert comparison_csv(compare(TABLE3_AMIS, TABLE3_MCMC)).splitlines()[0] == ",".join(COMPARISON_COLUMNS)


def test_covers_truth():
    assert TABLE3_AMIS[3].covers_truth()
    assert not ParameterSummary("a", 0, 1, -1, 1).covers_truth()
