import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hedgelab import marketdata as md
from hedgelab import diffcore as dc
from hedgelab.synthetic import bs_option_chain, gbm_ohlc_panel
from oracles import inclusion_probabilities

HEADER = "date,asset,open,high,low,close,market_value\n"


def _write(tmp_path, body, name="ohlc.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


def test_ingest_complete(tmp_path):
    body = "".join(
        f"2024-01-0{d},{a},100,101,99,100.5,{mv}\n" for d in (2, 3, 4) for a, mv in (("X", 5), ("Y", 7))
    )
    panel = md.ingest_ohlc(_write(tmp_path, body))
    assert panel.assets == ["X", "Y"]
    assert panel.close.shape == (2, 3)
    assert not np.isnan(panel.close).any()


def test_ingest_suspended_day(tmp_path):
    body = (
        "2024-01-02,X,100,101,99,100,5\n2024-01-02,Y,50,51,49,50,3\n"
        "2024-01-03,X,100,101,99,100,5\n"
        "2024-01-04,X,100,101,99,100,5\n2024-01-04,Y,50,51,49,50,3\n"
    )
    panel = md.ingest_ohlc(_write(tmp_path, body))
    assert np.isnan(panel.close[1, 1])
    assert np.isnan(panel.open[1, 1])
    assert np.count_nonzero(np.isnan(panel.close)) == 1


def test_ingest_empty_cell_is_missing(tmp_path):
    panel = md.ingest_ohlc(_write(tmp_path, "2024-01-02,X,,101,99,100,5\n2024-01-03,X,100,101,99,100,5\n"))
    assert np.isnan(panel.open[0, 0]) and panel.close[0, 0] == 100


def test_ingest_duplicate(tmp_path):
    body = "2024-01-02,X,100,101,99,100,5\n2024-01-02,X,100,101,99,100,5\n"
    with pytest.raises(md.DataError, match="duplicate.*X"):
        md.ingest_ohlc(_write(tmp_path, body))


def test_ingest_bad_rows_report_lines(tmp_path):
    body = "2024-01-02,X,100,101,99,100,5\nnot-a-date,X,1,1,1,1,1\n2024-01-04,X,abc,1,1,1,1\n"
    with pytest.raises(md.DataError, match=r"line 3(.|\n)*line 4"):
        md.ingest_ohlc(_write(tmp_path, body))


def test_ingest_nonpositive(tmp_path):
    with pytest.raises(md.DataError, match="nonpositive"):
        md.ingest_ohlc(_write(tmp_path, "2024-01-02,X,100,101,99,0,5\n"))


def test_ingest_custom_schema(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("d,sym,o,h,l,c,mv\n2024-01-02,X,100,101,99,100,5\n")
    panel = md.ingest_ohlc(p, {"date": "d", "asset": "sym", "open": "o", "high": "h", "low": "l", "close": "c", "market_value": "mv"})
    assert panel.close[0, 0] == 100


def test_panel_rejects_bad_ohlc_order():
    with pytest.raises(md.DataError, match="ordering"):
        md.PricePanel(["X"], ["2024-01-02"], [[100.0]], [[99.0]], [[98.0]], [[100.0]], [1.0])


def _simple_panel(closes, opens=None, highs=None):
    c = np.asarray(closes, dtype=float)[None, :]
    o = c if opens is None else np.asarray(opens, dtype=float)[None, :]
    hh = np.maximum(o, c) if highs is None else np.asarray(highs, dtype=float)[None, :]
    dates = np.arange(np.datetime64("2024-01-01"), np.datetime64("2024-01-01") + c.shape[1])
    return md.PricePanel(["X"], dates, o, hh, np.minimum(o, c), c, [1.0])


def test_log_return_examples():
    # ln(1.05) = 0.04879016416943205, ln(1.1) = 0.09531017980432493 (high precision)
    rp = md.to_log_returns(_simple_panel([100, 105]))
    assert rp.r_C[0, 0] == pytest.approx(0.04879016416943205, abs=1e-15)
    rp = md.to_log_returns(_simple_panel([100, 100], opens=[100, 100]))
    assert rp.r_C[0, 0] == 0.0 and rp.r_O[0, 0] == 0.0
    rp = md.to_log_returns(_simple_panel([100, 105], highs=[100, 110]))
    assert rp.r_H[0, 0] == pytest.approx(0.09531017980432493, abs=1e-15)
    assert rp.r_H[0, 0] >= rp.r_C[0, 0]


def test_log_returns_need_two_dates():
    with pytest.raises(md.DataError):
        md.to_log_returns(_simple_panel([100]))


def test_missing_operand_makes_cell_missing():
    panel = gbm_ohlc_panel(5, [0.2], np.random.default_rng(0))
    panel.close[0, 2] = np.nan
    rp = md.to_log_returns(panel)
    assert np.isnan(rp.r_C[0, 1]) and np.isnan(rp.r_C[0, 2]) and np.isnan(rp.r_O[0, 2])
    assert not np.isnan(rp.r_C[0, 0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_return_order_statistics_and_reconstruction(seed):
    panel = gbm_ohlc_panel(60, [0.2, 0.5, 0.9], np.random.default_rng(seed))
    rp = md.to_log_returns(panel)
    assert np.all(rp.r_H >= rp.r_O) and np.all(rp.r_H >= rp.r_C)
    assert np.all(rp.r_L <= rp.r_O) and np.all(rp.r_L <= rp.r_C)
    rel = np.abs(rp.reconstruct_close() / panel.close - 1.0)
    assert rel.max() < 1e-12


def test_dropout_p_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(5, 10, 4))
    out = md.market_value_dropout(x, np.arange(1.0, 11), 0.0, 1.0, np.random.default_rng(1))
    np.testing.assert_array_equal(out, x)


def test_dropout_counts_and_scale():
    x = np.random.default_rng(0).normal(size=(5, 10, 4))
    out = md.market_value_dropout(x, np.arange(1.0, 11), 0.3, 1.0, np.random.default_rng(1))
    zero_rows = np.all(out == 0, axis=(0, 2))
    assert zero_rows.sum() == 3
    np.testing.assert_allclose(out[:, ~zero_rows], x[:, ~zero_rows] / 0.7, rtol=0, atol=0)


def test_dropout_inference_and_errors():
    x = np.ones((2, 4, 4))
    assert md.market_value_dropout(x, np.ones(4), 0.5, 1.0, np.random.default_rng(0), training=False) is not None
    np.testing.assert_array_equal(md.market_value_dropout(x, np.ones(4), 0.5, 1.0, np.random.default_rng(0), training=False), x)
    with pytest.raises(ValueError):
        md.market_value_dropout(x, np.ones(4), 1.0, 1.0, np.random.default_rng(0))


def test_dropout_low_temperature_drops_largest():
    mv = np.array([3.0, 10.0, 1.0, 7.0, 2.0])
    x = np.ones((1, 5, 4))
    hits = 0
    for seed in range(200):
        out = md.market_value_dropout(x, mv, 0.4, 1e-3, np.random.default_rng(seed))
        dropped = set(np.flatnonzero(np.all(out == 0, axis=(0, 2))))
        hits += dropped == {1, 3}
    assert hits == 200


def test_dropout_reproducible():
    x = np.random.default_rng(0).normal(size=(3, 6, 4))
    a = md.market_value_dropout(x, np.arange(1.0, 7), 0.5, 2.0, np.random.default_rng(9))
    b = md.market_value_dropout(x, np.arange(1.0, 7), 0.5, 2.0, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_dropout_frequency_matches_inclusion_probability():
    mv = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    tau, p, seeds = 2.0, 0.4, 10_000
    probs = md.dropout_probabilities(mv, tau)
    expected = inclusion_probabilities(probs, 2)
    x = np.ones((1, 5, 1))
    counts = np.zeros(5)
    for seed in range(seeds):
        out = md.market_value_dropout(x, mv, p, tau, np.random.default_rng(seed))
        counts += out[0, :, 0] == 0
    freq = counts / seeds
    se = np.sqrt(expected * (1 - expected) / seeds)
    assert np.all(np.abs(freq - expected) < 3 * se), (freq, expected)


def test_res_missing_value_examples():
    assert md.res_missing_value(np.nan, 0.07, 0.3) == pytest.approx(0.07)
    assert md.res_missing_value(0.02, 0.07, 0.0) == pytest.approx(0.02)
    assert md.res_missing_value(0.02, 0.07, 0.5) == pytest.approx(0.03)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.floats(-1, 1), st.just(math.nan)), min_size=1, max_size=20), st.floats(-1, 1), st.floats(-1, 1))
def test_res_missing_value_never_missing(xs, w1, w2):
    assert not np.isnan(md.res_missing_value(np.array(xs), w1, w2)).any()


def test_res_missing_value_tensor_path_has_gradients():
    s = dc.ParamStore()
    s.add("w1", [0.1, 0.2])
    s.add("w2", [0.5, -0.5])
    x = np.array([[np.nan, 0.3], [0.2, np.nan]])
    with dc.Graph() as g:
        out = md.res_missing_value(x, dc.param(s, "w1"), dc.param(s, "w2"))
        loss = out.sum()
    np.testing.assert_allclose(out.data, [[0.1, 0.15], [0.3, 0.2]])
    grads = dc.backward(loss, g)
    np.testing.assert_allclose(grads["w1"], [1.0, 1.0])
    np.testing.assert_allclose(grads["w2"], [0.2, 0.3])


def _dated_panel(n):
    return gbm_ohlc_panel(n, [0.2], np.random.default_rng(0), start="2021-01-04")


def test_split_sizes_and_inclusive_boundary():
    panel = _dated_panel(100)
    tr, va, te = md.split_by_date(panel, panel.dates[69], panel.dates[84])
    assert (tr.n_dates, va.n_dates, te.n_dates) == (70, 15, 15)
    assert tr.dates[-1] == panel.dates[69]
    assert va.dates[0] == panel.dates[70]


def test_split_beyond_calendar_warns():
    panel = _dated_panel(50)
    with pytest.warns(UserWarning):
        tr, va, te = md.split_by_date(panel, panel.dates[30], panel.dates[-1] + 10)
    assert te.n_dates == 0 and tr.n_dates + va.n_dates == 50


def test_split_rejects_reversed():
    panel = _dated_panel(20)
    with pytest.raises(ValueError):
        md.split_by_date(panel, panel.dates[10], panel.dates[5])


def _flat_panel(n=40, level=100.0):
    c = np.full((1, n), level)
    return md.PricePanel(["IDX"], md.np.arange(np.datetime64("2024-01-01"), np.datetime64("2024-01-01") + n), c, c, c, c, [1.0])


def test_filter_examples():
    panel = _flat_panel()
    d = [x.astype(object) for x in panel.dates]
    keep = md.OptionRecord(d[0], d[10], 100.0, 2.0, 5, "IDX")
    far_strike = md.OptionRecord(d[0], d[10], 90.0, 11.0, 5, "IDX")
    no_volume = md.OptionRecord(d[0], d[10], 100.0, 2.0, 0, "IDX")
    too_long = md.OptionRecord(d[0], d[30], 100.0, 2.0, 5, "IDX")
    edge = md.OptionRecord(d[0], d[22], 100.0, 2.0, 5, "IDX")
    out = md.filter_eligible_options(md.OptionChain([keep, far_strike, no_volume, too_long, edge]), panel)
    assert out.records == [keep, edge]


def test_filter_reports_unknown_underlying(caplog):
    panel = _flat_panel()
    d = [x.astype(object) for x in panel.dates]
    skipped = []
    rec = md.OptionRecord(d[0], d[10], 100.0, 2.0, 5, "NOPE")
    assert len(md.filter_eligible_options(md.OptionChain([rec]), panel, skipped=skipped)) == 0
    assert skipped and "NOPE" in skipped[0]


def test_filter_output_satisfies_predicates():
    panel = gbm_ohlc_panel(200, [0.25], np.random.default_rng(3))
    chain = bs_option_chain(panel, "A00", np.random.default_rng(4), strike_step=2.0, zero_volume_share=0.2)
    out = md.filter_eligible_options(chain, panel)
    assert 0 < len(out) < len(chain)
    ids = {id(r) for r in chain}
    for r in out:
        assert id(r) in ids
        s0 = panel.close[0, panel.date_index(r.trade_date)]
        assert r.volume > 0 and 0.95 <= s0 / r.strike <= 1.05
        assert md.trading_days_between(panel.dates, r.trade_date, r.expiry_date) <= 22


def test_option_record_invariants():
    with pytest.raises(md.DataError):
        md.OptionRecord(date(2024, 1, 5), date(2024, 1, 1), 100.0, 1.0, 1, "X")
    with pytest.raises(md.DataError):
        md.OptionRecord(date(2024, 1, 1), date(2024, 1, 5), -1.0, 1.0, 1, "X")


def test_file_round_trips(tmp_path):
    panel = gbm_ohlc_panel(30, [0.2, 0.3], np.random.default_rng(0))
    panel.close[1, 5] = np.nan
    md.write_ohlc(panel, tmp_path / "p.csv")
    back = md.ingest_ohlc(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.close, panel.close)
    np.testing.assert_array_equal(back.dates, panel.dates)
    chain = bs_option_chain(panel, "A00", np.random.default_rng(1))
    md.write_options(chain, tmp_path / "o.csv")
    assert md.ingest_options(tmp_path / "o.csv").records == chain.records
