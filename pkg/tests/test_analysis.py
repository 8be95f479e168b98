import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from wmevo import analysis
from wmevo.analysis import hidden_variance
from wmevo.model import init_genome
from wmevo.rollout import EvalConfig, RolloutResult, rollout

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_variance_hand_example():
    np.testing.assert_array_equal(hidden_variance([0.0, 2.0, 4.0]), [1.0, 0.0, 1.0])


def test_variance_degenerate_cases():
    np.testing.assert_array_equal(hidden_variance([0.3] * 7), np.zeros(7))
    # two distinct steps have equal raw deviation, so normalization gives zeros
    np.testing.assert_array_equal(hidden_variance([1.0, 5.0]), [0.0, 0.0])
    with pytest.raises(analysis.UsageError):
        hidden_variance([])


@given(st.lists(finite, min_size=1, max_size=60))
def test_variance_bounds_and_extremes(xs):
    out = hidden_variance(xs)
    assert out.shape == (len(xs),)
    assert np.all((out >= 0) & (out <= 1))
    raw = (np.mean(xs) - np.asarray(xs)) ** 2
    if raw.max() > raw.min():
        assert out.max() == 1.0 and out.min() == 0.0


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=40), st.floats(-100, 100))
def test_variance_translation_invariant(xs, shift):
    # a shift rounds away spreads near machine precision, so keep the profile well conditioned
    assume(np.ptp((np.mean(xs) - np.asarray(xs)) ** 2) > 1e-6)
    a = hidden_variance(xs)
    b = hidden_variance(np.asarray(xs) + shift)
    np.testing.assert_allclose(a, b, atol=1e-6)


@pytest.fixture(scope="module")
def traced():
    cfg = EvalConfig(early_term_window=None, frame_cap=10, record_traces=True)
    return rollout(init_genome(3), 4, cfg)


def test_export_latents_rows_and_roundtrip(traced, tmp_path):
    path = analysis.export_latents(traced, tmp_path / "trace.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 11
    assert lines[0].split(",") == analysis.TRACE_COLUMNS
    back = analysis.read_latents(path)
    np.testing.assert_allclose(back.latents, traced.traces.latents, rtol=1e-6)
    np.testing.assert_allclose(back.hidden_means, traced.traces.hidden_means, rtol=1e-6)
    np.testing.assert_allclose(back.actions, traced.traces.actions, rtol=1e-6)
    np.testing.assert_allclose(back.positions, traced.traces.positions, rtol=1e-6)


def test_export_discrete_codes(tmp_path):
    cfg = EvalConfig(early_term_window=None, frame_cap=6, record_traces=True, latent_mode="discrete")
    res = rollout(init_genome(3), 4, cfg)
    back = analysis.read_latents(analysis.export_latents(res, tmp_path / "d.csv"))
    assert set(np.unique(back.latents)) <= {0.0, 1.0}


def test_export_requires_traces(tmp_path):
    with pytest.raises(analysis.UsageError):
        analysis.export_latents(RolloutResult(0.0, 1, 1, 10), tmp_path / "x.csv")


def test_write_variance(tmp_path):
    path = analysis.write_variance([1.0, 0.0, 1.0], tmp_path / "v.csv", [(0, 0), (1, 1), (2, 2)])
    assert path.read_text().splitlines() == ["t,sigma,car_x,car_y", "0,1,0,0", "1,0,1,1", "2,1,2,2"]


def write_log(path, rows):
    header = "generation,best_single,elite_avg,elite_std,pop_mean,pop_std,rollouts,frames,wall_time_s\n"
    body = "".join(f"{g},{b},{e},1.0,0.0,1.0,90,1000,\n" for g, b, e in rows)
    path.write_text(header + body)
    return path


def test_plot_single_row(tmp_path):
    log = write_log(tmp_path / "g.csv", [(0, -1.5, -2.0)])
    svg = analysis.emit_fitness_plot(log, tmp_path / "p.svg").read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<circle") == 2


def test_plot_many_rows_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    rows = [(g, float(v), float(v) - 1) for g, v in enumerate(np.cumsum(rng.standard_normal(1000)))]
    log = write_log(tmp_path / "g.csv", rows)
    a = analysis.emit_fitness_plot(log, tmp_path / "a.svg").read_bytes()
    b = analysis.emit_fitness_plot(log, tmp_path / "b.svg").read_bytes()
    assert a == b
    text = a.decode()
    pts = text.split('points="')[1].split('"')[0].split()
    xs = [float(p.split(",")[0]) for p in pts]
    ys = [float(p.split(",")[1]) for p in pts]
    assert len(xs) == 1000 and all(x1 > x0 for x0, x1 in zip(xs, xs[1:]))
    assert min(ys) >= 30 and max(ys) <= 350  # inside the plot frame
    assert "generation" in text and "fitness" in text and "href" not in text


def test_plot_parse_errors(tmp_path):
    log = write_log(tmp_path / "g.csv", [(0, 1, 1), (1, 2, 2)])
    lines = log.read_text().splitlines()
    lines[2] = "1,abc,2,1,0,1,90,1000,"
    log.write_text("\n".join(lines) + "\n")
    with pytest.raises(analysis.LogParseError) as err:
        analysis.emit_fitness_plot(log, tmp_path / "p.svg")
    assert err.value.line == 3 and ":3:" in str(err.value)
    short = tmp_path / "s.csv"
    short.write_text("generation,best_single,elite_avg\n0,1\n")
    with pytest.raises(analysis.LogParseError) as err:
        analysis.read_generation_log(short)
    assert err.value.line == 2
    empty = write_log(tmp_path / "e.csv", [])
    with pytest.raises(analysis.LogParseError):
        analysis.read_generation_log(empty)
