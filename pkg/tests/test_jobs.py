import random
import statistics

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gridflow.jobs.base import JOB_FAILED, JobContext, JobError
from gridflow.jobs.cache import cached_call, input_key
from gridflow.jobs.mandelbrot import mandelbrot
from gridflow.jobs.replace_tag import TemplateError, job_replace_tag, parse_tags, render_fixed, replace_tags
from gridflow.jobs.surrogate import (
    F_STAR,
    MODEL,
    R_STAR,
    SENSITIVITY,
    job_parse_freq,
    job_surrogate_sim,
    parse_output,
    read_freq_file,
    read_radii,
    render_output,
)
from gridflow.submit.workflow import PLATE_TEMPLATE

M = np.array(SENSITIVITY)
radii = st.tuples(*[st.floats(1.0, 7.0)] * 3)


# -- ReplaceTag ---------------------------------------------------------------

@pytest.mark.parametrize("width", range(3, 11))
def test_fixed_width_exact_length(width):
    rng = random.Random(width)
    text = "".join(f'<TAG ID="v{i}" Min="1" Max="7" Len="{width}"/>|' for i in range(50))
    out, used = replace_tags(text, {}, rng)
    tokens = out.split("|")[:-1]
    assert len(tokens) == 50
    assert all(len(t) == width for t in tokens)


@settings(max_examples=300)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(3, 10))
def test_render_fixed_length_property(value, width):
    assert len(render_fixed(value, width)) == width


def test_render_fixed_pads_short_values():
    assert render_fixed(2.5, 6) == "2.5   "
    assert render_fixed(3.14159265, 4) == "3.14"
    assert render_fixed(2.5, None) == "2.5"


def test_uniform_draws_in_range_with_centred_mean():
    text = "\n".join(f'<TAG ID="r{i}" Min="1.0" Max="7.0"/>' for i in range(1000))
    out, used = replace_tags(text, {}, random.Random(42))
    draws = [float(v) for v in out.splitlines()]
    assert len(draws) == 1000
    assert all(1.0 <= d <= 7.0 for d in draws)
    assert abs(statistics.fmean(draws) - 4.0) <= 0.05 * 4.0
    assert [float(v) for _, v in used] == draws


def test_normal_draws_follow_mean_and_dev():
    text = "\n".join(f'<TAG ID="n{i}" Mean="5" Dev="0.5"/>' for i in range(2000))
    out, _ = replace_tags(text, {}, random.Random(7))
    draws = [float(v) for v in out.splitlines()]
    assert abs(statistics.fmean(draws) - 5) < 0.05
    assert abs(statistics.stdev(draws) - 0.5) < 0.05


def test_explicit_value_wins_over_range():
    out, used = replace_tags('a <TAG ID="r1" Min="1" Max="2"/> b', {"r1": 6.5})
    assert out == "a 6.5 b" and used == [("r1", "6.5")]


def test_seeded_draws_reproducible():
    text = '<TAG ID="a" Min="0" Max="1"/> <TAG ID="b" Mean="0" Dev="1"/>'
    assert replace_tags(text, {}, random.Random(3)) == replace_tags(text, {}, random.Random(3))


@pytest.mark.parametrize(
    "text, message",
    [
        ('<TAG Min="1" Max="2"/>', "without ID"),
        ('<TAG ID="a" Min="1"/>', "pairs"),
        ('<TAG ID="a" Min="3" Max="2"/>', "Min > Max"),
        ('<TAG ID="a" Mean="1" Dev="0"/>', "Dev"),
        ('<TAG ID="a" Min="x" Max="2"/>', "bad Min"),
        ('<TAG ID="a" Min="1" Max="2"', "malformed"),
        ('<TAG ID="a" Len="0" Min="1" Max="2"/>', "Len"),
    ],
)
def test_template_errors(text, message):
    with pytest.raises(TemplateError, match=message):
        replace_tags(text, {})


def test_tag_without_value_or_range():
    with pytest.raises(TemplateError, match="no value"):
        replace_tags('<TAG ID="a"/>', {})


def test_tag_error_reports_position():
    with pytest.raises(TemplateError, match="line 2, column 3"):
        parse_tags('ok\nx <TAG Min="1"/>')


def test_replace_tag_job(tmp_path):
    (tmp_path / "deck.dat").write_text(PLATE_TEMPLATE)
    ctx = JobContext(tmp_path, "c1", job_type="JobReplaceTag")
    params = {"Input": "deck.dat", "Output": "deck_mod.dat", "Logfile": "values.log",
              "r1": "2.5", "r2": "3.25", "r3": "6.0"}
    assert job_replace_tag(ctx, params) == 0
    assert read_radii((tmp_path / "deck_mod.dat").read_text()) == [2.5, 3.25, 6.0]
    assert (tmp_path / "values.log").read_text() == "r1=2.5\nr2=3.25\nr3=6.0\n"
    with pytest.raises(JobError):
        job_replace_tag(ctx, {**params, "r1": "abc"})


# -- surrogate ----------------------------------------------------------------

def test_optimum_reproduces_target():
    assert MODEL.frequencies(R_STAR) == pytest.approx(F_STAR, abs=1e-12)


@settings(max_examples=200)
@given(radii, radii)
def test_surrogate_is_affine(a, b):
    fa, fb = np.array(MODEL.frequencies(a)), np.array(MODEL.frequencies(b))
    np.testing.assert_allclose(fa - fb, M @ (np.array(a) - np.array(b)), atol=1e-9)


@settings(max_examples=200)
@given(radii, st.integers(0, 2), st.floats(1e-3, 1.0))
def test_larger_hole_lowers_every_mode(r, k, step):
    r2 = list(r)
    r2[k] = min(7.0, r2[k] + step)
    assume(r2[k] - r[k] > 1e-9)  # below that the change vanishes in rounding
    assert all(x < y for x, y in zip(MODEL.frequencies(r2), MODEL.frequencies(r)))


def test_surrogate_rejects_out_of_bounds():
    with pytest.raises(JobError) as info:
        MODEL.check_radii([0.5, 3, 3])
    assert info.value.code == JOB_FAILED


@settings(max_examples=100)
@given(radii)
def test_solver_output_roundtrip(r):
    f = MODEL.frequencies(r)
    parsed = parse_output(render_output(r, f))
    assert [parsed[m] for m in (4, 5, 6)] == list(f)


def test_truncated_output_is_parse_error():
    text = render_output(R_STAR, F_STAR).replace("*** END OF SOLUTION ***", "")
    with pytest.raises(JobError, match="incomplete"):
        parse_output(text)


def test_sim_and_parse_jobs(tmp_path):
    r = (2.0, 4.5, 6.5)
    deck, _ = replace_tags(PLATE_TEMPLATE, dict(zip(("r1", "r2", "r3"), r)))
    (tmp_path / "in.dat").write_text(deck)
    ctx = JobContext(tmp_path, "c1")
    assert job_surrogate_sim(ctx, {"Input": "in.dat", "Output": "solve.out"}) == 0
    assert job_parse_freq(ctx, {"Input": "solve.out", "Freqfile": "f.asc", "Modefile": "m.asc"}) == 0
    got = read_freq_file((tmp_path / "f.asc").read_text())
    expected = np.array(F_STAR) + M @ (np.array(r) - np.array(R_STAR))
    np.testing.assert_allclose(got, expected, atol=1e-11)


# -- Mandelbrot ---------------------------------------------------------------

def _mandelbrot_oracle(width, height, max_iter):
    # vectorised escape-time count, z0 = c, escape when |z| > 2
    cx = np.linspace(-2.0, 1.0, width)
    cy = np.linspace(-1.5, 1.5, height)
    c = cx[None, :] + 1j * cy[:, None]
    z = c.copy()
    count = np.full(c.shape, max_iter)
    alive = np.ones(c.shape, bool)
    for n in range(1, max_iter + 1):
        z[alive] = z[alive] ** 2 + c[alive]
        escaped = alive & (np.abs(z) > 2.0)
        count[escaped] = n
        alive &= ~escaped
    return int(count.sum())


def test_mandelbrot_checksum_frozen_and_stable():
    _, first = mandelbrot(64, 64, 100)
    _, second = mandelbrot(64, 64, 100)
    assert first == second == 79738
    assert _mandelbrot_oracle(64, 64, 100) == 79738


@pytest.mark.parametrize("shape", [(8, 5, 20), (17, 13, 50)])
def test_mandelbrot_matches_oracle(shape):
    assert mandelbrot(*shape)[1] == _mandelbrot_oracle(*shape)


def test_mandelbrot_rejects_bad_sizes():
    with pytest.raises(ValueError):
        mandelbrot(0, 4, 10)


# -- cached_call --------------------------------------------------------------

def _counting_compute(calls):
    def compute(inputs, out_dir):
        calls.append([p.name for p in inputs])
        total = sum(len(p.read_bytes()) for p in inputs)
        (out_dir / "result.txt").write_text(str(total))

    return compute


def test_cached_call_computes_once(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text("hello")
    calls = []
    compute = _counting_compute(calls)
    first = cached_call("svc", [a], compute, tmp_path / "cache")
    second = cached_call("svc", [a], compute, tmp_path / "cache")
    assert len(calls) == 1
    assert first == second and first["result.txt"].read_text() == "5"
    a.write_text("hello!")
    cached_call("svc", [a], compute, tmp_path / "cache")
    assert len(calls) == 2


def test_cached_call_recomputes_corrupt_entry(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text("abc")
    calls = []
    out = cached_call("svc", [a], _counting_compute(calls), tmp_path / "cache")
    out["result.txt"].write_text("garbage")
    again = cached_call("svc", [a], _counting_compute(calls), tmp_path / "cache")
    assert len(calls) == 2 and again["result.txt"].read_text() == "3"


def test_cached_call_failure_leaves_no_entry(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text("abc")

    def broken(inputs, out_dir):
        (out_dir / "partial").write_text("x")
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        cached_call("svc", [a], broken, tmp_path / "cache")
    calls = []
    cached_call("svc", [a], _counting_compute(calls), tmp_path / "cache")
    assert len(calls) == 1


def test_input_key_separates_boundaries(tmp_path):
    (tmp_path / "x").mkdir()
    (tmp_path / "y").mkdir()
    (tmp_path / "x" / "p").write_text("a")
    (tmp_path / "x" / "q").write_text("bc")
    (tmp_path / "y" / "p").write_text("ab")
    (tmp_path / "y" / "q").write_text("c")
    assert input_key([tmp_path / "x" / "p", tmp_path / "x" / "q"]) != input_key(
        [tmp_path / "y" / "p", tmp_path / "y" / "q"]
    )
