import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_ratio
from rappor.params import (
    InvalidParams,
    Params,
    check,
    epsilon_infinity,
    epsilon_one,
    privacy_report,
    require_decodable,
    response_probabilities,
    validate,
)

# every (k <= 6, h, f) with room for two disjoint h-bit patterns
DP_GRID = [(k, h, f) for k in range(2, 7) for h in (1, 2) for f in (0.25, 0.5, 0.75) if 2 * h <= k]


def test_validate_reference_config():
    p = Params(k=256, h=4, f=0.5, p=0.5, q=0.75, m=8, mode="standard")
    assert validate(p) is p


def test_validate_minimal_basic():
    validate(Params(k=2, h=1, f=0.0, p=0.5, q=0.75, m=1, mode="basic_one_time"))


def test_validate_swapped_probabilities():
    with pytest.raises(InvalidParams) as err:
        validate(Params(k=16, h=2, f=0.5, p=0.75, q=0.5, m=4, mode="standard"))
    assert "p < q violated" in err.value.errors


def test_validate_reports_every_violation():
    errors = check(Params(k=4, h=8, f=1.5, p=0.9, q=0.1, m=0, mode="fancy"))
    joined = " ".join(errors)
    for needle in ("h <= k", "m >= 1", "f in [0, 1]", "p < q", "mode"):
        assert needle in joined


def test_basic_modes_need_single_hash_and_cohort():
    errors = check(Params(k=8, h=2, f=0, p=0.5, q=0.75, m=2, mode="basic"))
    assert any("h = 1" in e for e in errors)
    assert any("m = 1" in e for e in errors)


def test_f_one_only_for_accounting():
    params = Params(k=2, h=1, f=1.0, p=0.5, q=0.75, m=1, mode="standard")
    validate(params)
    with pytest.raises(InvalidParams):
        require_decodable(params)


def test_json_round_trip_and_unknown_fields():
    params = Params(k=128, h=2, f=0.5, p=0.5, q=0.75, m=16, mode="standard")
    assert Params.from_json(params.to_json()) == params
    assert set(json.loads(params.to_json())) == {"k", "h", "f", "p", "q", "m", "mode"}
    data = params.to_dict() | {"extra": 1}
    with pytest.raises(InvalidParams, match="unknown field"):
        Params.from_dict(data)
    data = params.to_dict()
    del data["m"]
    with pytest.raises(InvalidParams, match="missing field"):
        Params.from_dict(data)


@pytest.mark.parametrize("f,p,q,expected", [
    (0.5, 0.5, 0.75, (0.6875, 0.5625)),
    (0.0, 0.5, 0.75, (0.75, 0.5)),
    (1.0, 0.5, 0.75, (0.625, 0.625)),
])
def test_response_probabilities(f, p, q, expected):
    assert response_probabilities(f, p, q) == pytest.approx(expected, abs=1e-15)


def test_epsilon_infinity_values():
    assert epsilon_infinity(2, 0.5) == pytest.approx(4 * math.log(3), abs=1e-12)
    assert epsilon_infinity(1, 1.0) == 0.0
    assert epsilon_infinity(4, 0.5) == pytest.approx(8.78890, abs=1e-5)
    assert epsilon_infinity(3, 0.0) == math.inf
    with pytest.raises(ValueError):
        epsilon_infinity(1, 1.2)
    with pytest.raises(ValueError):
        epsilon_infinity(1, -0.1)


def test_epsilon_one_values():
    assert epsilon_one(2, 0.5, 0.5, 0.75) == pytest.approx(1.0743, abs=5e-4)
    assert epsilon_one(2, 0.75, 0.5, 0.75) == pytest.approx(0.5343, abs=5e-4)
    assert epsilon_one(1, 0.0, 0.5, 0.75) == pytest.approx(math.log(3), abs=1e-12)


def test_epsilon_one_degenerate():
    with pytest.raises(ValueError):
        epsilon_one(1, 0.0, 0.0, 0.75)
    with pytest.raises(ValueError):
        epsilon_one(1, 0.0, 0.5, 1.0)


def test_privacy_report_examples():
    r = privacy_report(Params(128, 2, 0.5, 0.5, 0.75, 16, "standard"))
    assert (r.q_star, r.p_star) == (0.6875, 0.5625)
    assert r.eps_infinity == pytest.approx(4.39445, abs=1e-5)
    assert r.eps_one == pytest.approx(1.0743, abs=5e-4)

    r = privacy_report(Params(2, 1, 1.0, 0.5, 0.75, 1, "standard"))
    assert (r.q_star, r.p_star, r.eps_infinity, r.eps_one) == (0.625, 0.625, 0.0, 0.0)

    r = privacy_report(Params(128, 2, 0.75, 0.5, 0.75, 32, "standard"))
    assert r.eps_one == pytest.approx(0.5343, abs=5e-4)
    assert r.eps_infinity == pytest.approx(4 * math.log(0.625 / 0.375), abs=1e-12)


def test_privacy_report_unbounded_and_format():
    r = privacy_report(Params(101, 1, 0.0, 0.5, 0.75, 1, "basic_one_time"))
    assert r.to_dict()["eps_infinity"] == "unbounded"
    text = r.format()
    assert "unbounded" in text and "1.0986" in text


@pytest.mark.parametrize("k,h,f", DP_GRID)
def test_permanent_bound_matches_enumeration(k, h, f):
    a, b = set(range(h)), set(range(h, 2 * h))
    ratio = max_ratio(k, a, b, 1 - f / 2, f / 2)
    assert ratio == pytest.approx(math.exp(epsilon_infinity(h, f)), rel=1e-9)
    # overlapping patterns never exceed the bound
    if h == 2:
        overlap = max_ratio(k, {0, 1}, {1, 2}, 1 - f / 2, f / 2)
        assert overlap <= math.exp(epsilon_infinity(h, f)) * (1 + 1e-12)


@pytest.mark.parametrize("k,h,f", DP_GRID)
def test_single_report_bound_matches_enumeration(k, h, f):
    q_star, p_star = response_probabilities(f, 0.5, 0.75)
    ratio = max_ratio(k, set(range(h)), set(range(h, 2 * h)), q_star, p_star)
    assert ratio == pytest.approx(math.exp(epsilon_one(h, f, 0.5, 0.75)), rel=1e-9)


probs = st.floats(0.0, 1.0)


@settings(max_examples=300)
@given(f=st.floats(0.01, 0.99), p=st.floats(0.0, 0.98), gap=st.floats(0.01, 1.0), h=st.integers(1, 16))
def test_single_report_never_exceeds_longitudinal(f, p, gap, h):
    q = min(1.0, p + gap)
    if not p < q:
        return
    q_star, p_star = response_probabilities(f, p, q)
    assert p_star <= q_star
    e1, einf = epsilon_one(h, f, p, q), epsilon_infinity(h, f)
    assert 0 <= e1 <= einf * (1 + 1e-12)
    if q - p < 0.99:
        # equality only as the instantaneous step approaches the identity
        assert e1 < einf


@given(h=st.integers(1, 32), f1=st.floats(0.01, 1.0), f2=st.floats(0.01, 1.0))
def test_epsilon_monotone_in_f(h, f1, f2):
    lo, hi = sorted((f1, f2))
    if hi - lo < 1e-9:
        return
    assert epsilon_infinity(h, hi) < epsilon_infinity(h, lo)
    assert epsilon_one(h, hi, 0.5, 0.75) < epsilon_one(h, lo, 0.5, 0.75)


@given(f=probs, p=probs, q=probs)
def test_response_probabilities_equal_only_when_degenerate(f, p, q):
    q_star, p_star = response_probabilities(f, p, q)
    if p < q:
        assert p_star <= q_star
        if f < 1.0 and q - p > 1e-9:
            assert p_star < q_star
