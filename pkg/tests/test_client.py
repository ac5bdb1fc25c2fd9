import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bloom_bits, pack_lsb_first
from rappor.client import (
    Client,
    MemoStore,
    MemoStoreError,
    Report,
    ReportFormatError,
    assign_cohort,
    bloom_encode,
    bloom_indices,
    encode_fresh_batch,
    get_or_create_prr,
    instantaneous_rr,
    make_report,
    one_round_rr,
    pack_bits,
    parse_report,
    permanent_rr,
    serialize_report,
    unpack_bits,
    value_digest,
)
from rappor.params import Params

STANDARD = Params(k=256, h=4, f=0.5, p=0.5, q=0.75, m=8, mode="standard")


def test_assign_cohort():
    assert assign_cohort(np.random.default_rng(123), 1) == 0
    # pinned regression value
    assert assign_cohort(np.random.default_rng(7), 16) == 15
    rng = np.random.default_rng(0)
    draws = np.array([assign_cohort(rng, 8) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=8) / len(draws)
    assert np.all((freq > 0.115) & (freq < 0.135))


def test_bloom_reference_value():
    bits = bloom_encode("The number 68", 0, 256, 4)
    assert 1 <= bits.sum() <= 4
    assert np.array_equal(bits, bloom_encode("The number 68", 0, 256, 4))


def test_bloom_pinned_vectors_match_hash_oracle():
    # the oracle re-derives the hash scheme with hashlib only
    for cohort, expected in ((0, [26, 151, 227, 235]), (1, [39, 41, 185, 196])):
        got = sorted(set(bloom_indices("The number 68", cohort, 256, 4)))
        assert got == expected == bloom_bits(b"The number 68", cohort, 256, 4)
    assert sorted(bloom_indices("", 0, 128, 2)) == [16, 51]
    assert sorted(bloom_indices("héllo", 3, 128, 2)) == bloom_bits("héllo".encode(), 3, 128, 2)


@given(value=st.binary(max_size=40), cohort=st.integers(0, 65535), k=st.integers(1, 512),
       h=st.integers(1, 16))
def test_bloom_property(value, cohort, k, h):
    if h > k:
        return
    bits = bloom_encode(value, cohort, k, h)
    assert len(bits) == k and 1 <= bits.sum() <= h
    assert sorted(np.flatnonzero(bits)) == bloom_bits(value, cohort, k, h)


def test_permanent_rr_extremes():
    rng = np.random.default_rng(1)
    bits = rng.random(64) < 0.5
    assert np.array_equal(permanent_rr(bits, 0.0, rng), bits)
    out = np.array([permanent_rr(bits, 1.0, rng) for _ in range(4000)])
    # independent of the input: column means near 0.5 for ones and zeros alike
    assert abs(out[:, bits].mean() - 0.5) < 0.01
    assert abs(out[:, ~bits].mean() - 0.5) < 0.01


def test_instantaneous_rr_extremes():
    rng = np.random.default_rng(2)
    assert instantaneous_rr(np.ones(32, bool), 0.3, 1.0, rng).all()
    assert not instantaneous_rr(np.zeros(32, bool), 0.0, 0.6, rng).any()


def _conditional_rates(fn, trials, seed):
    rng = np.random.default_rng(seed)
    bits = np.zeros(trials, dtype=bool)
    bits[: trials // 2] = True
    out = fn(bits, rng)
    return out[bits].mean(), out[~bits].mean()


def test_permanent_rr_calibration():
    one, zero = _conditional_rates(lambda b, r: permanent_rr(b, 0.5, r), 200_000, 3)
    assert one == pytest.approx(0.75, abs=0.01)
    assert zero == pytest.approx(0.25, abs=0.01)


def test_two_stage_calibration():
    def two_stage(b, r):
        return instantaneous_rr(permanent_rr(b, 0.5, r), 0.5, 0.75, r)

    one, zero = _conditional_rates(two_stage, 200_000, 4)
    assert one == pytest.approx(0.6875, abs=0.01)
    assert zero == pytest.approx(0.5625, abs=0.01)


def test_one_round_matches_two_stage_marginals():
    one, zero = _conditional_rates(lambda b, r: one_round_rr(b, 0.5, 0.5, 0.75, r), 200_000, 5)
    assert one == pytest.approx(0.6875, abs=0.01)
    assert zero == pytest.approx(0.5625, abs=0.01)


def test_one_round_equals_irr_without_permanent_noise():
    bits = np.random.default_rng(0).random(100) < 0.3
    a = one_round_rr(bits, 0.0, 0.5, 0.75, np.random.default_rng(9))
    b = instantaneous_rr(bits, 0.5, 0.75, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_wire_format_example():
    bits = np.zeros(8, dtype=bool)
    bits[[0, 3]] = True
    params = Params(k=8, h=1, f=0.5, p=0.5, q=0.75, m=4, mode="standard")
    line = serialize_report(Report(2, bits))
    assert line == b'{"cohort":2,"bits":"09"}'
    assert parse_report(line, params) == Report(2, bits)


@given(bits=st.lists(st.booleans(), min_size=1, max_size=300))
def test_pack_matches_oracle_and_round_trips(bits):
    arr = np.array(bits, dtype=bool)
    text = pack_bits(arr)
    assert text == pack_lsb_first(bits)
    assert np.array_equal(unpack_bits(text, len(bits)), arr)


@pytest.mark.parametrize("line,match", [
    ('{"cohort":0,"bits":"0"}', "hex digits"),
    ('{"cohort":0,"bits":"0000"}', "hex digits"),
    ('{"cohort":0,"bits":"zz"}', "bad hex"),
    ('{"cohort":4,"bits":"00"}', "outside"),
    ('{"cohort":-1,"bits":"00"}', "outside"),
    ('{"cohort":true,"bits":"00"}', "integer"),
    ('{"cohort":0}', "exactly"),
    ('{"cohort":0,"bits":"00","x":1}', "exactly"),
    ("[1,2]", "exactly"),
    ("not json", "not JSON"),
])
def test_parse_errors(line, match):
    params = Params(k=8, h=1, f=0.5, p=0.5, q=0.75, m=4, mode="standard")
    with pytest.raises(ReportFormatError, match=match):
        parse_report(line, params)


def test_padding_bits_must_be_zero():
    with pytest.raises(ReportFormatError, match="padding"):
        unpack_bits("ff", 5)


def test_memoization_reuses_permanent_response():
    store = MemoStore(k=STANDARD.k)
    rng = np.random.default_rng(0)
    a = get_or_create_prr("a", 3, STANDARD, store, rng)
    b = get_or_create_prr("a", 3, STANDARD, store, rng)
    assert np.array_equal(a.bits, b.bits)
    for v in ["a", "b", "a", "b"]:
        get_or_create_prr(v, 3, STANDARD, store, rng)
    assert len(store) == 2


def test_memo_store_persists_atomically(tmp_path):
    path = tmp_path / "memo.json"
    rng = np.random.default_rng(5)
    store = MemoStore(path, k=STANDARD.k)
    first = get_or_create_prr("value", 1, STANDARD, store, rng)
    data = json.loads(path.read_text())
    assert list(data) == [f"{value_digest('value').hex()}:1"]
    assert "value" not in path.read_text()
    assert not list(tmp_path.glob("*.tmp"))
    # a fresh process sees the same response
    again = get_or_create_prr("value", 1, STANDARD, MemoStore(path, k=STANDARD.k), np.random.default_rng(99))
    assert np.array_equal(first.bits, again.bits)
    # deleting the store is the only way to get a new one
    path.unlink()
    fresh = get_or_create_prr("value", 1, STANDARD, MemoStore(path), np.random.default_rng(99))
    assert not np.array_equal(first.bits, fresh.bits)


def test_memo_store_refuses_overwrite():
    store = MemoStore(k=8)
    prr = get_or_create_prr("x", 0, Params(8, 1, 0.5, 0.5, 0.75, 1, "standard"), store,
                            np.random.default_rng(0))
    with pytest.raises(MemoStoreError):
        store.put(prr)


def test_memo_store_io_errors(tmp_path):
    bad = tmp_path / "memo.json"
    bad.write_text("{not json")
    with pytest.raises(MemoStoreError):
        MemoStore(bad)
    blocker = tmp_path / "file"
    blocker.write_text("")
    store = MemoStore(blocker / "memo.json")
    with pytest.raises(MemoStoreError):
        get_or_create_prr("v", 0, STANDARD, store, np.random.default_rng(0))
    # the failed entry is not kept, so nothing unpersisted is ever handed out
    assert len(store) == 0


def test_reference_report_density():
    client = Client(STANDARD, rng=11, cohort=0)
    set_bits = client.report("The number 68").bits.sum()
    assert 110 <= set_bits <= 160


def test_averaging_reveals_permanent_not_signal():
    client = Client(STANDARD, rng=12, cohort=0)
    reports = np.array([client.report("v").bits for _ in range(10_000)])
    prr = client.store.get(value_digest("v"), 0, STANDARD.k).bits
    mean = reports.mean(axis=0)
    assert np.all(np.abs(mean[prr] - 0.75) < 0.03)
    assert np.all(np.abs(mean[~prr] - 0.5) < 0.03)


def test_one_time_mode_repeats_report():
    params = Params(k=64, h=2, f=0.0, p=0.5, q=0.75, m=4, mode="one_time")
    client = Client(params, rng=3)
    assert client.report("v") == client.report("v")


def test_basic_one_time_is_one_round_on_unit_vector():
    params = Params(k=2, h=1, f=0.0, p=0.5, q=0.75, m=1, mode="basic_one_time")
    client = Client(params, rng=np.random.default_rng(21), categories=["male", "female"])
    expected = instantaneous_rr(np.array([True, False]), 0.5, 0.75, np.random.default_rng(21))
    assert np.array_equal(client.report("male").bits, expected)
    with pytest.raises(ValueError, match="category"):
        client.report("other")


def test_basic_mode_requires_categories():
    params = Params(k=4, h=1, f=0.0, p=0.5, q=0.75, m=1, mode="basic")
    with pytest.raises(ValueError):
        Client(params, rng=0)


@settings(max_examples=25, deadline=None)
@given(mode=st.sampled_from(["standard", "one_time"]), seed=st.integers(0, 2**32 - 1),
       n=st.integers(1, 20), f=st.sampled_from([0.0, 0.25, 0.5]))
def test_batch_encoder_matches_per_client_path(mode, seed, n, f):
    params = Params(k=24, h=2, f=f, p=0.25, q=0.75, m=3, mode=mode)
    values = [f"v{i % 5}" for i in range(n)]
    cohorts = [i % 3 for i in range(n)]
    signal = np.array([bloom_encode(v, c, params.k, params.h) for v, c in zip(values, cohorts)])
    batch = encode_fresh_batch(signal, params, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    for i in range(n):
        client = Client(params, rng=rng, cohort=cohorts[i])
        assert np.array_equal(make_report(values[i], client).bits, batch[i])
