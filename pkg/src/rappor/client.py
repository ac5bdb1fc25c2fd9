"""Client-side encoding: Bloom signal, permanent and instantaneous randomized
response, memoization, and the report wire format.

Bit vectors are numpy bool arrays of length k. Randomness comes from a
``numpy.random.Generator`` with exactly one uniform draw per bit, in bit
order, for each randomization round.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from rappor.params import Params, response_probabilities, validate

HASH_TAG = b"RAPPOR1"


class ReportFormatError(ValueError):
    pass


class MemoStoreError(OSError):
    """The memo store could not be read or written."""


def as_bytes(value: str | bytes) -> bytes:
    return value.encode("utf-8") if isinstance(value, str) else bytes(value)


def assign_cohort(rng: np.random.Generator, m: int) -> int:
    if m < 1:
        raise ValueError("m must be >= 1")
    return int(rng.integers(m))


def bloom_indices(value: str | bytes, cohort: int, k: int, h: int) -> list[int]:
    """Bit positions set by ``value`` in ``cohort``; duplicates kept in hash order."""
    data = as_bytes(value)
    prefix = HASH_TAG + int(cohort).to_bytes(2, "big")
    out = []
    for i in range(h):
        digest = hashlib.sha256(prefix + bytes([i]) + data).digest()
        out.append(int.from_bytes(digest[:8], "big") % k)
    return out


def bloom_encode(value: str | bytes, cohort: int, k: int, h: int) -> np.ndarray:
    if not 1 <= h <= k:
        raise ValueError("need 1 <= h <= k")
    bits = np.zeros(k, dtype=bool)
    bits[bloom_indices(value, cohort, k, h)] = True
    return bits


def category_encode(value: str | bytes, categories: Sequence[str | bytes], k: int) -> np.ndarray:
    """Basic-mode signal: one bit, at the category's position in the list."""
    keys = [as_bytes(c) for c in categories]
    try:
        index = keys.index(as_bytes(value))
    except ValueError:
        raise ValueError(f"value {value!r} is not a declared category") from None
    if index >= k:
        raise ValueError(f"category index {index} does not fit in k={k} bits")
    bits = np.zeros(k, dtype=bool)
    bits[index] = True
    return bits


def permanent_rr(bits: np.ndarray, f: float, rng: np.random.Generator) -> np.ndarray:
    """Force each bit to 1 w.p. f/2, to 0 w.p. f/2, else keep it."""
    u = rng.random(len(bits))
    return np.where(u < 0.5 * f, True, np.where(u < f, False, bits))


def instantaneous_rr(bits: np.ndarray, p: float, q: float, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(bits))
    return u < np.where(bits, q, p)


def one_round_rr(bits: np.ndarray, f: float, p: float, q: float, rng: np.random.Generator) -> np.ndarray:
    """Single randomization used by the one-time modes.

    Each bit is reported 1 with the same marginals as the two-stage
    mechanism (q* for set bits, p* for unset bits), using one draw per bit.
    With f = 0 this is exactly ``instantaneous_rr``.
    """
    q_star, p_star = response_probabilities(f, p, q)
    u = rng.random(len(bits))
    return u < np.where(bits, q_star, p_star)


# --- packing ---------------------------------------------------------------

def pack_bits(bits: np.ndarray) -> str:
    """Bit i goes to byte i // 8 at position i % 8 counted from the LSB."""
    return np.packbits(np.asarray(bits, dtype=bool), bitorder="little").tobytes().hex()


def unpack_bits(text: str, k: int) -> np.ndarray:
    if not isinstance(text, str):
        raise ReportFormatError("bits must be a hex string")
    nbytes = (k + 7) // 8
    if len(text) != 2 * nbytes:
        raise ReportFormatError(f"bits must be {2 * nbytes} hex digits for k={k}, got {len(text)}")
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raise ReportFormatError(f"bad hex in bits: {text!r}") from None
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little").astype(bool)
    if bits[k:].any():
        raise ReportFormatError("padding bits beyond k must be zero")
    return bits[:k]


# --- reports ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Report:
    cohort: int
    bits: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, Report):
            return NotImplemented
        return self.cohort == other.cohort and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash((self.cohort, pack_bits(self.bits)))


def serialize_report(report: Report) -> bytes:
    obj = {"cohort": int(report.cohort), "bits": pack_bits(report.bits)}
    return json.dumps(obj, separators=(",", ":")).encode()


def parse_report(data: str | bytes | dict, params: Params) -> Report:
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ReportFormatError(f"not JSON: {exc}") from None
    if not isinstance(data, dict) or set(data) != {"cohort", "bits"}:
        raise ReportFormatError("report must be an object with exactly 'cohort' and 'bits'")
    cohort = data["cohort"]
    if isinstance(cohort, bool) or not isinstance(cohort, int):
        raise ReportFormatError("cohort must be an integer")
    if not 0 <= cohort < params.m:
        raise ReportFormatError(f"cohort {cohort} outside [0, {params.m})")
    return Report(cohort, unpack_bits(data["bits"], params.k))


def write_reports(reports: Iterable[Report], fh) -> int:
    n = 0
    for report in reports:
        fh.write(serialize_report(report).decode() + "\n")
        n += 1
    return n


# --- memoization -----------------------------------------------------------

def value_digest(value: str | bytes) -> bytes:
    return hashlib.sha256(as_bytes(value)).digest()


@dataclass(frozen=True, eq=False)
class PermanentResponse:
    value_digest: bytes
    cohort: int
    bits: np.ndarray


class MemoStore:
    """Permanent responses keyed by (value digest, cohort).

    With a path, every new entry is flushed to disk atomically before it is
    returned, so a response is never handed out unless it is durable.
    Without a path the store lives in memory only.
    """

    def __init__(self, path: str | Path | None = None, k: int | None = None):
        self.path = Path(path) if path is not None else None
        self.k = k
        self._entries: dict[str, str] = {}
        if self.path is not None and self.path.exists():
            try:
                data = json.loads(self.path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise MemoStoreError(f"cannot read memo store {self.path}: {exc}") from exc
            if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
                raise MemoStoreError(f"memo store {self.path} is not a string map")
            self._entries = data

    @staticmethod
    def key(digest: bytes, cohort: int) -> str:
        return f"{digest.hex()}:{cohort}"

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, digest: bytes, cohort: int, k: int) -> PermanentResponse | None:
        text = self._entries.get(self.key(digest, cohort))
        if text is None:
            return None
        try:
            bits = unpack_bits(text, k)
        except ReportFormatError as exc:
            raise MemoStoreError(f"corrupt memo entry: {exc}") from exc
        return PermanentResponse(digest, cohort, bits)

    def put(self, prr: PermanentResponse) -> None:
        key = self.key(prr.value_digest, prr.cohort)
        if key in self._entries:
            raise MemoStoreError(f"refusing to overwrite memo entry {key}")
        self._entries[key] = pack_bits(prr.bits)
        try:
            self.flush()
        except OSError:
            del self._entries[key]
            raise

    def flush(self) -> None:
        if self.path is None:
            return
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=self.path.name, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                json.dump(self._entries, fh, sort_keys=True)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)
        except OSError as exc:
            raise MemoStoreError(f"cannot write memo store {self.path}: {exc}") from exc


def signal_bits(value, cohort: int, params: Params, categories=None) -> np.ndarray:
    if params.is_basic:
        if categories is None:
            raise ValueError(f"mode {params.mode} needs a category list")
        return category_encode(value, categories, params.k)
    return bloom_encode(value, cohort, params.k, params.h)


def get_or_create_prr(value, cohort: int, params: Params, store: MemoStore,
                      rng: np.random.Generator, categories=None) -> PermanentResponse:
    """Memoized first randomization of ``value``.

    In the one-time modes the memoized vector is the single-round report
    itself; otherwise it is B' from ``permanent_rr``.
    """
    digest = value_digest(value)
    found = store.get(digest, cohort, params.k)
    if found is not None:
        return found
    signal = signal_bits(value, cohort, params, categories)
    if params.is_one_time:
        bits = one_round_rr(signal, params.f, params.p, params.q, rng)
    else:
        bits = permanent_rr(signal, params.f, rng)
    prr = PermanentResponse(digest, cohort, bits)
    store.put(prr)
    return prr


class Client:
    """One reporting client: a permanent cohort, a memo store and an RNG."""

    def __init__(self, params: Params, rng: np.random.Generator | int | None = None,
                 cohort: int | None = None, store: MemoStore | None = None,
                 categories: Sequence[str | bytes] | None = None):
        self.params = validate(params)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        if cohort is None:
            cohort = assign_cohort(self.rng, params.m)
        if not 0 <= cohort < params.m:
            raise ValueError(f"cohort {cohort} outside [0, {params.m})")
        self.cohort = cohort
        self.store = store if store is not None else MemoStore(k=params.k)
        if params.is_basic and categories is None:
            raise ValueError(f"mode {params.mode} needs a category list")
        self.categories = list(categories) if categories is not None else None

    def report(self, value: str | bytes) -> Report:
        return make_report(value, self)


def make_report(value: str | bytes, client: Client) -> Report:
    params = client.params
    prr = get_or_create_prr(value, client.cohort, params, client.store, client.rng, client.categories)
    if params.is_one_time:
        return Report(client.cohort, prr.bits.copy())
    return Report(client.cohort, instantaneous_rr(prr.bits, params.p, params.q, client.rng))


def encode_fresh_batch(signal: np.ndarray, params: Params, rng: np.random.Generator) -> np.ndarray:
    """Reports for clients that each submit once, encoded in bulk.

    ``signal`` is an (n, k) bool matrix. The draws are consumed row by row in
    the same order ``make_report`` would consume them for n fresh clients, so
    the output is bit-identical to the per-client path.
    """
    n, k = signal.shape
    if params.is_one_time:
        q_star, p_star = response_probabilities(params.f, params.p, params.q)
        u = rng.random((n, k))
        return u < np.where(signal, q_star, p_star)
    u = rng.random((n, 2 * k))
    prr_u, irr_u = u[:, :k], u[:, k:]
    half = 0.5 * params.f
    prr = np.where(prr_u < half, True, np.where(prr_u < params.f, False, signal))
    return irr_u < np.where(prr, params.q, params.p)
