"""Synthetic populations, end-to-end simulations and their scoring."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from rappor import analysis
from rappor.client import Client, MemoStore, Report, bloom_indices, encode_fresh_batch
from rappor.decoder import CohortCounts, DecodedDistribution, DecodeOptions, decode_counts
from rappor.numerics import norm_cdf
from rappor.params import Params, epsilon_one, validate

log = logging.getLogger(__name__)

# top string gets exactly 5% of the mass among 100 nonzero strings
DEFAULT_DECAY_RATE = 0.05097155056521286
NORMAL_SUPPORT = (0, 100)
CHUNK = 8192

FULL_SCALE = {"n": 1_000_000, "replicates": 10}
DESK_SCALE = {"n": 100_000, "replicates": 3}


# --- populations -------------------------------------------------------------

@dataclass(frozen=True)
class PopulationSpec:
    kind: str
    mu: float = 50.0
    sigma: float = 10.0
    num_nonzero: int = 100
    num_zero: int = 100
    rate: float = DEFAULT_DECAY_RATE
    num_values: int = 0
    values: tuple = ()
    prefix: str = "V_"

    @classmethod
    def normal(cls, mu=50.0, sigma=10.0):
        return cls("normal", mu=mu, sigma=sigma)

    @classmethod
    def exponential_decay(cls, num_nonzero=100, num_zero=100, rate=DEFAULT_DECAY_RATE):
        return cls("exponential_decay", num_nonzero=num_nonzero, num_zero=num_zero, rate=rate)

    @classmethod
    def uniform(cls, num_values):
        return cls("uniform", num_values=num_values)

    @classmethod
    def explicit(cls, pairs):
        return cls("explicit", values=tuple((str(v), float(p)) for v, p in pairs))

    @classmethod
    def from_dict(cls, data: dict) -> "PopulationSpec":
        data = dict(data)
        if data.get("kind") == "explicit":
            values = data.pop("values")
            if isinstance(values, dict):
                values = list(values.items())
            data["values"] = tuple((str(v), float(p)) for v, p in values)
        return cls(**data)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "normal":
            out.update(mu=self.mu, sigma=self.sigma)
        elif self.kind == "exponential_decay":
            out.update(num_nonzero=self.num_nonzero, num_zero=self.num_zero, rate=self.rate)
        elif self.kind == "uniform":
            out.update(num_values=self.num_values)
        else:
            out.update(values=[list(v) for v in self.values])
        return out


@dataclass(frozen=True)
class Population:
    labels: list[str]
    probs: np.ndarray

    def __post_init__(self):
        if len(self.labels) != len(self.probs):
            raise ValueError("labels and probabilities differ in length")
        if (self.probs < 0).any() or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be nonnegative and sum to 1")


def gen_population(spec: PopulationSpec) -> Population:
    if spec.kind == "normal":
        lo, hi = NORMAL_SUPPORT
        x = np.arange(lo, hi + 1, dtype=float)
        mass = norm_cdf((x + 0.5 - spec.mu) / spec.sigma) - norm_cdf((x - 0.5 - spec.mu) / spec.sigma)
        return Population([str(int(v)) for v in x], mass / mass.sum())
    if spec.kind == "exponential_decay":
        weights = np.exp(-spec.rate * np.arange(spec.num_nonzero))
        probs = np.concatenate([weights / weights.sum(), np.zeros(spec.num_zero)])
        n = spec.num_nonzero + spec.num_zero
        return Population([f"{spec.prefix}{i}" for i in range(1, n + 1)], probs)
    if spec.kind == "uniform":
        n = spec.num_values
        return Population([f"{spec.prefix}{i}" for i in range(1, n + 1)], np.full(n, 1.0 / n))
    if spec.kind == "explicit":
        labels = [v for v, _ in spec.values]
        return Population(labels, np.asarray([p for _, p in spec.values], dtype=float))
    raise ValueError(f"unknown population kind {spec.kind!r}")


# --- simulation --------------------------------------------------------------

@dataclass
class SimConfig:
    population: PopulationSpec
    params: Params
    clients: int
    seed: int = 0
    candidates: list[str] | None = None  # default: every population label
    options: DecodeOptions = field(default_factory=DecodeOptions)

    def candidate_labels(self, population: Population) -> list[str]:
        return list(self.candidates) if self.candidates is not None else list(population.labels)


@dataclass
class ReportBatch:
    """Reports held column-wise: cohorts (n,) and LSB-first packed bits (n, ceil(k/8))."""

    cohorts: np.ndarray
    packed: np.ndarray
    k: int

    def __len__(self) -> int:
        return len(self.cohorts)

    def bits(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        return np.unpackbits(self.packed[lo:hi], axis=1, bitorder="little", count=self.k).astype(bool)

    def __iter__(self) -> Iterator[Report]:
        for lo in range(0, len(self), CHUNK):
            block = self.bits(lo, lo + CHUNK)
            for c, b in zip(self.cohorts[lo:lo + CHUNK], block):
                yield Report(int(c), b)

    def lines(self) -> Iterator[str]:
        for c, row in zip(self.cohorts, self.packed):
            yield f'{{"cohort":{int(c)},"bits":"{row.tobytes().hex()}"}}'

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def aggregate(self, params: Params) -> CohortCounts:
        counts = CohortCounts.zeros(params)
        for lo in range(0, len(self), CHUNK):
            counts.add_batch(self.cohorts[lo:lo + CHUNK], self.bits(lo, lo + CHUNK))
        return counts


@dataclass
class SimResult:
    reports: ReportBatch
    labels: list[str]
    truth: np.ndarray  # sampled count per population label
    population: Population

    @property
    def n(self) -> int:
        return int(self.truth.sum())

    def truth_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["value", "probability", "count", "proportion"])
        for label, p, c in zip(self.labels, self.population.probs, self.truth):
            writer.writerow([label, repr(float(p)), int(c), repr(float(c) / max(self.n, 1))])
        return buf.getvalue()


def _signal_table(labels: Sequence[str], params: Params) -> np.ndarray:
    """(values, m, k) bool table of Bloom/category signals."""
    table = np.zeros((len(labels), params.m, params.k), dtype=bool)
    for v, label in enumerate(labels):
        if params.is_basic:
            table[v, 0, v] = True
        else:
            for j in range(params.m):
                table[v, j, bloom_indices(label, j, params.k, params.h)] = True
    return table


def simulate_reports(config: SimConfig, batched: bool = True) -> SimResult:
    """One report per simulated client.

    The RNG stream is: every client's value, then every client's cohort,
    then each client's encoding draws in client order. ``batched=False``
    runs the same stream through per-client ``Client`` objects and yields
    identical reports; it exists as the reference path.
    """
    params = validate(config.params)
    population = gen_population(config.population)
    labels = population.labels
    if params.is_basic and len(labels) > params.k:
        raise ValueError(f"{len(labels)} categories do not fit in k={params.k}")
    rng = np.random.default_rng(config.seed)
    n = int(config.clients)
    values = rng.choice(len(labels), size=n, p=population.probs)
    cohorts = rng.integers(params.m, size=n)
    truth = np.bincount(values, minlength=len(labels))
    nbytes = (params.k + 7) // 8
    packed = np.zeros((n, nbytes), dtype=np.uint8)
    if batched:
        table = _signal_table(labels, params)
        for lo in range(0, n, CHUNK):
            hi = min(lo + CHUNK, n)
            signal = table[values[lo:hi], cohorts[lo:hi]]
            bits = encode_fresh_batch(signal, params, rng)
            packed[lo:hi] = np.packbits(bits, axis=1, bitorder="little")
    else:
        categories = labels if params.is_basic else None
        for i in range(n):
            client = Client(params, rng, cohort=int(cohorts[i]), store=MemoStore(),
                            categories=categories)
            report = client.report(labels[values[i]])
            packed[i] = np.packbits(report.bits, bitorder="little")
    return SimResult(ReportBatch(cohorts, packed, params.k), labels, truth, population)


# --- evaluation --------------------------------------------------------------

@dataclass
class EvalMetrics:
    precision: float
    recall: float
    raw_recall: float
    false_positives: int
    l1_error: float
    detected: int
    floor_count: float
    table: list[dict] = field(default_factory=list)

    def to_row(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "raw_recall": self.raw_recall,
                "false_positives": self.false_positives, "l1_error": self.l1_error,
                "detected": self.detected}


def detection_floor(params: Params, n: int, M: int, alpha: float) -> float:
    """Smallest count any decoder could flag at this privacy level.

    Uses the lossless one-bit-per-category mechanism with p = 0.5 and the
    same single-report epsilon, which bounds every Bloom configuration, so
    the floor is comparable across h, k and m.
    """
    try:
        eps = epsilon_one(params.h, params.f, params.p, params.q)
    except ValueError:
        return 0.0  # deterministic reports: nothing is undetectable
    q_equiv = 1.0 / (1.0 + math.exp(-eps))
    if q_equiv <= 0.5:
        return math.inf
    return analysis.detection_threshold(q_equiv, n, M, alpha)


def estimated_proportions(decoded: DecodedDistribution, labels: Sequence[str]) -> np.ndarray:
    rows = decoded.by_candidate()
    return np.array([rows[l].proportion if l in rows else 0.0 for l in labels])


def normalized_l1(decoded: DecodedDistribution, labels: Sequence[str], truth: np.ndarray) -> float:
    """L1 between the clipped, renormalized estimate and the sampled distribution."""
    est = np.clip(estimated_proportions(decoded, labels), 0.0, None)
    total = est.sum()
    est = est / total if total > 0 else est
    true = truth / truth.sum()
    return float(np.abs(est - true).sum())


def evaluate(decoded: DecodedDistribution, labels: Sequence[str], truth: np.ndarray,
             params: Params | None = None) -> EvalMetrics:
    """Score significant candidates against sampled truth.

    An empty detection set has precision 1 (no false claims). Recall counts
    only strings whose sampled count clears the detection floor; raw recall
    counts every string that occurred.
    """
    truth = np.asarray(truth)
    n = int(truth.sum())
    rows = decoded.by_candidate()
    detected = {r.candidate for r in decoded.significant()}
    true_set = {l for l, c in zip(labels, truth) if c > 0}
    if params is not None and n > 0:
        floor = detection_floor(params, n, max(decoded.M, 1), decoded.alpha)
    else:
        floor = 0.0
    above = {l for l, c in zip(labels, truth) if c > 0 and c >= floor}
    hits = detected & true_set
    precision = len(hits) / len(detected) if detected else 1.0
    recall = len(detected & above) / len(above) if above else 1.0
    raw_recall = len(hits) / len(true_set) if true_set else 1.0
    est = estimated_proportions(decoded, labels)
    true_prop = truth / n if n else np.zeros(len(truth))
    table = []
    for label, c, e in zip(labels, truth, est):
        r = rows.get(label)
        table.append({"value": label, "truth": int(c), "true_prop": float(c / n) if n else 0.0,
                      "estimate": r.estimate if r else 0.0, "est_prop": float(e),
                      "significant": label in detected})
    return EvalMetrics(precision, recall, raw_recall, len(detected - true_set),
                       float(np.abs(est - true_prop).sum()), len(detected), floor, table)


def run_once(config: SimConfig) -> tuple[SimResult, DecodedDistribution, EvalMetrics]:
    sim = simulate_reports(config)
    counts = sim.reports.aggregate(config.params)
    candidates = config.candidate_labels(sim.population)
    decoded = decode_counts(counts, candidates, config.params, config.options)
    # truth aligned with the candidate list; unknown candidates have count 0
    index = {l: i for i, l in enumerate(sim.labels)}
    truth = np.array([sim.truth[index[c]] if c in index else 0 for c in candidates])
    return sim, decoded, evaluate(decoded, candidates, truth, config.params)


# --- experiments -------------------------------------------------------------

def replicate_seed(seed: int, point: int, replicate: int) -> int:
    return int(np.random.SeedSequence([seed, point, replicate]).generate_state(1, np.uint64)[0])


EXPERIMENT_COLUMNS = ("k", "h", "m", "f", "p", "q", "N", "replicates", "precision", "recall",
                      "l1_error", "false_positives", "raw_recall", "failed")


def _run_replicate(args) -> dict | str:
    config = args
    try:
        return run_once(config)[2].to_row()
    except Exception as exc:  # recorded per replicate, never silently dropped
        log.warning("replicate failed: %s", exc)
        return f"{type(exc).__name__}: {exc}"


def run_experiment(grid: Sequence[SimConfig], replicates: int, seed: int = 0,
                   workers: int = 1) -> list[dict]:
    """Mean metrics per grid point over ``replicates`` independently seeded runs.

    Seeds depend only on (seed, grid index, replicate index), so results do
    not depend on ``workers``.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    jobs = [replace(cfg, seed=replicate_seed(seed, i, r))
            for i, cfg in enumerate(grid) for r in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(job) for job in jobs]
    rows = []
    for i, cfg in enumerate(grid):
        chunk = results[i * replicates:(i + 1) * replicates]
        ok = [r for r in chunk if isinstance(r, dict)]
        p = cfg.params
        row = {"k": p.k, "h": p.h, "m": p.m, "f": p.f, "p": p.p, "q": p.q, "N": cfg.clients,
               "replicates": len(ok), "failed": len(chunk) - len(ok)}
        for key in ("precision", "recall", "l1_error", "false_positives", "raw_recall"):
            row[key] = float(np.mean([r[key] for r in ok])) if ok else math.nan
        rows.append(row)
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def expand_grid(data: dict) -> tuple[list[SimConfig], int, int]:
    """Grid file: base params, lists for any of k/h/m/f/p/q, population, n, replicates, seed.

    ``"epsilon_one": x`` (optional) re-solves q per point so every
    configuration gets the same single-report bound with the base p and f.
    """
    base = dict(data["params"])
    axes = {key: data[key] for key in ("k", "h", "m", "f", "p", "q") if key in data}
    population = PopulationSpec.from_dict(data.get("population", {"kind": "exponential_decay"}))
    n = int(data.get("n", DESK_SCALE["n"]))
    replicates = int(data.get("replicates", DESK_SCALE["replicates"]))
    options = DecodeOptions(**data.get("options", {}))
    grid = []
    for combo in itertools.product(*axes.values()):
        values = dict(base, **dict(zip(axes, combo)))
        if "epsilon_one" in data:
            values["q"] = q_for_epsilon_one(data["epsilon_one"], values["h"], values["f"], values["p"])
        grid.append(SimConfig(population, Params.from_dict(values), n, options=options))
    return grid, replicates, int(data.get("seed", 0))


def q_for_epsilon_one(eps: float, h: int, f: float, p: float) -> float:
    """q giving the requested single-report bound at fixed h, f, p (bisection)."""
    lo, hi = p, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        try:
            val = epsilon_one(h, f, p, mid)
        except ValueError:
            val = math.inf
        lo, hi = (mid, hi) if val < eps else (lo, mid)
    return 0.5 * (lo + hi)


def write_simulation(out: Path, sim: SimResult, decoded: DecodedDistribution,
                     metrics: list[EvalMetrics]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sim.reports.write_jsonl(out / "reports.jsonl")
    (out / "truth.csv").write_text(sim.truth_csv())
    decoded.write(out / "decoded.csv")
    rows = [dict(replicate=i, **m.to_row()) for i, m in enumerate(metrics)]
    if len(metrics) > 1:
        mean = {key: float(np.mean([r[key] for r in rows])) for key in metrics[0].to_row()}
        rows.append(dict(replicate="mean", **mean))
    cols = ["replicate", "precision", "recall", "raw_recall", "false_positives", "l1_error", "detected"]
    (out / "metrics.csv").write_text(rows_to_csv(rows, cols))
