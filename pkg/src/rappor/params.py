"""Mechanism parameters and closed-form differential-privacy accounting.

All epsilons are in nats.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

MODES = ("standard", "one_time", "basic", "basic_one_time")
BASIC_MODES = ("basic", "basic_one_time")
ONE_TIME_MODES = ("one_time", "basic_one_time")

MAX_K = 4096
MAX_H = 256  # hash index is packed into one byte
MAX_M = 65536  # cohort is packed into two bytes

FIELDS = ("k", "h", "f", "p", "q", "m", "mode")


class InvalidParams(ValueError):
    """Raised with every violated constraint, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class Params:
    k: int
    h: int
    f: float
    p: float
    q: float
    m: int = 1
    mode: str = "standard"

    @property
    def is_basic(self) -> bool:
        return self.mode in BASIC_MODES

    @property
    def is_one_time(self) -> bool:
        return self.mode in ONE_TIME_MODES

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Params":
        if not isinstance(data, dict):
            raise InvalidParams(["params must be a JSON object"])
        errors = [f"unknown field {key!r}" for key in data if key not in FIELDS]
        errors += [f"missing field {key!r}" for key in FIELDS if key not in data]
        if errors:
            raise InvalidParams(errors)
        for key in ("k", "h", "m"):
            if isinstance(data[key], bool) or not isinstance(data[key], int):
                errors.append(f"{key} must be an integer")
        for key in ("f", "p", "q"):
            if isinstance(data[key], bool) or not isinstance(data[key], (int, float)):
                errors.append(f"{key} must be a number")
        if not isinstance(data["mode"], str):
            errors.append("mode must be a string")
        if errors:
            raise InvalidParams(errors)
        params = cls(
            k=data["k"], h=data["h"], f=float(data["f"]), p=float(data["p"]),
            q=float(data["q"]), m=data["m"], mode=data["mode"],
        )
        return validate(params)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Params":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "Params":
        return cls.from_json(Path(path).read_text())


def check(params: Params) -> list[str]:
    """Return the list of violated constraints (empty when valid)."""
    errors = []
    if params.k < 1:
        errors.append("k >= 1 violated")
    if params.k > MAX_K:
        errors.append(f"k <= {MAX_K} violated")
    if params.h < 1:
        errors.append("h >= 1 violated")
    if params.h > params.k:
        errors.append("h <= k violated")
    if params.h > MAX_H:
        errors.append(f"h <= {MAX_H} violated")
    if params.m < 1:
        errors.append("m >= 1 violated")
    if params.m > MAX_M:
        errors.append(f"m <= {MAX_M} violated")
    for name in ("f", "p", "q"):
        value = getattr(params, name)
        if not 0.0 <= value <= 1.0:
            errors.append(f"{name} in [0, 1] violated")
    if not params.p < params.q:
        errors.append("p < q violated")
    if params.mode not in MODES:
        errors.append(f"mode in {MODES} violated")
    elif params.is_basic:
        if params.h != 1:
            errors.append(f"h = 1 for mode {params.mode} violated")
        if params.m != 1:
            errors.append(f"m = 1 for mode {params.mode} violated")
    return errors


def validate(params: Params) -> Params:
    errors = check(params)
    if errors:
        raise InvalidParams(errors)
    return params


def require_decodable(params: Params) -> None:
    """Decoding divides by (1 - f)(q - p); f = 1 is only usable for accounting."""
    validate(params)
    if params.f >= 1.0:
        raise InvalidParams(["f < 1 violated (required for decoding)"])


def response_probabilities(f: float, p: float, q: float) -> tuple[float, float]:
    """P(report bit = 1) for a set and an unset Bloom bit: (q_star, p_star)."""
    for name, value in (("f", f), ("p", p), ("q", q)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    mix = 0.5 * f * (p + q)
    return mix + (1.0 - f) * q, mix + (1.0 - f) * p


def epsilon_infinity(h: int, f: float) -> float:
    """Longitudinal bound of the memoized permanent response.

    Returns ``math.inf`` for f = 0: without permanent noise there is no
    longitudinal guarantee.
    """
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"f must lie in [0, 1], got {f}")
    if h < 1:
        raise ValueError("h must be >= 1")
    if f == 0.0:
        return math.inf
    half = 0.5 * f
    return 2.0 * h * math.log((1.0 - half) / half)


def epsilon_one(h: int, f: float, p: float, q: float) -> float:
    if h < 1:
        raise ValueError("h must be >= 1")
    q_star, p_star = response_probabilities(f, p, q)
    for name, value in (("q_star", q_star), ("p_star", p_star)):
        if not 0.0 < value < 1.0:
            raise ValueError(f"{name} = {value} is degenerate; single-report bound is unbounded")
    return h * math.log(q_star * (1.0 - p_star) / (p_star * (1.0 - q_star)))


@dataclass(frozen=True)
class PrivacyReport:
    q_star: float
    p_star: float
    eps_infinity: float
    eps_one: float

    def to_dict(self) -> dict:
        # JSON has no infinity; "unbounded" is spelled out
        eps_inf = "unbounded" if math.isinf(self.eps_infinity) else self.eps_infinity
        return {"q_star": self.q_star, "p_star": self.p_star,
                "eps_infinity": eps_inf, "eps_one": self.eps_one}

    def format(self, digits: int = 4) -> str:
        eps_inf = "unbounded" if math.isinf(self.eps_infinity) else f"{self.eps_infinity:.{digits}f}"
        return (f"q*        {self.q_star:.{digits}f}\n"
                f"p*        {self.p_star:.{digits}f}\n"
                f"eps_inf   {eps_inf}\n"
                f"eps_one   {self.eps_one:.{digits}f}")


def privacy_report(params: Params) -> PrivacyReport:
    validate(params)
    q_star, p_star = response_probabilities(params.f, params.p, params.q)
    return PrivacyReport(
        q_star=q_star,
        p_star=p_star,
        eps_infinity=epsilon_infinity(params.h, params.f),
        eps_one=epsilon_one(params.h, params.f, params.p, params.q),
    )
