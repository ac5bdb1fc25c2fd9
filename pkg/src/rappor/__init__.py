"""Randomized-response telemetry: client encoding, privacy accounting and decoding."""

from rappor.client import Client, MemoStore, Report, bloom_encode, make_report, parse_report, serialize_report
from rappor.decoder import DecodeOptions, DecodedDistribution, aggregate, decode, decode_counts
from rappor.params import InvalidParams, Params, PrivacyReport, privacy_report, validate

__version__ = "0.1.0"

__all__ = [
    "Client",
    "DecodeOptions",
    "DecodedDistribution",
    "InvalidParams",
    "MemoStore",
    "Params",
    "PrivacyReport",
    "Report",
    "aggregate",
    "bloom_encode",
    "decode",
    "decode_counts",
    "make_report",
    "parse_report",
    "privacy_report",
    "serialize_report",
    "validate",
]
