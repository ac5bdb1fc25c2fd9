"""Request and response models for the collection service."""

from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field


class ParamsModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int
    h: int
    f: float
    p: float
    q: float
    m: int
    mode: Literal["standard", "one_time", "basic", "basic_one_time"]


class PrivacyResponse(BaseModel):
    q_star: float
    p_star: float
    eps_infinity: Union[float, Literal["unbounded"]]
    eps_one: float


class ReportModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cohort: int
    bits: str


class CollectionCreate(BaseModel):
    name: str = Field(min_length=1, max_length=128, pattern=r"^[A-Za-z0-9_.-]+$")
    params: ParamsModel


class CollectionInfo(BaseModel):
    name: str
    params: ParamsModel
    reports: int
    skipped: int


class SubmitRequest(BaseModel):
    reports: list[dict]


class SubmitResponse(BaseModel):
    accepted: int
    skipped: int
    total: int
    errors: dict[str, int] = {}


class CountsResponse(BaseModel):
    n: list[int]
    counts: list[list[int]]
    skipped: int


class DecodeRequest(BaseModel):
    candidates: list[str] = Field(min_length=1)
    alpha: float = Field(0.05, gt=0, lt=1)
    correction: Literal["bonferroni", "bh", "benjamini_hochberg"] = "bonferroni"
    seed: int = 0


class DecodedRowModel(BaseModel):
    candidate: str
    estimate: float
    stderr: float
    p_value: float
    proportion: float
    significant: bool


class DecodeResponse(BaseModel):
    rows: list[DecodedRowModel]
    metadata: dict


class LimitsRequest(BaseModel):
    q: float = Field(gt=0.5, le=1)
    N: float = Field(ge=1)
    M: int = Field(ge=1)
    alpha: float = Field(0.05, gt=0, lt=1)


class LimitsResponse(BaseModel):
    threshold: float
    max_learnable: int


class AttackRequest(BaseModel):
    params: ParamsModel
    fv: float = Field(ge=0, le=1)
    s: Optional[int] = None


class AttackResponse(BaseModel):
    posterior: float
    fdr: float
