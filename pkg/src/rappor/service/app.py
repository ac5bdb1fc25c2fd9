"""Collection service: clients post reports, the operator decodes aggregates.

Only per-cohort bit tallies are kept; individual reports are discarded
once counted.
"""

import threading

from fastapi import FastAPI, HTTPException

from rappor import analysis
from rappor.client import ReportFormatError, parse_report
from rappor.decoder import CohortCounts, DecodeOptions, decode_counts
from rappor.params import InvalidParams, Params, privacy_report
from rappor.service.schemas import (
    AttackRequest,
    AttackResponse,
    CollectionCreate,
    CollectionInfo,
    CountsResponse,
    DecodeRequest,
    DecodeResponse,
    LimitsRequest,
    LimitsResponse,
    ParamsModel,
    PrivacyResponse,
    SubmitRequest,
    SubmitResponse,
)


class Collection:
    def __init__(self, name: str, params: Params):
        self.name = name
        self.params = params
        self.counts = CohortCounts.zeros(params)
        self.lock = threading.Lock()

    def info(self) -> CollectionInfo:
        return CollectionInfo(name=self.name, params=ParamsModel(**self.params.to_dict()),
                              reports=self.counts.total, skipped=self.counts.skipped)


def _params(model: ParamsModel) -> Params:
    try:
        return Params.from_dict(model.model_dump())
    except InvalidParams as exc:
        raise HTTPException(status_code=422, detail=exc.errors) from None


def create_app() -> FastAPI:
    app = FastAPI(title="rappor collector")
    collections: dict[str, Collection] = {}
    registry_lock = threading.Lock()
    app.state.collections = collections

    def get(name: str) -> Collection:
        try:
            return collections[name]
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no collection {name!r}") from None

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/privacy", response_model=PrivacyResponse)
    def privacy(params: ParamsModel):
        try:
            return privacy_report(_params(params)).to_dict()
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None

    @app.post("/collections", response_model=CollectionInfo, status_code=201)
    def create_collection(body: CollectionCreate):
        params = _params(body.params)
        with registry_lock:
            existing = collections.get(body.name)
            if existing is not None:
                if existing.params != params:
                    raise HTTPException(status_code=409, detail="collection exists with other params")
                return existing.info()
            collections[body.name] = Collection(body.name, params)
            return collections[body.name].info()

    @app.get("/collections", response_model=list[CollectionInfo])
    def list_collections():
        return [c.info() for c in collections.values()]

    @app.get("/collections/{name}", response_model=CollectionInfo)
    def collection_info(name: str):
        return get(name).info()

    @app.post("/collections/{name}/reports", response_model=SubmitResponse)
    def submit(name: str, body: SubmitRequest):
        coll = get(name)
        batch = CohortCounts.zeros(coll.params)
        for item in body.reports:
            try:
                report = parse_report(item, coll.params)
            except ReportFormatError as exc:
                batch.skipped += 1
                key = str(exc).split(":")[0]
                batch.errors[key] = batch.errors.get(key, 0) + 1
                continue
            batch.add(report.cohort, report.bits)
        with coll.lock:
            coll.counts = coll.counts + batch
            total = coll.counts.total
        return SubmitResponse(accepted=batch.total, skipped=batch.skipped, total=total,
                              errors=batch.errors)

    @app.get("/collections/{name}/counts", response_model=CountsResponse)
    def counts(name: str):
        coll = get(name)
        with coll.lock:
            return CountsResponse(n=coll.counts.n.tolist(), counts=coll.counts.counts.tolist(),
                                  skipped=coll.counts.skipped)

    @app.post("/collections/{name}/decode", response_model=DecodeResponse)
    def decode(name: str, body: DecodeRequest):
        coll = get(name)
        with coll.lock:
            snapshot = coll.counts + CohortCounts.zeros(coll.params)
        try:
            options = DecodeOptions(alpha=body.alpha, correction=body.correction, seed=body.seed)
            result = decode_counts(snapshot, body.candidates, coll.params, options)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        rows = [dict(candidate=r.candidate, estimate=r.estimate, stderr=r.stderr,
                     p_value=r.p_value, proportion=r.proportion, significant=r.significant)
                for r in result.rows]
        return DecodeResponse(rows=rows, metadata=result.metadata())

    @app.post("/limits", response_model=LimitsResponse)
    def limits(body: LimitsRequest):
        try:
            threshold = analysis.detection_threshold(body.q, body.N, body.M, body.alpha)
            x = analysis.max_learnable_strings(body.q, body.N, body.M, body.alpha)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return LimitsResponse(threshold=threshold, max_learnable=x)

    @app.post("/attack", response_model=AttackResponse)
    def attack(body: AttackRequest):
        params = _params(body.params)
        s = params.h if body.s is None else body.s
        try:
            post = analysis.attacker_posterior(analysis.AttackerQuery(body.fv, params, s))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return AttackResponse(posterior=post, fdr=analysis.attacker_target_fdr(body.fv, params))

    return app


app = create_app()
