"""HTTP service around the analytics core.

``uvicorn nuhyp.service:app`` serves the experiment runner plus a few
stateless time-set endpoints for small sequences.
"""

from __future__ import annotations

from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import ConfigError, ExperimentConfig, check_ordering, json_schema
from .report import run_experiment
from .times import TimesError, averaged_domination_prefix, hyperbolic_times, pliss_select

app = FastAPI(title="nuhyp", version=__version__)


class ExperimentResponse(BaseModel):
    exit_code: int
    metrics: dict
    expectations: list
    artifacts: dict[str, str]
    error: Optional[str] = None


class SequenceRequest(BaseModel):
    values: list[float] = Field(min_length=1)
    threshold: float
    op: Literal["hyperbolic", "domination_prefix", "pliss"] = "hyperbolic"
    bound: Optional[float] = None
    eta: Optional[float] = None


class SequenceResponse(BaseModel):
    times: list[int] = []
    prefix: Optional[int] = None
    horizon: int


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.get("/schema")
def schema() -> dict:
    return json_schema()


@app.post("/experiments", response_model=ExperimentResponse)
def experiments(cfg: ExperimentConfig) -> ExperimentResponse:
    try:
        check_ordering(cfg)
        res = run_experiment(cfg)
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None
    return ExperimentResponse(exit_code=res.exit_code, metrics=res.metrics,
                              expectations=res.expectations, artifacts=res.artifacts,
                              error=res.error)


@app.post("/sequences/times", response_model=SequenceResponse)
def sequence_times(req: SequenceRequest) -> SequenceResponse:
    a = np.asarray(req.values, dtype=float)
    try:
        if req.op == "hyperbolic":
            ts = hyperbolic_times(a, req.threshold)
        elif req.op == "pliss":
            if req.bound is None or req.eta is None:
                raise TimesError("pliss needs bound and eta")
            ts = pliss_select(a, req.bound, req.eta, req.threshold)
        else:
            return SequenceResponse(prefix=averaged_domination_prefix(a, req.threshold),
                                    horizon=a.size)
    except TimesError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None
    return SequenceResponse(times=ts.times.tolist(), horizon=ts.horizon)
