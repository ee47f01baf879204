import logging
import os
from contextlib import asynccontextmanager
from typing import AsyncGenerator, List, Optional

from fastapi import APIRouter, FastAPI, Request
from fastapi.responses import JSONResponse

from src.cli.commands import Experiment, explain_test_image, find_artifacts
from src.cli.config import load_config
from src.errors import (
    ArtifactMissingError,
    DataFormatError,
    DegenerateDenominatorError,
    NumericalError,
    RejectedInputError,
)
from src.relevance.explain import explain
from src.relevance.rules import Rule
from .models import ArtifactStatus, ErrorResponse, ExplainRequest, ExplainResponse, HealthResponse

logger = logging.getLogger(__name__)


# --- Application Lifespan (Startup/Shutdown) ---
@asynccontextmanager
async def lifespan(app: FastAPI) -> AsyncGenerator[None, None]:
    """Loads the experiment configuration once; artifacts are read lazily per request."""
    logger.info("Starting explanation service...")
    app.state.experiment = Experiment(load_config(os.getenv("DTD_CONFIG") or None))
    logger.info(f"Serving artifacts from {app.state.experiment.config.out_dir}")
    yield
    logger.info("Explanation service stopped.")


app = FastAPI(
    title="dtd",
    description="Deep Taylor decomposition explanations for MNIST MLPs.",
    version="1.0.0",
    lifespan=lifespan,
)

router = APIRouter(prefix="/api")


def get_experiment() -> Experiment:
    return app.state.experiment


# --- Error mapping ---

def _error(status: int, request: Optional[Request], exc: Exception) -> JSONResponse:
    context = {"path": request.url.path} if request is not None else {}
    if isinstance(exc, DegenerateDenominatorError):
        context.update(rule=exc.rule, layer=str(exc.layer), neuron=str(exc.neuron))
    body = ErrorResponse(detail=str(exc), error=type(exc).__name__, context=context)
    return JSONResponse(status_code=status, content=body.model_dump())


@app.exception_handler(RejectedInputError)
async def rejected_input(request: Request, exc: RejectedInputError) -> JSONResponse:
    return _error(400, request, exc)


@app.exception_handler(DataFormatError)
async def data_format(request: Request, exc: DataFormatError) -> JSONResponse:
    return _error(404 if isinstance(exc, ArtifactMissingError) else 400, request, exc)


@app.exception_handler(NumericalError)
async def numerical(request: Request, exc: NumericalError) -> JSONResponse:
    logger.warning(f"Numerical failure on {request.url.path}: {exc}")
    return _error(422, request, exc)


# ============================================================================
# ENDPOINTS
# ============================================================================

@app.get("/health", summary="Liveness check", response_model=HealthResponse)
async def health():
    return HealthResponse(status="ok", out_dir=get_experiment().config.out_dir)


@router.get("/artifacts", summary="List trained models and pattern sets", response_model=List[ArtifactStatus])
async def list_artifacts():
    """One entry per configured noise level, telling whether its model and patterns exist on disk."""
    found = find_artifacts(get_experiment().config)
    return [ArtifactStatus(sigma=sigma, **status) for sigma, status in found.items()]


@router.post("/explain", summary="Explain one image", response_model=ExplainResponse)
async def explain_image(request: ExplainRequest):
    """Runs a rule on a test image (by index) or on raw pixels against the model of noise level ``sigma``."""
    experiment = get_experiment()
    rule = Rule.parse(request.rule)
    stabilizer = experiment.config.stabilizer if request.stabilizer is None else request.stabilizer

    if request.index is not None:
        report, dataset = explain_test_image(experiment, request.sigma, request.index, rule, request.target,
                                             stabilizer=stabilizer)
        shape = list(dataset.image_shape) if dataset.image_shape else None
    else:
        model = experiment.model(request.sigma)
        patterns = experiment.patterns(request.sigma, model) if rule.requires_patterns else None
        report = explain(model, request.pixels, request.target, rule, patterns, stabilizer)
        shape = None

    logger.info(f"Explained target {report.target} with {rule.value} at sigma={request.sigma}")
    return ExplainResponse(
        rule=rule.value,
        sigma=request.sigma,
        target=report.target,
        relevance=report.input_relevance.tolist(),
        shape=shape,
        bias_relevance=report.total_bias_relevance,
        conservation_residual=report.conservation_residual,
        layer_totals=[float(r.sum()) for r in report.layer_relevances],
    )


app.include_router(router)
