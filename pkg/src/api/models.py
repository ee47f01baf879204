from typing import Dict, List, Optional

from pydantic import BaseModel, Field, NonNegativeFloat, NonNegativeInt, model_validator


# --- Request Models ---

class ExplainRequest(BaseModel):
    """Either ``index`` (a test image of the configured dataset) or raw ``pixels`` must be given."""
    sigma: NonNegativeFloat = 0.0
    rule: str = "Z"
    index: Optional[NonNegativeInt] = None
    pixels: Optional[List[float]] = None
    target: Optional[NonNegativeInt] = None
    stabilizer: Optional[NonNegativeFloat] = None

    @model_validator(mode="after")
    def _one_input(self) -> "ExplainRequest":
        if (self.index is None) == (self.pixels is None):
            raise ValueError("give exactly one of 'index' or 'pixels'")
        if self.pixels is not None and self.target is None:
            raise ValueError("'target' is required when explaining raw pixels")
        return self


# --- API Response Models ---

class HealthResponse(BaseModel):
    status: str
    out_dir: str


class ArtifactStatus(BaseModel):
    sigma: float
    model: bool
    patterns: bool


class ExplainResponse(BaseModel):
    rule: str
    sigma: float
    target: int
    relevance: List[float]
    shape: Optional[List[int]] = None
    bias_relevance: float
    conservation_residual: float
    layer_totals: List[float] = Field(default_factory=list)


class ErrorResponse(BaseModel):
    detail: str
    error: str
    context: Dict[str, str] = Field(default_factory=dict)
