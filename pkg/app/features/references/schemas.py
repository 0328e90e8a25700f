from typing import List

from pydantic import BaseModel


class MixtureSummary(BaseModel):
    """Exported form of a piecewise Gaussian mixture, for cross-checking elsewhere."""

    beta: float
    breakpoints: List[float]
    means: List[float]
    sd: float
    weights: List[float]
    log_normalizer: float
    normalizer: float
