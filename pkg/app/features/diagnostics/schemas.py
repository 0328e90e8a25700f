from typing import List, Optional

from pydantic import BaseModel, model_validator


class SlopeFit(BaseModel):
    """Least-squares slope of ``log(values)`` against ``log(grid)`` with a bootstrap CI."""

    grid: List[float]
    values: List[float]
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    level: float = 0.95
    n_bootstrap: int

    @model_validator(mode="after")
    def check_interval(self):
        if not self.ci_low <= self.slope <= self.ci_high:
            raise ValueError("confidence interval must contain the slope")
        return self

    @property
    def ci_width(self) -> float:
        return self.ci_high - self.ci_low


class MetricRow(BaseModel):
    """One line of a results CSV."""

    experiment_id: str
    gamma: Optional[float] = None  # unset for checks that take no stepsize
    metric_name: str
    value: float
    stderr: Optional[float] = None
    n_samples: int
    seed: int
    lag: Optional[float] = None
