from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat

from app.features.potentials.models import PotentialSpec


class SamplerConfig(BaseModel):
    """Settings shared by every chain of a run; chains differ only in ``chain_id``."""

    model_config = ConfigDict(frozen=True)

    gamma: PositiveFloat
    n_steps: int = Field(ge=1)
    seed: int = Field(ge=0, lt=2**64)
    chain_id: int = Field(default=0, ge=0)
    # None means "use the potential's inverse temperature"; inf switches the noise off
    beta: Optional[PositiveFloat] = None

    def resolved_beta(self, spec: PotentialSpec) -> float:
        return spec.beta if self.beta is None else self.beta

    def with_chain(self, chain_id: int) -> "SamplerConfig":
        return self.model_copy(update={"chain_id": chain_id})
