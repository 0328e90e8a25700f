import uuid

from sqlalchemy import Column, DateTime, String, Text, Uuid
from sqlalchemy.sql import func

from app.infrastructure.database import Base


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Uuid, primary_key=True, index=True, default=uuid.uuid4)
    experiment_id = Column(String, index=True)
    kind = Column(String)
    input_hash = Column(String, index=True)
    status = Column(String, default="pending")  # pending, running, completed, failed
    report_json = Column(Text, nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
