from datetime import datetime

from sqlalchemy import JSON, Column, DateTime, Integer, String, Text

from .database import Base


class ScenarioRun(Base):
    """Ledger entry for one closed-loop scenario run."""
    __tablename__ = "scenario_runs"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String(255), index=True)
    scenario = Column(Text)  # YAML of the validated ScenarioConfig
    seed = Column(Integer, default=0)
    status = Column(String(20), default="pending")  # pending, running, completed, failed
    metrics = Column(JSON, nullable=True)
    error = Column(Text, nullable=True)
    output_dir = Column(String(1024), nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    started_at = Column(DateTime, nullable=True)
    completed_at = Column(DateTime, nullable=True)
