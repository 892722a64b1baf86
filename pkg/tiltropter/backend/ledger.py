"""Run-ledger bookkeeping shared by the API background tasks and `sweep --ledger`."""
import logging
from datetime import datetime
from typing import Optional

from sqlalchemy.orm import Session

from . import models
from .harness import ScenarioResult
from .schemas import ScenarioConfig, dump_scenario

logger = logging.getLogger(__name__)


def create_run(db: Session, cfg: ScenarioConfig, output_dir: Optional[str] = None) -> models.ScenarioRun:
    run = models.ScenarioRun(
        name=cfg.name,
        scenario=dump_scenario(cfg),
        seed=cfg.seed,
        status="pending",
        output_dir=output_dir,
    )
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def mark_running(db: Session, run: models.ScenarioRun) -> None:
    run.status = "running"
    run.started_at = datetime.utcnow()
    db.commit()


def finish_run(db: Session, run: models.ScenarioRun, result: ScenarioResult) -> None:
    metrics = result.metrics
    run.metrics = metrics.to_dict()
    run.status = "failed" if metrics.failed else "completed"
    run.error = metrics.failure
    run.completed_at = datetime.utcnow()
    db.commit()
    logger.info(f"Run {run.id} ('{run.name}') {run.status}")


def fail_run(db: Session, run: models.ScenarioRun, error: Exception) -> None:
    run.status = "failed"
    run.error = f"{type(error).__name__}: {error}"
    run.completed_at = datetime.utcnow()
    db.commit()
    logger.error(f"Run {run.id} ('{run.name}') failed: {run.error}")


def record_finished(db: Session, cfg: ScenarioConfig, metrics: dict, output_dir: Optional[str] = None) -> models.ScenarioRun:
    """Store a run executed outside the API (a sweep worker) as already finished."""
    run = create_run(db, cfg, output_dir=output_dir)
    run.metrics = metrics
    run.status = "failed" if metrics.get("failed") else "completed"
    run.error = metrics.get("failure")
    run.completed_at = datetime.utcnow()
    db.commit()
    return run
