import logging
import os
from datetime import datetime
from typing import List

import numpy as np
import yaml
from fastapi import APIRouter, BackgroundTasks, Depends, HTTPException
from sqlalchemy.orm import Session

from . import ledger, models, schemas
from .allocation import WRENCH_LABELS, build_allocation, thrust_labels
from .core import VehicleParams
from .database import SessionLocal, get_db
from .harness import run_scenario

logger = logging.getLogger(__name__)

router = APIRouter()


def output_root() -> str:
    return os.environ.get("TILTROPTER_OUTPUT_DIR", "./runs")


# --- Background Task Wrapper ---
# Runs the scenario with its own DB session, independent of the request
def run_scenario_task(run_id: int):
    db = SessionLocal()
    run = None
    try:
        run = db.query(models.ScenarioRun).filter(models.ScenarioRun.id == run_id).first()
        if run is None:
            logger.error(f"Scenario run {run_id} disappeared before execution")
            return
        cfg = schemas.ScenarioConfig.model_validate(yaml.safe_load(run.scenario))
        ledger.mark_running(db, run)
        result = run_scenario(cfg, output_dir=run.output_dir)
        ledger.finish_run(db, run, result)
    except Exception as e:
        logger.exception(f"Background execution of scenario run {run_id} failed")
        if run is not None and run.status != "completed":
            ledger.fail_run(db, run, e)
    finally:
        db.close()


@router.get("/health")
def health_check():
    return {"status": "healthy", "timestamp": datetime.utcnow().isoformat()}


@router.get("/allocation", response_model=schemas.AllocationOut)
def read_allocation():
    """Allocation matrix and pseudoinverse of the default vehicle."""
    model = build_allocation(VehicleParams())
    return schemas.AllocationOut(
        wrench_labels=list(WRENCH_LABELS),
        thrust_labels=thrust_labels(),
        A=model.A.tolist(),
        A_pinv=model.A_pinv.tolist(),
        singular_values=np.linalg.svd(model.A, compute_uv=False).tolist(),
    )


@router.post("/runs", response_model=schemas.ScenarioRun, status_code=202)
def create_run(
    request: schemas.ScenarioRunCreate,
    background_tasks: BackgroundTasks,
    db: Session = Depends(get_db),
):
    run = ledger.create_run(db, request.scenario)
    run.output_dir = request.scenario.output_dir or os.path.join(output_root(), f"run_{run.id}")
    db.commit()
    db.refresh(run)
    background_tasks.add_task(run_scenario_task, run.id)
    logger.info(f"Queued scenario run {run.id} ('{run.name}')")
    return run


@router.get("/runs", response_model=List[schemas.ScenarioRun])
def read_runs(skip: int = 0, limit: int = 100, status: str = None, db: Session = Depends(get_db)):
    query = db.query(models.ScenarioRun)
    if status:
        query = query.filter(models.ScenarioRun.status == status)
    return query.order_by(models.ScenarioRun.id.desc()).offset(skip).limit(limit).all()


@router.get("/runs/{run_id}", response_model=schemas.ScenarioRun)
def read_run(run_id: int, db: Session = Depends(get_db)):
    run = db.query(models.ScenarioRun).filter(models.ScenarioRun.id == run_id).first()
    if run is None:
        raise HTTPException(status_code=404, detail="Scenario run not found")
    return run
