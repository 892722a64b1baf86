#!/usr/bin/env python3
"""Batch run API, or the command-line harness when called with arguments."""
import logging
import sys

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from tiltropter.backend.cli import configure_logging, main as cli_main
from tiltropter.backend.database import Base, engine
from tiltropter.backend.main import router as main_router

load_dotenv()
configure_logging()
logger = logging.getLogger(__name__)

app = FastAPI(title="Tilt-Ropter - Scenario Runs API")


@app.on_event("startup")
def on_startup():
    Base.metadata.create_all(bind=engine)
    logger.info("Scenario ledger tables ready")


app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(main_router, prefix="/api")

if __name__ == "__main__":
    # `python run.py` alone starts the API, anything else goes to the CLI
    sys.exit(cli_main(sys.argv[1:] or ["serve"]))
