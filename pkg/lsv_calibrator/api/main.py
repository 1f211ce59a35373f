"""FastAPI application for batch calibration jobs.

A client uploads a run config and a quote file, the calibration runs as a
background task, and the result bundle is downloaded as a zip archive.
"""

import logging
import os
import shutil
import uuid
import zipfile
from pathlib import Path
from typing import Dict

from fastapi import BackgroundTasks, FastAPI, File, HTTPException, UploadFile
from fastapi.responses import FileResponse, JSONResponse

from lsv_calibrator import __version__
from lsv_calibrator.config import RunConfig, build_problem, dump_config, parse_config
from lsv_calibrator.core.calibrator import Calibrator
from lsv_calibrator.core.errors import CalibrationError, InputError
from lsv_calibrator.core.model import validate_problem
from lsv_calibrator.core.parser import QuoteReader
from lsv_calibrator.core.reporter import BundleReporter

logger = logging.getLogger(__name__)

WORKDIR_ENV = "LSV_WORKDIR"

app = FastAPI(
    title="LSV Calibrator API",
    description="Calibrate a local-stochastic volatility model to European option prices",
    version=__version__,
)

# Store job status
job_status: Dict[str, Dict] = {}


def workdir() -> Path:
    root = Path(os.environ.get(WORKDIR_ENV, "lsv_jobs"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def process_calibration_job(job_id: str, config: RunConfig, quotes_path: Path) -> None:
    """Run one calibration and record its outcome in ``job_status``.

    Args:
        job_id: Unique job identifier.
        config: Validated run configuration.
        quotes_path: Uploaded quote file.
    """
    job = job_status[job_id]
    job["status"] = "processing"
    bundle_dir = workdir() / job_id / "bundle"
    try:
        quotes = QuoteReader(config.quote_file_config()).read_file(quotes_path)
        problem = build_problem(config, quotes)
        validate_problem(problem).raise_if_invalid()
        calibrator = Calibrator(config.optimizer, config.hjb, config.pricer)
        result = calibrator.calibrate(problem)
        BundleReporter(config.report).write_bundle(
            bundle_dir, result, problem, dump_config(config)
        )
    except CalibrationError as exc:
        logger.warning("Job %s failed: %s", job_id, exc)
        job.update({"status": "failed", "error": str(exc)})
        return
    except Exception as exc:
        logger.exception("Job %s failed unexpectedly", job_id)
        job.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
        return
    job.update(
        {
            "status": "completed",
            "converged": result.converged,
            "message": result.message,
            "objective": result.objective,
            "grad_norm": result.grad_norm,
            "bundle": str(bundle_dir),
        }
    )


@app.post("/calibrate")
async def submit_calibration(
    background_tasks: BackgroundTasks,
    quotes: UploadFile = File(...),
    config: UploadFile = File(...),
) -> JSONResponse:
    """Upload a config and a quote file and start a calibration.

    Returns:
        JSON response with the job ID.
    """
    job_id = str(uuid.uuid4())
    job_dir = workdir() / job_id
    job_dir.mkdir(parents=True)
    quotes_path = job_dir / "quotes.csv"
    with quotes_path.open("wb") as handle:
        shutil.copyfileobj(quotes.file, handle)
    try:
        run_config = parse_config((await config.read()).decode("utf-8"), "uploaded config")
    except (InputError, UnicodeDecodeError) as exc:
        shutil.rmtree(job_dir, ignore_errors=True)
        raise HTTPException(status_code=400, detail=str(exc))

    job_status[job_id] = {"status": "queued", "job_dir": str(job_dir)}
    background_tasks.add_task(process_calibration_job, job_id, run_config, quotes_path)
    return JSONResponse({"job_id": job_id, "status": "queued", "message": "Calibration started"})


@app.get("/status/{job_id}")
async def get_job_status(job_id: str) -> JSONResponse:
    if job_id not in job_status:
        raise HTTPException(status_code=404, detail="Job not found")
    return JSONResponse(job_status[job_id])


@app.get("/download/{job_id}")
async def download_results(job_id: str) -> FileResponse:
    """Download the result bundle of a completed job as a zip archive."""
    if job_id not in job_status:
        raise HTTPException(status_code=404, detail="Job not found")
    status = job_status[job_id]
    if status["status"] != "completed":
        raise HTTPException(
            status_code=400, detail=f"Job not completed (status: {status['status']})"
        )

    bundle_dir = Path(status["bundle"])
    zip_path = workdir() / job_id / "bundle.zip"
    with zipfile.ZipFile(zip_path, "w", zipfile.ZIP_DEFLATED) as archive:
        for member in sorted(bundle_dir.iterdir()):
            archive.write(member, member.name)
    return FileResponse(
        zip_path, media_type="application/zip", filename=f"lsv_bundle_{job_id}.zip"
    )


@app.delete("/jobs/{job_id}")
async def delete_job(job_id: str) -> JSONResponse:
    if job_id not in job_status:
        raise HTTPException(status_code=404, detail="Job not found")
    shutil.rmtree(job_status[job_id]["job_dir"], ignore_errors=True)
    del job_status[job_id]
    return JSONResponse({"status": "success", "message": f"Job {job_id} deleted"})
