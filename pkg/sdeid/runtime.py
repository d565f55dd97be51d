from __future__ import annotations

from typing import Optional

from sdeid import config
from sdeid.job_manager import JobManager


job_manager: Optional[JobManager] = None


def init_runtime(max_workers: int | None = None) -> None:
    global job_manager

    if job_manager is None:
        job_manager = JobManager(max_workers=max_workers or config.JOB_WORKERS)


def get_job_manager() -> JobManager:
    init_runtime()
    assert job_manager is not None
    return job_manager


def reset_runtime() -> None:
    global job_manager

    if job_manager is not None:
        job_manager.shutdown()
    job_manager = None
