"""Asynchronous job registry with polled status.

Jobs run on a single worker thread, so mutating operations on one dataset are
serialized; progress is monotone non-decreasing while running, and cancelled
jobs are expected to clean up their own partial outputs (the built-in
operations use temp-and-rename or abort-and-delete discipline).
"""
from __future__ import annotations

import queue
import threading
import traceback
import uuid
from dataclasses import dataclass, field


@dataclass
class JobStatus:
    id: str
    kind: str
    state: str = "queued"  # queued | running | done | failed | cancelled
    progress: float = 0.0
    message: str = ""
    result: dict | None = None
    _cancel: threading.Event = field(default_factory=threading.Event, repr=False)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "state": self.state,
            "progress": self.progress,
            "message": self.message,
            "result": self.result,
        }


class JobRegistry:
    def __init__(self):
        self.jobs: dict[str, JobStatus] = {}
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def submit(self, kind: str, fn) -> JobStatus:
        """fn(progress_cb, cancel_event) -> result dict (or None)."""
        job = JobStatus(id=uuid.uuid4().hex[:12], kind=kind)
        self.jobs[job.id] = job
        self._queue.put((job, fn))
        return job

    def get(self, job_id: str) -> JobStatus | None:
        return self.jobs.get(job_id)

    def cancel(self, job_id: str) -> bool:
        job = self.jobs.get(job_id)
        if job is None:
            return False
        job._cancel.set()
        if job.state == "queued":
            job.state = "cancelled"
        return True

    def _run(self):
        while True:
            job, fn = self._queue.get()
            if job.state == "cancelled":
                continue
            job.state = "running"

            def report(frac, job=job):
                job.progress = max(job.progress, min(float(frac), 1.0))

            try:
                result = fn(report, job._cancel)
                if job._cancel.is_set():
                    job.state = "cancelled"
                    job.message = "cancelled"
                else:
                    job.state = "done"
                    job.progress = 1.0
                    job.result = result if isinstance(result, dict) else {}
            except Exception as exc:  # surfaced through polling
                job.state = "failed"
                job.message = f"{type(exc).__name__}: {exc}"
                job.result = {"traceback": traceback.format_exc()}

    def wait(self, job_id: str, timeout: float = 60.0) -> JobStatus:
        """Poll until the job reaches a terminal state (testing helper)."""
        import time

        job = self.jobs[job_id]
        deadline = time.monotonic() + timeout
        while job.state in ("queued", "running"):
            if time.monotonic() > deadline:
                raise TimeoutError(f"job {job_id} still {job.state}")
            time.sleep(0.01)
        return job
