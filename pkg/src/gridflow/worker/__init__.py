from gridflow.worker.client import Worker, WorkerConfig

__all__ = ["Worker", "WorkerConfig"]
