"""Built-in jobs.  Importing this package fills :data:`REGISTRY`."""
from gridflow.jobs import mandelbrot, replace_tag, results, surrogate, transfer  # noqa: F401
from gridflow.jobs.base import REGISTRY, JobContext, JobError

__all__ = ["REGISTRY", "JobContext", "JobError"]
