"""Pull-based workflow engine: a table-driven server, polling workers and a study toolkit."""

__version__ = "0.1.0"
