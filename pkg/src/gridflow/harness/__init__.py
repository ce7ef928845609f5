"""Local multi-process cluster for integration and acceptance runs."""
from gridflow.harness.cluster import Cluster, ClusterError, ClusterSpec, Fault, FaultAction, spawn_cluster
from gridflow.harness.scenarios import SCENARIOS, ScenarioReport, run_scenario

__all__ = [
    "Cluster",
    "ClusterError",
    "ClusterSpec",
    "Fault",
    "FaultAction",
    "SCENARIOS",
    "ScenarioReport",
    "run_scenario",
    "spawn_cluster",
]
