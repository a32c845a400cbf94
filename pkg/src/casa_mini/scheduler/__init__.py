from .state import (
    Autoscaler,
    ClusterState,
    JobState,
    ScalePolicy,
    SchedulerError,
    TaskStreamEvent,
    WorkerState,
    autoscale_target,
    events_to_csv,
)

__all__ = [
    "Autoscaler",
    "ClusterState",
    "JobState",
    "ScalePolicy",
    "SchedulerError",
    "TaskStreamEvent",
    "WorkerState",
    "autoscale_target",
    "events_to_csv",
]
