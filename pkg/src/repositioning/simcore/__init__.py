"""Semi-MDP ride-hailing marketplace simulator."""
from .behavior import CancellationModel, ChurnModel, CruisingModel, DataError
from .demand import DemandModel, load_trips_csv, save_trips_csv
from .engine import EpisodeResult, SimConfig, Simulator, SimView, TrajectoryEvent, episode_streams, run_episode
from .entities import (IDLE, N_OPTIONS, OFFLINE, REPOSITIONING, SERVING, DriverAgent, DriverState,
                       OptionRecord, SDContext, TransitionRecord, TripOrder)
from .matching import match_batch, solve_assignment
from .policy import Decision, Destination, PolicyError, RepositionPolicy, ReviewRequest, StayPolicy

__all__ = [
    "CancellationModel", "ChurnModel", "CruisingModel", "DataError", "DemandModel", "load_trips_csv",
    "save_trips_csv", "EpisodeResult", "SimConfig", "Simulator", "SimView", "TrajectoryEvent",
    "episode_streams", "run_episode", "IDLE", "N_OPTIONS", "OFFLINE", "REPOSITIONING", "SERVING",
    "DriverAgent", "DriverState", "OptionRecord", "SDContext", "TransitionRecord", "TripOrder",
    "match_batch", "solve_assignment", "Decision", "Destination", "PolicyError", "RepositionPolicy",
    "ReviewRequest", "StayPolicy",
]
