"""Simulation, reconstruction and analysis of continuously measured qubit trajectories."""
from .core import (
    CARDINAL_STATES,
    BlochState,
    Drive,
    PhysicalParams,
    Trajectory,
    VoltageRecord,
    averaging_efficiency,
    tilt_angle,
)
from .simulator import Dataset, SimRegime, generate_dataset, simulate_ensemble, simulate_trajectory
from .bayes import BayesCalibration, BayesianFilter, FilterVariant, calibrate, run_filter
from .lstm import LSTMFilter, LSTMModel, NetworkConfig, TrainingConfig, train
from .analysis import (
    BinGrid,
    TrajectoryAnalyzer,
    bin_increments,
    efficiency_calibration,
    extract_tilt,
    fit_diffusion,
    fit_drift,
    fit_memory_time,
    steady_radius,
    validate,
    windowed_analysis,
)
from .joint import lindblad_joint

__version__ = "0.1.0"

__all__ = [
    "CARDINAL_STATES", "BlochState", "Drive", "PhysicalParams", "Trajectory", "VoltageRecord",
    "averaging_efficiency", "tilt_angle", "Dataset", "SimRegime", "generate_dataset",
    "simulate_ensemble", "simulate_trajectory", "BayesCalibration", "BayesianFilter", "FilterVariant",
    "calibrate", "run_filter", "LSTMFilter", "LSTMModel", "NetworkConfig", "TrainingConfig", "train",
    "BinGrid", "TrajectoryAnalyzer", "bin_increments", "efficiency_calibration", "extract_tilt",
    "fit_diffusion", "fit_drift", "fit_memory_time", "steady_radius", "validate", "windowed_analysis",
    "lindblad_joint",
]
