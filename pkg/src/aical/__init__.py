"""Anomaly-aware calibration of multi-horizon safety predictions."""
from .calib import CalibratorParams, apply_calibrator, fit_calibrator
from .datamodel import DataError, FrameRecord, SequenceLog, load_log

__version__ = "0.1.0"
__all__ = ["CalibratorParams", "apply_calibrator", "fit_calibrator", "DataError", "FrameRecord",
           "SequenceLog", "load_log", "__version__"]
