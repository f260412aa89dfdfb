"""Dual-rate EMT/phasor co-simulation of unbalanced distribution feeders."""
__version__ = "0.1.0"

from .feeder import FeederModel, equivalent_series_impedance, load_feeder, parse_feeder, zip_power  # noqa: E402
from .phasors import PhasorSet  # noqa: E402

__all__ = ["FeederModel", "PhasorSet", "equivalent_series_impedance", "load_feeder", "parse_feeder",
           "zip_power", "__version__"]
