"""skyloop: monocular video-to-trajectory extraction, simulated closed-loop
waypoint execution and trajectory evaluation for FPV drone footage."""

__version__ = "0.1.0"

from .errors import InputError, SkyloopError

__all__ = ["InputError", "SkyloopError", "__version__"]
