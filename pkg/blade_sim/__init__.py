"""
blade-sim: a deterministic simulator of blockchain-assisted decentralized
federated learning, where every client both trains and mines.
"""
from .blade_config import VERSION, Settings, load_sim_config
from .blade_schemas import MetricsReport, SimConfig
from .exceptions import BladeSimError
from .simulation import BladeSimulation, run

__version__ = VERSION

__all__ = ["BladeSimError", "BladeSimulation", "MetricsReport", "Settings", "SimConfig",
           "load_sim_config", "run", "__version__"]
