"""Multi-agent advantage actor-critic traffic signal control with emission accounting."""
from .marl import HyperParams
from .network import (NetworkSpec, grid_network, irregular_network, load_network,
                      pinwheel_network)

__all__ = ["HyperParams", "NetworkSpec", "grid_network", "irregular_network", "load_network",
           "pinwheel_network"]
__version__ = "0.1.0"
