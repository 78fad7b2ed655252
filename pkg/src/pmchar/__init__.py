"""CPU power-management characterization suite.

Probes for frequency-transition delay, CCX frequency coupling, idle-state
power and wakeup latency, and RAPL fidelity, runnable on real hardware or on
a simulated processor whose behavior encodes measured values.
"""

from .simcpu import SimModel, SimulatedBackend
from .topology import Topology, epyc_7502_dual, synthetic

__version__ = "0.1.0"

__all__ = ["SimModel", "SimulatedBackend", "Topology", "epyc_7502_dual", "synthetic", "__version__"]
