"""Vision-aided proactive handover for millimetre-wave links, learned with deep Q-networks."""

__version__ = "0.1.0"
