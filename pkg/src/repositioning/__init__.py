"""Vehicle repositioning for ride-hailing fleets: simulation, value learning and planning."""

__version__ = "0.1.0"
