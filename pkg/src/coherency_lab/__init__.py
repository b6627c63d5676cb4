"""Transient-stability workbench for meshed transmission grids.

Classical-model swing simulation, generator coherency detection via
correlation / synchronization-coefficient clustering, and the CF / SF /
CF-SF power transient-stability indices.
"""

__version__ = "0.1.0"
