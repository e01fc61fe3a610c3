"""fieldstream: online radiance-field reconstruction and render streaming
for robot teleoperation setups."""

__version__ = "0.1.0"
