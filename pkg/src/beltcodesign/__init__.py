"""Gear-ratio co-design of a belt-driven manipulator in joint and actuation space."""

__version__ = "0.1.0"
