"""Executable-model auditing of hidden communication systems: seeded
discrete-event worlds, passive detectors, Monte-Carlo estimation and
certified KL lower bounds."""

__version__ = "0.1.0"
