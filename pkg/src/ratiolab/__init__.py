"""Desk-scale DQN/Rainbow lab with the replay ratio as a first-class knob."""

__version__ = "0.1.0"
