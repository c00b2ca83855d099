"""forgerl: a desk-scale RL harness for tool-calling policies."""

__version__ = "0.1.0"
