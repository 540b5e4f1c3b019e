"""Probabilistic-programming toolkit: a first-order language compiled
to graphical models, a higher-order language run through addressing
and CPS transforms on a message-driven machine, and inference over
both."""

__version__ = "0.1.0"
