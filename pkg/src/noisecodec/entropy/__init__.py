"""Likelihood models, the rANS coder and the container format."""
