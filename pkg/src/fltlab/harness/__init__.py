"""Experiment orchestration: config files, CSV emission, CLI."""
