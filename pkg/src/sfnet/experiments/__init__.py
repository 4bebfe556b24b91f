"""Experiment runners behind the ``sfnet`` command."""
