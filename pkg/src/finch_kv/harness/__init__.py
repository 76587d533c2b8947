"""Experiment harness: corpora, oracle, sweeps and the CLI."""
