"""Experiment harness: synthetic streams, configs, runners, metrics and reports."""
