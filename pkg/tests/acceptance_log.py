"""Shared store for acceptance verdicts printed at the end of a run."""

VERDICTS: dict = {}
