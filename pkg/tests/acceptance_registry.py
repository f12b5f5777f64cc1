"""Outcome of each acceptance criterion, filled in by test_acceptance.py and
printed in the pytest terminal summary."""

RESULTS: dict[int, tuple[bool, str, str]] = {}
