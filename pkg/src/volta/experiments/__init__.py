"""Data handling, multi-seed runs, statistics and the command-line interface."""
