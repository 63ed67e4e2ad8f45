"""Synthetic data, toy text conditioning, pretraining, metrics, export and benchmarks."""
