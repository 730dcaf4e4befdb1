"""Preprocessing, dataset storage and the synthetic benchmark generator."""
