"""Assortment-aware neural choice models, classical choice models and
their estimators."""

__version__ = "0.1.0"
