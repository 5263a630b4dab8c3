"""Corpus engineering toolkit for StackOverflow data dumps.

Turns dump XML into pre-training-ready token corpora, plans compute-optimal
model budgets, mines obsoletion-candidate answers, and verifies the masked
language model data/training path with a small pre-norm transformer encoder.
"""

__version__ = "0.1.0"
