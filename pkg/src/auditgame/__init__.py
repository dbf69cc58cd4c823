"""Regulating prediction algorithms with ex-ante restrictions and ex-post explainers.

The theory side (``state_model``, ``game_engine``, ``closed_form``) solves the
quadratic principal-agent game with linear restrictions and linear explainers.
The empirical side (``datagen``, ``train_audit``) trains credit-default models
under misalignment and explanation penalties on synthetic data.  ``cli`` ties
both together behind a batch command line.
"""

__version__ = "0.1.0"
