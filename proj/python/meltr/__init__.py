"""Bi-level auxiliary-loss optimization: a loss-combining transformer trained
with approximate implicit differentiation, plus exact oracles for testing."""

from _meltr import (
    MeltrError,
    MeltrNet,
    gradcheck,
    quad_closed_form,
    quad_hypergrad,
    run_config,
)

__all__ = [
    "MeltrError",
    "MeltrNet",
    "gradcheck",
    "quad_closed_form",
    "quad_hypergrad",
    "run_config",
]
