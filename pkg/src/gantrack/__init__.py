"""Conditional GAN dynamics models trained with consensus optimization, plus
Lotka-Volterra evaluation, a mixture particle filter, and baselines."""
from . import baselines, dataio, diffcore, evalsuite, gameopt, lvsys, mixtracker, nets

__version__ = "0.1.0"

__all__ = ["baselines", "dataio", "diffcore", "evalsuite", "gameopt", "lvsys", "mixtracker", "nets"]
