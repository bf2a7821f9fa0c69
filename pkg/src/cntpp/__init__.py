"""Counterfactual neural temporal point processes for estimating how engaging with a
news post shifts what a user posts afterwards."""

from .diffkit import grl
from .events import ENGAGEMENT, GENERATION, EventSequence, MarkedEvent, TrainingSample
from .model import CntppModel, ModelConfig
from .world import World, WorldSpec, oracle_ites, simulate

__version__ = "0.1.0"
