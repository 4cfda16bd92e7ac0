"""Agentic link adaptation for a simulated 5G NR downlink."""

from .agent import LinkAdaptationAgent, MetaGoal, Mode, TechnicalGoal
from .linksim import LinkAction, LinkConfig, LinkSimulator
from .olla import OllaController

__all__ = ["LinkAdaptationAgent", "MetaGoal", "Mode", "TechnicalGoal", "LinkAction", "LinkConfig",
           "LinkSimulator", "OllaController"]
__version__ = "0.1.0"
