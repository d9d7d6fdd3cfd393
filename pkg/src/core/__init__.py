from .services.mht import MultiHypothesisTracker
from .services.sensor import SensorSimulator

__all__ = ['MultiHypothesisTracker', 'SensorSimulator']
