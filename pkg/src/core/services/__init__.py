from .sensor import SensorSimulator
from .unet_detector import UNetDetector
from .cvae_uncertainty import CvaeUncertainty
from .mht import MultiHypothesisTracker

__all__ = ['SensorSimulator', 'UNetDetector', 'CvaeUncertainty', 'MultiHypothesisTracker']
