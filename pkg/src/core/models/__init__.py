from .state import EnuState, Scenario, Trajectory
from .radar import LabelSet, RadarMetadata, RdmImage
from .detection import Detection, SubpixelDetection

__all__ = ['EnuState', 'Scenario', 'Trajectory', 'LabelSet', 'RadarMetadata', 'RdmImage', 'Detection',
           'SubpixelDetection']
