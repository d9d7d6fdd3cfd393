from .dataset_io import DatasetReader, DatasetWriter
from .manifest import ArtifactManifest

__all__ = ['DatasetReader', 'DatasetWriter', 'ArtifactManifest']
