"""RDMD dataset files.

Layout (little-endian): b"RDMD", u16 version, u32 image count, then one u64 byte offset per
image. Each image record holds h, w, m (u32); the complex values as interleaved float32 pairs in
channel-major order; range and Doppler grids as float64; the endo mask as u32 run lengths starting
with an off-run; a length-prefixed JSON radar metadata block; and the label block (u32 count, then
range f64, range-rate f64, snr f32, row u32, col u32 per target).
"""
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Tuple, Union

import numpy as np

from src.core.models.radar import LabeledTarget, LabelSet, RadarMetadata, RdmImage
from src.core.models.state import EnuState
from src.utils.errors import ConfigError, UsageError
from src.utils.logging import logger

MAGIC = b"RDMD"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_DIMS = struct.Struct("<III")
_U32 = struct.Struct("<I")
_LABEL = struct.Struct("<ddfII")
_C64 = np.dtype("<c8")


def encode_runs(mask: np.ndarray) -> np.ndarray:
    """Alternating run lengths of a flattened boolean mask, the first run being False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def decode_runs(runs: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs.astype(np.int64))
    if flat.size != shape[0] * shape[1]:
        raise UsageError(f"Run lengths cover {flat.size} pixels, expected {shape[0] * shape[1]}")
    return flat.reshape(shape)


def _metadata_to_json(meta: RadarMetadata) -> bytes:
    data = asdict(meta)
    data["platform"] = meta.platform.as_array().tolist()
    return json.dumps(data, sort_keys=True).encode("utf-8")


def _metadata_from_json(raw: bytes) -> RadarMetadata:
    data = json.loads(raw.decode("utf-8"))
    data["platform"] = EnuState.from_array(data["platform"])
    return RadarMetadata(**data)


def encode_image(image: RdmImage, labels: LabelSet) -> bytes:
    parts = [_DIMS.pack(image.h, image.w, image.m)]
    parts.append(np.ascontiguousarray(np.transpose(image.values, (2, 0, 1)), dtype=_C64).tobytes())
    parts.append(np.asarray(image.range_bins, dtype="<f8").tobytes())
    parts.append(np.asarray(image.doppler_bins, dtype="<f8").tobytes())
    runs = encode_runs(image.endo_mask)
    parts.append(_U32.pack(len(runs)) + runs.astype("<u4").tobytes())
    meta = _metadata_to_json(image.metadata)
    parts.append(_U32.pack(len(meta)) + meta)
    parts.append(_U32.pack(len(labels.targets)))
    for t in labels.targets:
        parts.append(_LABEL.pack(t.range, t.range_rate, t.snr, t.row, t.col))
    return b"".join(parts)


def decode_image(data: bytes, offset: int = 0) -> Tuple[RdmImage, LabelSet]:
    h, w, m = _DIMS.unpack_from(data, offset)
    pos = offset + _DIMS.size
    n = h * w * m
    values = np.frombuffer(data, dtype=_C64, count=n, offset=pos).reshape(m, h, w).transpose(1, 2, 0).copy()
    pos += n * _C64.itemsize
    range_bins = np.frombuffer(data, dtype="<f8", count=h, offset=pos).copy()
    pos += 8 * h
    doppler_bins = np.frombuffer(data, dtype="<f8", count=w, offset=pos).copy()
    pos += 8 * w
    (n_runs,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    runs = np.frombuffer(data, dtype="<u4", count=n_runs, offset=pos)
    pos += 4 * n_runs
    endo = decode_runs(runs, (h, w))
    (meta_len,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    metadata = _metadata_from_json(data[pos:pos + meta_len])
    pos += meta_len
    (count,) = _U32.unpack_from(data, pos)
    pos += _U32.size

    labels = LabelSet(mask=np.zeros((h, w), dtype=np.uint8))
    for k in range(count):
        rng_m, rr, snr, row, col = _LABEL.unpack_from(data, pos)
        pos += _LABEL.size
        labels.mask[row, col] = 1
        labels.targets.append(LabeledTarget(range=rng_m, range_rate=rr, snr=snr, row=row, col=col, target_id=k))
    image = RdmImage(values=values, range_bins=range_bins, doppler_bins=doppler_bins, endo_mask=endo,
                     metadata=metadata)
    return image, labels


class DatasetWriter:
    """Streams images into an RDMD file; the index table is filled in on close."""

    def __init__(self, path: Union[str, Path], num_images: int):
        self.path = Path(path)
        self.num_images = num_images
        self.offsets: List[int] = []
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file: BinaryIO = open(self.path, "wb")
        except OSError as e:
            raise ConfigError(f"Cannot write dataset {self.path}: {e}")
        self._file.write(_HEADER.pack(MAGIC, VERSION, num_images))
        self._file.write(b"\0" * 8 * num_images)

    def append(self, image: RdmImage, labels: LabelSet):
        if len(self.offsets) >= self.num_images:
            raise UsageError(f"Dataset {self.path} was opened for {self.num_images} images")
        self.offsets.append(self._file.tell())
        self._file.write(encode_image(image, labels))

    def close(self):
        if self._file.closed:
            return
        if len(self.offsets) != self.num_images:
            self._file.close()
            raise UsageError(f"Dataset {self.path} holds {len(self.offsets)} of {self.num_images} images")
        self._file.seek(_HEADER.size)
        self._file.write(np.asarray(self.offsets, dtype="<u8").tobytes())
        self._file.close()
        logger.info(f"Wrote {self.num_images} images to {self.path} ({self.path.stat().st_size} bytes)")

    def __enter__(self) -> "DatasetWriter":
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._file.close()


class DatasetReader:
    """Random access to the images of an RDMD file."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        if not self.path.exists():
            raise ConfigError(f"Dataset not found: {self.path}")
        self._data = self.path.read_bytes()
        if len(self._data) < _HEADER.size:
            raise UsageError(f"{self.path} is too short to be a dataset")
        magic, version, count = _HEADER.unpack_from(self._data, 0)
        if magic != MAGIC:
            raise UsageError(f"{self.path} is not a dataset (magic {magic!r})")
        if version != VERSION:
            raise UsageError(f"{self.path}: unsupported dataset version {version}")
        self.offsets = np.frombuffer(self._data, dtype="<u8", count=count, offset=_HEADER.size)

    def __len__(self) -> int:
        return len(self.offsets)

    def __getitem__(self, index: int) -> Tuple[RdmImage, LabelSet]:
        if not -len(self) <= index < len(self):
            raise IndexError(f"Image {index} out of range for {len(self)} images")
        return decode_image(self._data, int(self.offsets[index]))

    def __iter__(self) -> Iterator[Tuple[RdmImage, LabelSet]]:
        for k in range(len(self)):
            yield self[k]

    def label_count(self, index: Optional[int] = None) -> int:
        if index is None:
            return sum(self[k][1].count for k in range(len(self)))
        return self[index][1].count
