"""Binary descriptor files, frame directories and video manifests.

Descriptor file layout (little endian), one section per channel::

    magic     8 bytes  b"IFMDESC1"
    channel   4 bytes  b"HOG\\0" or b"HOF\\0"
    dim       uint32   descriptor length
    count     uint32   number of records
    traj_len  uint32   trajectory length L (end frame = start frame + L)
    id_len    uint16   length of the UTF-8 trial id that follows
    trial_id  id_len bytes
    records   count x (int32 start_frame, float32 scale, dim x float32)

A file normally holds the HOG section followed by the HOF section.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError
from ..preprocess import INTENTIONS
from .dense import CHANNELS, DescriptorSet
from .flow import read_flow

DESC_MAGIC = b"IFMDESC1"
_HEADER = struct.Struct("<8s4sIIIH")
_FRAME_SUFFIXES = (".pgm", ".png")


def _record_dtype(dim):
    return np.dtype([("start", "<i4"), ("scale", "<f4"), ("values", "<f4", (dim,))])


def _channel_tag(channel):
    if channel not in CHANNELS:
        raise DataError(f"unknown descriptor channel {channel!r}")
    return channel.encode("ascii").ljust(4, b"\0")


def pack_descriptors(ds: DescriptorSet) -> bytes:
    dim = ds.vectors.shape[1]
    tid = ds.trial_id.encode("utf-8")
    rec = np.zeros(len(ds), dtype=_record_dtype(dim))
    rec["start"] = ds.start_frames
    rec["scale"] = ds.scales
    rec["values"] = ds.vectors
    return _HEADER.pack(DESC_MAGIC, _channel_tag(ds.channel), dim, len(ds), ds.traj_len, len(tid)) + tid + rec.tobytes()


def write_descriptors(path, sets):
    """Write one or more :class:`DescriptorSet` sections to ``path``."""
    with open(path, "wb") as fh:
        for ds in sets:
            fh.write(pack_descriptors(ds))


def read_descriptors(path) -> list:
    """All sections of a descriptor file, in file order."""
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < _HEADER.size:
            raise DataError(f"{path}: truncated descriptor header at byte {pos}")
        magic, tag, dim, count, traj_len, id_len = _HEADER.unpack_from(data, pos)
        if magic != DESC_MAGIC:
            raise DataError(f"{path}: not a descriptor file (bad magic at byte {pos})")
        channel = tag.rstrip(b"\0").decode("ascii", "replace")
        if channel not in CHANNELS:
            raise DataError(f"{path}: unknown channel tag {channel!r}")
        pos += _HEADER.size
        trial_id = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        dt = _record_dtype(dim)
        end = pos + count * dt.itemsize
        if end > len(data):
            raise DataError(f"{path}: {count} records announced but the file is too short")
        rec = np.frombuffer(data[pos:end], dtype=dt)
        pos = end
        out.append(DescriptorSet(channel, trial_id, rec["values"].astype(float),
                                 rec["start"].astype(np.int64), rec["scale"].astype(float), int(traj_len)))
    return out


def descriptor_pair(sets):
    """Pick the HOG and HOF sections out of ``sets``."""
    by = {}
    for ds in sets:
        by.setdefault(ds.channel, ds)
    missing = [c for c in CHANNELS if c not in by]
    if missing:
        raise DataError(f"descriptor file lacks a {missing[0]} section")
    return by["HOG"], by["HOF"]


# ------------------------------------------------------------------ frames

def read_frame(path):
    """Grayscale frame as floats in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=float)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from None
    return arr / 255.0


def write_frame(path, image):
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def _sorted_files(directory, suffixes):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"no such directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in suffixes)


def read_frame_dir(directory):
    files = _sorted_files(directory, _FRAME_SUFFIXES)
    if not files:
        raise DataError(f"{directory}: no PGM/PNG frames found")
    frames = [read_frame(p) for p in files]
    if any(f.shape != frames[0].shape for f in frames):
        raise DataError(f"{directory}: frames have differing dimensions")
    return frames


def read_flow_dir(directory):
    files = _sorted_files(directory, (".bin",))
    if not files:
        raise DataError(f"{directory}: no flow files found")
    return [read_flow(p) for p in files]


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class VideoEntry:
    trial_id: str
    subject_id: str
    intention: str
    frame_dir: Path
    fps: float
    flow_dir: Path | None = None

    def frames(self):
        return read_frame_dir(self.frame_dir)

    def flows(self):
        return read_flow_dir(self.flow_dir) if self.flow_dir is not None else None


def load_manifest(path) -> list:
    """Read a video manifest; relative directories resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    base = path.parent
    entries = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
            for key in ("trial_id", "subject_id", "intention", "frame_dir", "fps"):
                if key not in obj:
                    raise DataError(f"{where}: missing field {key!r}")
            intention = str(obj["intention"]).lower()
            if intention not in INTENTIONS:
                raise DataError(f"{where}: unknown intention {obj['intention']!r}")
            flow_dir = obj.get("flow_dir")
            entries.append(VideoEntry(str(obj["trial_id"]), str(obj["subject_id"]), intention,
                                      base / obj["frame_dir"], float(obj["fps"]),
                                      base / flow_dir if flow_dir else None))
    return entries
