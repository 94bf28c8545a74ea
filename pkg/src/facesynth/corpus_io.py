"""On-disk corpus container: one directory holding topology files and entries.bin.

Layout::

    corpus_dir/
      topology.obj   template connectivity and UV (v positions are informational)
      topology.lmk   landmark vertex indices, "ordinal vertex_index" lines
      entries.bin    magic "MMCR", version, m, count, then per entry:
                     id and expression as u32-length-prefixed UTF-8,
                     geometry (3m little-endian f64), colors (3m f64)
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .mesh import AlignedCorpus, CorpusEntry, TemplateTopology, load_template, save_template

_MAGIC_CORPUS = b"MMCR"
_CORPUS_VERSION = 1

TOPOLOGY_OBJ = "topology.obj"
TOPOLOGY_LMK = "topology.lmk"
ENTRIES_BIN = "entries.bin"


def _encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_corpus(directory, corpus: AlignedCorpus, template_geometry: np.ndarray | None = None) -> None:
    """Write a corpus directory; topology v positions default to the mean geometry."""
    os.makedirs(directory, exist_ok=True)
    if template_geometry is None:
        if len(corpus) == 0:
            raise ValueError("cannot infer topology positions from an empty corpus")
        template_geometry = corpus.geometry_matrix().mean(axis=1)
    save_template(
        os.path.join(directory, TOPOLOGY_OBJ),
        os.path.join(directory, TOPOLOGY_LMK),
        corpus.topology,
        template_geometry,
    )
    _write_entries(os.path.join(directory, ENTRIES_BIN), corpus.topology.vertex_count, corpus.entries)


def _write_entries(path, vertex_count: int, entries) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC_CORPUS)
        fh.write(struct.pack("<I", _CORPUS_VERSION))
        fh.write(struct.pack("<2Q", vertex_count, len(entries)))
        for e in entries:
            fh.write(_encode_str(e.identity))
            fh.write(_encode_str(e.expression))
            fh.write(np.asarray(e.geometry, dtype="<f8").tobytes())
            fh.write(np.asarray(e.colors, dtype="<f8").tobytes())


def append_entry(directory, topology: TemplateTopology, entry: CorpusEntry, template_geometry=None) -> int:
    """Append one entry, creating the corpus directory on first use.

    Returns the new entry count. The topology must match an existing corpus.
    """
    entries_path = os.path.join(directory, ENTRIES_BIN)
    if not os.path.exists(entries_path):
        corpus = AlignedCorpus(topology=topology, entries=(entry,))
        save_corpus(directory, corpus, template_geometry=template_geometry)
        return 1
    existing = load_corpus(directory)
    if existing.topology.vertex_count != topology.vertex_count or not np.array_equal(
        existing.topology.faces, topology.faces
    ):
        raise FormatError(f"{directory}: topology does not match the existing corpus")
    entries = existing.entries + (entry,)
    _write_entries(entries_path, topology.vertex_count, entries)
    return len(entries)


def load_corpus(directory) -> AlignedCorpus:
    obj_path = os.path.join(directory, TOPOLOGY_OBJ)
    lmk_path = os.path.join(directory, TOPOLOGY_LMK)
    entries_path = os.path.join(directory, ENTRIES_BIN)
    for p in (obj_path, lmk_path, entries_path):
        if not os.path.exists(p):
            raise FormatError(f"not a corpus directory (missing {os.path.basename(p)}): {directory}")
    topology, _ = load_template(obj_path, lmk_path)
    with open(entries_path, "rb") as fh:
        data = fh.read()
    entries = _parse_entries(data, entries_path, topology.vertex_count)
    return AlignedCorpus(topology=topology, entries=entries)


def _parse_entries(data: bytes, origin: str, vertex_count: int):
    pos = 0

    def take(count):
        nonlocal pos
        if pos + count > len(data):
            raise FormatError(f"{origin}: truncated corpus file")
        out = data[pos : pos + count]
        pos += count
        return out

    if take(4) != _MAGIC_CORPUS:
        raise FormatError(f"{origin}: bad corpus magic")
    (version,) = struct.unpack("<I", take(4))
    if version != _CORPUS_VERSION:
        raise FormatError(f"{origin}: unsupported corpus version {version}")
    m, count = struct.unpack("<2Q", take(16))
    if m != vertex_count:
        raise FormatError(f"{origin}: entries recorded for m={m}, topology has m={vertex_count}")
    dim = 3 * m
    entries = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        identity = take(id_len).decode("utf-8")
        (ex_len,) = struct.unpack("<I", take(4))
        expression = take(ex_len).decode("utf-8")
        geometry = np.frombuffer(take(8 * dim), dtype="<f8").astype(np.float64)
        colors = np.frombuffer(take(8 * dim), dtype="<f8").astype(np.float64)
        entries.append(CorpusEntry(identity=identity, expression=expression, geometry=geometry, colors=colors))
    if pos != len(data):
        raise FormatError(f"{origin}: trailing bytes after corpus entries")
    return tuple(entries)
