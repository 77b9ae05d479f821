"""Binary matrix archives (ark/scp) and training-example (egs) handling.

Record layout, all integers little-endian::

    <key> 0x20 0x00 'B' "FM " 0x04 <int32 rows> 0x04 <int32 cols> <rows*cols float32>

Double-precision records ("DM ") are accepted on read.  An scp line
``<key> <path>:<offset>`` points at the ``0x00`` byte that starts a value.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import PhoneLm, Wfsa, build_numerator_graph, read_wfsa, write_wfsa

EGS_MAGIC = b"EGS001"
_TYPES = {b"FM ": np.dtype("<f4"), b"DM ": np.dtype("<f8")}


class ArkFormatError(ValueError):
    pass


def _key_ok(key):
    return bool(key) and not any(c in key for c in " \t\n\r\0")


def _write_value(m, f):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError("only 2-D matrices can be archived")
    rows, cols = m.shape
    f.write(b"\0BFM \x04" + struct.pack("<i", rows) + b"\x04" + struct.pack("<i", cols))
    f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def write_matrix_ark(records, sink):
    """Write ``(key, matrix)`` pairs; returns the byte offset of each value.

    ``sink`` is a binary file object or a path.
    """
    if not hasattr(sink, "write"):
        with open(sink, "wb") as f:
            return write_matrix_ark(records, f)
    offsets = []
    pos = sink.tell() if sink.seekable() else 0
    for key, m in records:
        if not _key_ok(key):
            raise ValueError(f"invalid archive key {key!r}")
        kb = key.encode() + b" "
        sink.write(kb)
        pos += len(kb)
        offsets.append((key, pos))
        buf = io.BytesIO()
        _write_value(m, buf)
        sink.write(buf.getvalue())
        pos += buf.tell()
    return offsets


def _read_exact(f, n, what, start):
    b = f.read(n)
    if len(b) != n:
        raise ArkFormatError(f"truncated {what} at offset {start}")
    return b


def read_matrix_value(f):
    """Read one binary matrix value starting at the ``0x00 'B'`` marker."""
    start = f.tell() if f.seekable() else -1
    head = f.read(2)
    if head != b"\0B":
        raise ArkFormatError(f"bad binary marker {head!r} at offset {start}")
    tstart = start + 2 if start >= 0 else -1
    tag = _read_exact(f, 3, "type tag", tstart)
    if tag not in _TYPES:
        raise ArkFormatError(f"bad matrix type {tag!r} at offset {tstart}")
    dims = []
    for _ in range(2):
        dpos = f.tell() if start >= 0 else -1
        b = _read_exact(f, 5, "dimension header", dpos)
        if b[0] != 4:
            raise ArkFormatError(f"bad integer size byte {b[0]} at offset {dpos}")
        v = struct.unpack("<i", b[1:])[0]
        if v < 0:
            raise ArkFormatError(f"negative dimension {v} at offset {dpos}")
        dims.append(v)
    dt = _TYPES[tag]
    rows, cols = dims
    n = rows * cols * dt.itemsize
    dpos = f.tell() if start >= 0 else -1
    data = f.read(n)
    if len(data) != n:
        raise ArkFormatError(f"truncated matrix data at offset {dpos}")
    return np.frombuffer(data, dtype=dt).reshape(rows, cols).astype(dt.newbyteorder("="))


def _read_key(f):
    start = f.tell() if f.seekable() else -1
    kb = bytearray()
    while True:
        c = f.read(1)
        if not c:
            if kb:
                raise ArkFormatError(f"truncated key at offset {start}")
            return None
        if c == b" ":
            break
        if c in b"\n\0\t\r":
            raise ArkFormatError(f"bad key byte {c!r} at offset {f.tell() - 1 if start >= 0 else -1}")
        kb += c
    if not kb:
        raise ArkFormatError(f"empty key at offset {start}")
    return kb.decode()


def read_matrix_ark(source):
    """Yield ``(key, matrix)`` pairs from a binary file object, bytes or path."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if not hasattr(source, "read"):
        with open(source, "rb") as f:
            yield from read_matrix_ark(f)
        return
    while True:
        key = _read_key(source)
        if key is None:
            return
        yield key, read_matrix_value(source)


@dataclass(frozen=True)
class ScpEntry:
    key: str
    path: str
    offset: int


def read_scp(lines):
    entries = []
    for k, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or ":" not in parts[1]:
            raise ArkFormatError(f"malformed scp line {k}: {line!r}")
        path, _, off = parts[1].rpartition(":")
        try:
            offset = int(off)
        except ValueError:
            raise ArkFormatError(f"malformed scp line {k}: bad offset {off!r}") from None
        if not path or offset < 0:
            raise ArkFormatError(f"malformed scp line {k}: {line!r}")
        entries.append(ScpEntry(parts[0], path, offset))
    return entries


def write_scp(entries, sink=None):
    text = "".join(f"{e.key} {e.path}:{e.offset}\n" for e in entries)
    if sink is not None:
        sink.write(text)
    return text


def write_ark_scp(records, ark_path, scp_path=None):
    """Write an archive and (optionally) its scp index; returns the entries."""
    offs = write_matrix_ark(records, ark_path)
    entries = [ScpEntry(k, str(ark_path), o) for k, o in offs]
    if scp_path is not None:
        with open(scp_path, "w") as f:
            write_scp(entries, f)
    return entries


def read_scp_matrix(entry: ScpEntry, base_dir=None):
    path = Path(entry.path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    with open(path, "rb") as f:
        f.seek(entry.offset)
        return read_matrix_value(f)


def load_scp(path):
    """``key -> matrix`` for every entry of an scp file (relative paths resolve
    against the scp's directory first, then the working directory)."""
    path = Path(path)
    with open(path) as f:
        entries = read_scp(f)
    out = {}
    for e in entries:
        base = path.parent if (path.parent / e.path).exists() else None
        out[e.key] = read_scp_matrix(e, base)
    return out


# ---------------------------------------------------------------------------
# training examples

@dataclass
class EgsChunk:
    key: str
    input: np.ndarray
    supervision: Wfsa
    chunk_width: int
    output_frames: int


def chunk_starts(num_frames, chunk_width):
    """Start frames of consecutive windows; a final partial window is shifted
    left so it ends on the last frame."""
    if num_frames < chunk_width:
        raise ValueError(f"utterance too short: {num_frames} < chunk width {chunk_width}")
    n = math.ceil(num_frames / chunk_width)
    starts = [i * chunk_width for i in range(n)]
    starts[-1] = num_frames - chunk_width
    return starts


def _pad_edges(feats, left, right):
    return np.concatenate([np.repeat(feats[:1], max(left, 0), axis=0), feats,
                           np.repeat(feats[-1:], max(right, 0), axis=0)])


def _span_phones(start, width, subsample, seg, transcript):
    """Phones (with output-frame counts) seen at the chunk's subsampled frames.

    ``seg`` maps each input frame to its position in the transcript.
    """
    seq, durs = [], []
    for s in seg[start:start + width:subsample]:
        if seq and seq[-1] == s:
            durs[-1] += 1
        else:
            seq.append(s)
            durs.append(1)
    return [int(transcript[s]) for s in seq], durs


def make_egs(feats, transcripts, lm: PhoneLm, chunk_width=140, left=0, right=0,
             subsample_factor=3, alignments=None, tolerance=None):
    """Split utterances into fixed-width chunks with numerator supervision.

    Parameters
    ----------
    feats : iterable of ``(key, matrix)``
    transcripts : ``key -> phone sequence``
    alignments : optional ``key -> per-frame phone labels``.  When present, a
        chunk's supervision covers exactly the phones visible at its output
        frames; otherwise the transcript is spread uniformly over the
        utterance and the chunk takes the phones of its span.
    tolerance : with alignments, switch to the duration-constrained numerator
        with each phone allowed ``aligned +- tolerance`` output frames.
    """
    for key, m in feats:
        if key not in transcripts:
            continue
        m = np.asarray(m, dtype=np.float32)
        T = m.shape[0]
        trans = [int(p) for p in transcripts[key]]
        if alignments is not None:
            labels = np.asarray(alignments[key], dtype=np.int64)
            if len(labels) != T:
                raise ValueError(f"{key}: alignment length {len(labels)} != {T} frames")
            seg = np.concatenate([[0], np.cumsum(labels[1:] != labels[:-1])])
            if seg[-1] + 1 != len(trans) or (np.asarray(trans)[seg] != labels).any():
                raise ValueError(f"{key}: alignment does not match transcript")
        else:
            seg = np.minimum((np.arange(T) * len(trans)) // T, len(trans) - 1)
        padded = _pad_edges(m, left, right)
        out_frames = math.ceil(chunk_width / subsample_factor)
        for start in chunk_starts(T, chunk_width):
            phones, durs = _span_phones(start, chunk_width, subsample_factor, seg, trans)
            constraint = None
            if tolerance is not None and alignments is not None:
                constraint = [(max(1, d - tolerance), d + tolerance) for d in durs]
            sup = build_numerator_graph(phones, lm, out_frames, constraint)
            inp = padded[start:start + chunk_width + left + right]
            yield EgsChunk(f"{key}-{start}", inp, sup, chunk_width, out_frames)


def write_egs(chunks, sink):
    """Each record: ``<key> EGS001 <chunk_width> <output_frames>\\n``, the input
    matrix in binary form, then the supervision in wfsa text form."""
    if not hasattr(sink, "write"):
        with open(sink, "wb") as f:
            return write_egs(chunks, f)
    n = 0
    for c in chunks:
        if not _key_ok(c.key):
            raise ValueError(f"invalid egs key {c.key!r}")
        sink.write(f"{c.key} ".encode() + EGS_MAGIC + f" {c.chunk_width} {c.output_frames}\n".encode())
        _write_value(c.input, sink)
        sink.write(write_wfsa(c.supervision).encode())
        n += 1
    return n


def read_egs(source):
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if not hasattr(source, "read"):
        with open(source, "rb") as f:
            yield from read_egs(f)
        return
    while True:
        pos = source.tell()
        head = source.readline()
        if not head:
            return
        parts = head.split()
        if len(parts) != 4 or parts[1] != EGS_MAGIC:
            raise ArkFormatError(f"bad egs header at offset {pos}")
        mat = read_matrix_value(source)

        def lines():
            while True:
                ln = source.readline()
                if not ln:
                    return
                yield ln

        sup = read_wfsa(lines())
        yield EgsChunk(parts[0].decode(), mat, sup, int(parts[2]), int(parts[3]))


def shard_and_shuffle(egs, num_jobs, seed=0):
    """Seeded permutation dealt round-robin into ``num_jobs`` lists."""
    if num_jobs < 1:
        raise ValueError("num_jobs must be >= 1")
    egs = list(egs)
    perm = np.random.default_rng(seed).permutation(len(egs))
    shards = [[] for _ in range(num_jobs)]
    for i, j in enumerate(perm):
        shards[i % num_jobs].append(egs[j])
    return shards
