"""Bit-exact streaming frame format for 20-value sensor readouts.

Wire frame (92 bytes):

    0xAA 0x55 | timestamp_us (u64 LE) | 20 x float32 LE | CRC-16/CCITT (BE)

The 20 floats are (temp, bx, by, bz) for each of the five chips.  The CRC
(poly 0x1021, init 0xFFFF) covers the 88-byte payload (timestamp + floats).
The decoder is an incremental state machine: feed it byte chunks of any
size; corrupted frames are skipped by scanning forward to the next sync
pair and counted in the diagnostics, never raised.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SYNC = b"\xaa\x55"
PAYLOAD_LEN = 8 + 20 * 4
FRAME_LEN = 2 + PAYLOAD_LEN + 2  # 92

_CRC_TABLE = []
for _byte in range(256):
    _crc = _byte << 8
    for _ in range(8):
        _crc = ((_crc << 1) ^ 0x1021) & 0xFFFF if _crc & 0x8000 else (_crc << 1) & 0xFFFF
    _CRC_TABLE.append(_crc)


def crc16_ccitt(data: bytes, crc: int = 0xFFFF) -> int:
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[((crc >> 8) ^ b) & 0xFF]
    return crc


@dataclass(frozen=True)
class FluxFrame:
    """One timestamped 20-value readout.

    chip_data is a (5, 4) float32 array, columns (temp, bx, by, bz);
    float32 because that is the wire precision, making encode/decode
    round trips bit-exact.
    """

    timestamp_us: int
    chip_data: np.ndarray

    def __post_init__(self):
        cd = np.ascontiguousarray(self.chip_data, dtype=np.float32).reshape(5, 4)
        object.__setattr__(self, "chip_data", cd)
        if not 0 <= self.timestamp_us < 2**64:
            raise ValueError("timestamp_us must fit in u64")

    @classmethod
    def from_reading(cls, timestamp_us, flux15, temps5):
        """Pack a simulator readout (15 flux + 5 temps) into a frame."""
        cd = np.empty((5, 4), dtype=np.float32)
        cd[:, 0] = np.asarray(temps5, dtype=np.float32)
        cd[:, 1:] = np.asarray(flux15, dtype=np.float32).reshape(5, 3)
        return cls(timestamp_us=timestamp_us, chip_data=cd)

    @property
    def flux(self):
        """15-vector (bx, by, bz per chip), float64."""
        return self.chip_data[:, 1:].astype(np.float64).ravel()

    @property
    def temps(self):
        return self.chip_data[:, 0].astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, FluxFrame):
            return NotImplemented
        return (self.timestamp_us == other.timestamp_us
                and self.chip_data.tobytes() == other.chip_data.tobytes())


def encode_frame(frame: FluxFrame) -> bytes:
    payload = struct.pack("<Q", frame.timestamp_us) + frame.chip_data.astype("<f4").tobytes()
    crc = crc16_ccitt(payload)
    return SYNC + payload + struct.pack(">H", crc)


def _decode_payload(payload: bytes) -> FluxFrame:
    (ts,) = struct.unpack("<Q", payload[:8])
    values = np.frombuffer(payload[8:], dtype="<f4").reshape(5, 4)
    return FluxFrame(timestamp_us=ts, chip_data=values)


@dataclass
class DecodeDiagnostics:
    frames_decoded: int = 0
    crc_failures: int = 0
    bytes_skipped: int = 0

    def summary(self):
        return (f"frames={self.frames_decoded} crc_failures={self.crc_failures} "
                f"bytes_skipped={self.bytes_skipped}")


class FrameDecoder:
    """Incremental single-consumer decoder with resynchronization.

    After a CRC failure the scan resumes one byte past the bad sync, so
    at most one following valid frame can be consumed by the corruption.
    """

    def __init__(self):
        self._buf = bytearray()
        self.diagnostics = DecodeDiagnostics()

    def feed(self, chunk: bytes):
        """Feed a chunk of any size; returns frames completed by it."""
        self._buf.extend(chunk)
        frames = []
        while True:
            start = self._buf.find(SYNC)
            if start < 0:
                # keep a trailing 0xAA in case its 0x55 arrives next chunk
                keep = 1 if self._buf[-1:] == SYNC[:1] else 0
                self.diagnostics.bytes_skipped += len(self._buf) - keep
                del self._buf[:len(self._buf) - keep]
                break
            if start > 0:
                self.diagnostics.bytes_skipped += start
                del self._buf[:start]
            if len(self._buf) < FRAME_LEN:
                break
            payload = bytes(self._buf[2:2 + PAYLOAD_LEN])
            (crc,) = struct.unpack(">H", self._buf[2 + PAYLOAD_LEN:FRAME_LEN])
            if crc16_ccitt(payload) == crc:
                frames.append(_decode_payload(payload))
                self.diagnostics.frames_decoded += 1
                del self._buf[:FRAME_LEN]
            else:
                self.diagnostics.crc_failures += 1
                self.diagnostics.bytes_skipped += 1
                del self._buf[:1]
        return frames


def decode_stream(data: bytes, chunk_size: int = 4096):
    """Decode a whole byte stream; returns (frames, diagnostics)."""
    dec = FrameDecoder()
    frames = []
    for i in range(0, len(data), chunk_size):
        frames.extend(dec.feed(data[i:i + chunk_size]))
    return frames, dec.diagnostics


# ---------------------------------------------------------------------------
# no-load baseline management

BASELINE_MODES = ("once", "every_k", "before_each")


@dataclass
class BaselineTracker:
    """Tracks the current no-load baseline used to form flux deltas.

    mode 'once' freezes the first no-load reading; 'every_k' refreshes
    the baseline from the latest no-load reading every k contacts;
    'before_each' refreshes it before every contact.
    """

    mode: str = "before_each"
    k: int = 1
    current_baseline: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in BASELINE_MODES:
            raise ValueError(f"unknown baseline mode {self.mode!r}")
        if self.mode == "every_k" and self.k < 1:
            raise ValueError("k must be >= 1 for every_k mode")
        self._contacts_seen = 0
        self._latest_noload = None

    def observe_noload(self, flux):
        flux = np.asarray(flux, dtype=float)
        self._latest_noload = flux
        if self.current_baseline is None:
            self.current_baseline = flux
        elif self.mode == "before_each":
            self.current_baseline = flux

    def delta(self, contact_flux):
        """Flux delta for one contact; advances the contact counter."""
        if self.current_baseline is None:
            raise ValueError("no no-load reading observed yet")
        if (self.mode == "every_k" and self._latest_noload is not None
                and self._contacts_seen % self.k == 0):
            self.current_baseline = self._latest_noload
        self._contacts_seen += 1
        return np.asarray(contact_flux, dtype=float) - self.current_baseline


def apply_baseline(tracker: BaselineTracker, frames, contact_markers):
    """Flux deltas for the marked contact frames of a recorded stream.

    Unmarked frames are treated as no-load readings feeding the tracker.
    Returns one 15-vector delta per True marker, in stream order.
    """
    frames = list(frames)
    markers = list(contact_markers)
    if len(frames) != len(markers):
        raise ValueError("contact_markers must align with frames")
    deltas = []
    for frame, is_contact in zip(frames, markers):
        flux = frame.flux if isinstance(frame, FluxFrame) else np.asarray(frame, dtype=float)
        if is_contact:
            deltas.append(tracker.delta(flux))
        else:
            tracker.observe_noload(flux)
    return deltas


# ---------------------------------------------------------------------------
# CSV log format (human-readable; the binary form is canonical)

CSV_HEADER = "t_us," + ",".join(
    f"chip{i}_{name}" for i in range(5) for name in ("temp", "bx", "by", "bz"))


def frames_to_csv(frames) -> str:
    lines = [CSV_HEADER]
    for f in frames:
        vals = ",".join(np.format_float_positional(v, trim="0", unique=True)
                        for v in f.chip_data.ravel())
        lines.append(f"{f.timestamp_us},{vals}")
    return "\n".join(lines) + "\n"


def frames_from_csv(text: str):
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("bad CSV log header")
    frames = []
    for ln in lines[1:]:
        parts = ln.split(",")
        ts = int(parts[0])
        values = np.array([float(p) for p in parts[1:]], dtype=np.float32)
        frames.append(FluxFrame(timestamp_us=ts, chip_data=values.reshape(5, 4)))
    return frames
