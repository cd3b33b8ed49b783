"""Mono 16 kHz audio buffers and 16-bit PCM WAV I/O."""

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SAMPLE_RATE = 16000


@dataclass
class AudioBuffer:
    """Mono sample sequence with level metadata.

    Samples are float64 in nominal [-1, 1]; values outside that range are
    allowed in memory and only clipped (and counted) at WAV write time.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("AudioBuffer requires a 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("AudioBuffer contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate


def rms(x):
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return 0.0
    return float(np.sqrt(np.mean(x * x)))


def dbfs(level):
    """Linear RMS level -> dB relative to full scale (RMS 1.0)."""
    if level <= 0:
        return -np.inf
    return 20.0 * np.log10(level)


def db_to_gain(db):
    return 10.0 ** (db / 20.0)


def write_wav(path, buf):
    """Write 16-bit PCM mono WAV. Returns the number of clipped samples."""
    x = buf.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    x = np.clip(x, -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(buf.sample_rate)
        w.writeframes(pcm.tobytes())
    return clipped


def read_wav(path):
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise DataError(f"{path}: expected mono WAV")
        if w.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / 32767.0, sample_rate=rate)
