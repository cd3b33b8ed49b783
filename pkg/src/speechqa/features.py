"""Frame-level and utterance-level feature extraction.

Three representations feed the estimators downstream:

* a constant-Q log-spectral map, fixed at 240 rows x 220 columns
* per-frame Mel features (26 MFCC + pitch + VAD + log-energy, with first
  differences -> 58 dims), stacked over a 25-frame context into 1450-dim
  vectors for speech-active frames
* MFCC frame sets consumed by the i-vector front-end

All functions here are pure and deterministic.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct, irfft, rfft
from scipy.signal import get_window

from .errors import DataError, NoActiveFramesError

SAMPLE_RATE = 16000

# Frames with mean power below this are never speech-active (about -100 dBFS),
# so digital silence stays inactive regardless of the adaptive threshold.
_ABS_ACTIVE_POWER = 1e-10

_VAD_MARGIN_DB = 6.0


@dataclass
class FramingParams:
    """Analysis framing: 512-sample periodic Hann windows, 160-sample hop."""

    window_len: int = 512
    hop: int = 160
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.hop > self.window_len:
            raise DataError("hop must not exceed window_len")
        if self.window_len & (self.window_len - 1):
            raise DataError("window_len must be a power of two")

    @property
    def window(self):
        return get_window("hann", self.window_len, fftbins=True)

    def num_frames(self, n_samples):
        if n_samples < self.window_len:
            return 0
        return 1 + (n_samples - self.window_len) // self.hop


def frame_signal(x, p=None):
    """Slice a signal into overlapping frames, shape (n_frames, window_len)."""
    p = p or FramingParams()
    x = np.asarray(x, dtype=np.float64)
    n = p.num_frames(len(x))
    if n == 0:
        raise DataError(f"signal of {len(x)} samples is shorter than one window")
    idx = np.arange(p.window_len)[None, :] + p.hop * np.arange(n)[:, None]
    return x[idx]


def stft(x, p=None):
    """Windowed DFT per frame; returns complex array (n_frames, 257)."""
    p = p or FramingParams()
    frames = frame_signal(x, p)
    return rfft(frames * p.window[None, :], axis=1)


def istft(spectra, n_samples, p=None):
    """Weighted overlap-add inverse of stft(). Uncovered tail samples are zero."""
    p = p or FramingParams()
    w = p.window
    frames = irfft(spectra, n=p.window_len, axis=1) * w[None, :]
    y = np.zeros(n_samples)
    norm = np.zeros(n_samples)
    for t in range(frames.shape[0]):
        lo = t * p.hop
        y[lo:lo + p.window_len] += frames[t]
        norm[lo:lo + p.window_len] += w * w
    covered = norm > 1e-8
    y[covered] /= norm[covered]
    return y


def frame_powers(x, p=None):
    """Mean power of each (unwindowed) analysis frame."""
    frames = frame_signal(x, p)
    return np.mean(frames * frames, axis=1)


def vad_flags(x, p=None):
    """Energy VAD over a whole utterance, one {0,1} flag per frame.

    A frame is active when its energy clears the noise floor (10th-percentile
    frame energy) by 6 dB. For stationary signals the adaptive threshold
    collapses onto the floor, so it is capped 12 dB under the loudest frame;
    an absolute power gate keeps digital silence inactive either way.
    """
    powers = frame_powers(x, p)
    db = 10.0 * np.log10(powers + 1e-30)
    floor_db = np.percentile(db, 10)
    threshold = min(floor_db + _VAD_MARGIN_DB, np.max(db) - 2 * _VAD_MARGIN_DB)
    return ((db > threshold) & (powers > _ABS_ACTIVE_POWER)).astype(np.int8)


def active_rms(x, p=None):
    """RMS over speech-active frames (frames weighted equally)."""
    powers = frame_powers(x, p)
    flags = vad_flags(x, p)
    if not np.any(flags):
        raise NoActiveFramesError("no speech-active frames")
    return float(np.sqrt(np.mean(powers[flags == 1])))


# ---------------------------------------------------------------------------
# Mel-frequency features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters=40, n_bins=257, sample_rate=SAMPLE_RATE,
                   f_lo=0.0, f_hi=None):
    """Triangular Mel filterbank, each filter normalized to unit sum."""
    f_hi = f_hi or sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_filters + 2))
    bin_hz = np.arange(n_bins) * sample_rate / (2.0 * (n_bins - 1))
    fb = np.zeros((n_filters, n_bins))
    for j in range(n_filters):
        lo, mid, hi = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[j] = np.maximum(0.0, np.minimum(up, down))
        s = fb[j].sum()
        if s > 0:
            fb[j] /= s
    return fb


_MFCC_LOG_FLOOR = 1e-10


def mfcc_from_spectra(magnitudes, n_coeffs=26, filterbank=None):
    """MFCCs from magnitude spectra (n_frames, 257) -> (n_frames, n_coeffs).

    Filterbank energies are floored at 1e-10 before the log; the DCT-II is
    orthonormal.
    """
    magnitudes = np.atleast_2d(np.asarray(magnitudes, dtype=np.float64))
    if filterbank is None:
        filterbank = mel_filterbank(n_bins=magnitudes.shape[1])
    energies = magnitudes @ filterbank.T
    log_e = np.log(np.maximum(energies, _MFCC_LOG_FLOOR))
    return dct(log_e, type=2, norm="ortho", axis=1)[:, :n_coeffs]


# ---------------------------------------------------------------------------
# Pitch


_PITCH_WIN = 1024
_PITCH_FMIN = 50.0
_PITCH_FMAX = 400.0
_VOICING_THRESHOLD = 0.5


def pitch_track(x, p=None):
    """Per-frame pitch in Hz (0 when unvoiced), via normalized autocorrelation.

    Each estimate uses a 1024-sample window centered on the analysis frame.
    Among autocorrelation peaks within 5% of the strongest one, the shortest
    lag wins, which suppresses octave-down errors on pulse-like signals.
    """
    p = p or FramingParams()
    x = np.asarray(x, dtype=np.float64)
    n_frames = p.num_frames(len(x))
    if n_frames == 0:
        raise DataError("signal shorter than one frame")
    half = _PITCH_WIN // 2
    padded = np.concatenate([np.zeros(half), x, np.zeros(_PITCH_WIN)])
    centers = p.hop * np.arange(n_frames) + p.window_len // 2
    idx = centers[:, None] + np.arange(_PITCH_WIN)[None, :]
    wins = padded[idx]

    lag_min = int(np.floor(p.sample_rate / _PITCH_FMAX))
    lag_max = int(np.ceil(p.sample_rate / _PITCH_FMIN))
    nfft = 2 * _PITCH_WIN
    spec = rfft(wins, n=nfft, axis=1)
    r = irfft(spec * np.conj(spec), n=nfft, axis=1)[:, :lag_max + 2]

    sq = np.cumsum(wins * wins, axis=1)
    total = sq[:, -1:]
    lags = np.arange(lag_max + 2)
    e_head = sq[:, _PITCH_WIN - 1 - lags]            # energy of x[0 : N-l]
    e_tail = total - np.concatenate(
        [np.zeros((wins.shape[0], 1)), sq[:, lags[1:] - 1]], axis=1
    )                                                 # energy of x[l : N]
    rn = r / np.sqrt(e_head * e_tail + 1e-20)

    pitch = np.zeros(n_frames)
    for t in range(n_frames):
        band = rn[t, lag_min:lag_max + 1]
        best = np.max(band)
        if best < _VOICING_THRESHOLD:
            continue
        peaks = np.flatnonzero(
            (band[1:-1] >= band[:-2]) & (band[1:-1] >= band[2:])
            & (band[1:-1] >= 0.95 * best)
        ) + 1 + lag_min
        lag = int(peaks[0]) if len(peaks) else int(np.argmax(band)) + lag_min
        # parabolic refinement around the integer lag
        ym, y0, yp = rn[t, lag - 1], rn[t, lag], rn[t, lag + 1]
        denom = ym - 2 * y0 + yp
        shift = 0.5 * (ym - yp) / denom if abs(denom) > 1e-12 else 0.0
        pitch[t] = p.sample_rate / (lag + np.clip(shift, -0.5, 0.5))
    return pitch


# ---------------------------------------------------------------------------
# Per-frame feature assembly


def deltas(seq):
    """First differences along time: d[0] = 0, d[t] = x[t] - x[t-1]."""
    seq = np.asarray(seq, dtype=np.float64)
    if len(seq) == 0:
        raise DataError("empty sequence")
    d = np.zeros_like(seq)
    d[1:] = seq[1:] - seq[:-1]
    return d


N_MFCC = 26
FRAME_STATIC_DIM = N_MFCC + 3       # + pitch, vad, log-energy
FRAME_DIM = 2 * FRAME_STATIC_DIM    # with first differences
CONTEXT_RADIUS = 12
CONTEXT_FRAMES = 2 * CONTEXT_RADIUS + 1
CONTEXT_DIM = CONTEXT_FRAMES * FRAME_DIM


def frame_features(x, p=None):
    """Static + delta features per frame.

    Returns (features, flags): features has shape (n_frames, 58) laid out as
    [26 MFCC, pitch, vad, log-energy, 29 deltas]; flags is the VAD track.
    """
    p = p or FramingParams()
    spectra = stft(x, p)
    coeffs = mfcc_from_spectra(np.abs(spectra))
    pitch = pitch_track(x, p)
    flags = vad_flags(x, p)
    log_energy = np.log(frame_powers(x, p) + 1e-12)
    static = np.column_stack([coeffs, pitch, flags.astype(np.float64), log_energy])
    return np.hstack([static, deltas(static)]), flags


def stack_context(features, flags, center):
    """Concatenate the 25-frame context around a speech-active center frame.

    Out-of-range context indices replicate the first/last frame. Output length
    is always 1450.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != FRAME_DIM:
        raise DataError(f"expected (n, {FRAME_DIM}) feature matrix")
    if not flags[center]:
        raise DataError(f"center frame {center} is not speech-active")
    idx = np.clip(np.arange(center - CONTEXT_RADIUS, center + CONTEXT_RADIUS + 1),
                  0, len(features) - 1)
    return features[idx].reshape(-1)


def mel_context_vectors(x, p=None):
    """All 1450-dim context vectors of an utterance (one per active frame)."""
    features, flags = frame_features(x, p)
    centers = np.flatnonzero(flags)
    if len(centers) == 0:
        raise NoActiveFramesError("no speech-active frames in utterance")
    return np.stack([stack_context(features, flags, c) for c in centers])


# ---------------------------------------------------------------------------
# Constant-Q transform


@dataclass
class CqtParams:
    """Geometry of the constant-Q map.

    32 bins per octave from ~44.2 Hz spans 7.5 octaves under Nyquist with 240
    bins; a 1440-sample hop puts a nominal 20 s utterance near 220 frames.
    """

    bins_total: int = 240
    bins_per_octave: int = 32
    f_min: float = 44.2
    hop: int = 1440
    sample_rate: int = SAMPLE_RATE
    n_frames: int = 220

    @property
    def q(self):
        """Quality factor shared by every bin: f_c over the bin bandwidth."""
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def center_frequency(self, k):
        return self.f_min * 2.0 ** (np.asarray(k) / self.bins_per_octave)

    def kernel_length(self, k):
        return int(np.ceil(self.q * self.sample_rate / self.center_frequency(k)))

    def __post_init__(self):
        f_max = self.center_frequency(self.bins_total - 1)
        if f_max >= self.sample_rate / 2.0:
            raise DataError(
                f"top CQT bin at {f_max:.0f} Hz reaches Nyquist; lower f_min or bins"
            )


_CQT_LOG_FLOOR = 1e-10


def cqt(x, p=None):
    """Constant-Q log-magnitude map, always exactly (bins_total, n_frames).

    Per-bin kernels are Hann-windowed complex exponentials of length
    ceil(Q*fs/f_c), evaluated at hop-spaced frame centers with zero padding at
    the signal edges. Short utterances replicate the last frame up to 220
    columns; long ones are truncated.
    """
    p = p or CqtParams()
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 512:
        raise DataError(f"utterance of {len(x)} samples is too short for the CQT")
    raw_frames = 1 + (len(x) - 1) // p.hop
    n_cols = min(raw_frames, p.n_frames)
    centers = p.hop * np.arange(n_cols)

    max_len = p.kernel_length(0)
    pad = max_len // 2 + 1
    padded = np.concatenate([np.zeros(pad), x, np.zeros(pad + max_len)])

    out = np.empty((p.bins_total, n_cols))
    for k in range(p.bins_total):
        n_k = p.kernel_length(k)
        f_k = p.center_frequency(k)
        w = get_window("hann", n_k, fftbins=True)
        t = np.arange(n_k) - n_k // 2
        kernel = w * np.exp(-2j * np.pi * f_k * t / p.sample_rate) / np.sum(w)
        starts = centers + pad - n_k // 2
        segments = padded[starts[:, None] + np.arange(n_k)[None, :]]
        out[k] = np.log(np.abs(segments @ np.conj(kernel)) + _CQT_LOG_FLOOR)

    if n_cols < p.n_frames:
        out = np.hstack([out, np.repeat(out[:, -1:], p.n_frames - n_cols, axis=1)])
    return out
