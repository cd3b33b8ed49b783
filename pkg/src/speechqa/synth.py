"""Degraded-speech dataset synthesis.

Renders leveled speech-like signals through a reverb + noise + optional
processing chain and writes WAV files plus a tab-separated manifest. Each
utterance is a pure function of (condition, seed), so rendering is safe to
parallel-map; manifest assembly is single-writer.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .audio import AudioBuffer, db_to_gain, write_wav
from .errors import CannotNormalizeError, DataError
from .features import (FramingParams, active_rms, frame_powers, istft, stft,
                       vad_flags)

SAMPLE_RATE = 16000
SPEED_OF_SOUND = 343.0

# Acoustic-to-digital anchor: 65 dB SPL speech lands on -23 dB FS.
SPL_TO_DBFS_OFFSET = -88.0

SNR_MIN_DB = 0.0
SNR_MAX_DB = 50.0

GENERATOR_VERSION = "speechqa-synth-1"


def spl_to_dbfs(spl):
    return spl + SPL_TO_DBFS_OFFSET


# ---------------------------------------------------------------------------
# Clean signal generation


def clean_layout(duration_s):
    """Segment layout (kind, start_s, end_s) for a synthetic utterance.

    The nominal 20 s shape is 4 s lead silence, then 3 voiced bursts with 2 s
    gaps; other durations scale every segment proportionally.
    """
    if duration_s <= 0:
        raise DataError("duration must be positive")
    fractions = [("silence", 0.20), ("burst", 0.20), ("silence", 0.10),
                 ("burst", 0.20), ("silence", 0.10), ("burst", 0.20)]
    t = 0.0
    layout = []
    for kind, frac in fractions:
        layout.append((kind, t * duration_s, (t + frac) * duration_s))
        t += frac
    return layout


def _voiced_burst(n, rng):
    """Harmonic burst with pitch drift, formant coloring and a syllabic envelope."""
    fs = SAMPLE_RATE
    t = np.arange(n) / fs
    # narrow pitch range and fixed formants keep content variability low, so
    # degradations (not the material) dominate the feature statistics
    f0 = rng.uniform(140.0, 180.0)
    drift = 1.0 + 0.04 * np.sin(2 * np.pi * 0.5 * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * drift) / fs
    x = np.zeros(n)
    n_harm = max(2, int(3500.0 / (f0 * 1.04)))
    for h in range(1, n_harm + 1):
        x += np.cos(h * phase + rng.uniform(0, 2 * np.pi)) / h

    # two resonators stand in for formants
    for fc in (600.0, 1500.0):
        r = 0.97
        w = 2 * np.pi * fc / fs
        x = lfilter([1.0 - r], [1.0, -2 * r * np.cos(w), r * r], x)

    syllable = 0.55 + 0.45 * np.sin(2 * np.pi * 3.0 * t
                                    + rng.uniform(0, 2 * np.pi))
    fade = min(n // 2, int(0.05 * fs))
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    env[:fade] = ramp
    env[n - fade:] = ramp[::-1]
    x *= syllable * env
    peak = np.max(np.abs(x))
    return 0.3 * x / peak if peak > 0 else x


def generate_clean(duration_s, rng):
    """Speech-like test signal: silence, three voiced bursts, silence gaps."""
    n_total = int(round(duration_s * SAMPLE_RATE))
    x = np.zeros(n_total)
    for kind, start_s, end_s in clean_layout(duration_s):
        lo = int(round(start_s * SAMPLE_RATE))
        hi = min(int(round(end_s * SAMPLE_RATE)), n_total)
        if kind == "burst" and hi > lo:
            x[lo:hi] = _voiced_burst(hi - lo, rng)
    return AudioBuffer(x)


def normalize_level(a, target_dbfs, p=None):
    """Scale so the active-frame RMS sits at target_dbfs (within 0.01 dB).

    Borderline frames can flip their activity state once the gain is applied,
    so the measurement and correction are iterated until they agree.
    """
    x = a.samples
    for _ in range(5):
        try:
            level = active_rms(x, p)
        except DataError as exc:
            raise CannotNormalizeError(str(exc)) from exc
        if level <= 0:
            raise CannotNormalizeError("signal has zero active RMS")
        gain = db_to_gain(target_dbfs) / level
        x = x * gain
        if abs(20.0 * math.log10(gain)) < 0.001:
            break
    return AudioBuffer(x, a.sample_rate)


# ---------------------------------------------------------------------------
# Room impulse responses


@dataclass
class RoomImpulseResponse:
    taps: np.ndarray
    rt60: float
    source_distance: float
    kind: str  # measured-import | synthetic-decay | anechoic

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        energy = float(np.sum(self.taps ** 2))
        if not np.isfinite(energy) or energy == 0.0:
            raise DataError("RIR has zero or non-finite energy")


_DECAY_LN = 6.908  # ln(10^3): 60 dB amplitude decay at t = rt60
_DRR_DIRECT_WINDOW_S = 0.005
_DRR_ANECHOIC_DB = 40.0


def synth_rir(rt60, distance_m, rng):
    """Synthetic RIR: direct-path spike plus an exponentially decaying tail.

    rt60 = 0 yields the anechoic identity. The direct tap scales as 1/distance
    against a distance-independent tail, so DRR falls with distance.
    """
    if rt60 == 0.0:
        return RoomImpulseResponse(np.array([1.0]), 0.0, distance_m, "anechoic")
    if not (0.3 <= rt60 <= 0.5):
        raise DataError(f"rt60 {rt60} outside {{0}} u [0.3, 0.5] s")
    if not (0.5 <= distance_m <= 3.0):
        raise DataError(f"source distance {distance_m} outside [0.5, 3] m")
    fs = SAMPLE_RATE
    delay = int(round(distance_m / SPEED_OF_SOUND * fs))
    tail_start = delay + int(round(0.0025 * fs))
    tail_len = int(round(1.2 * rt60 * fs))
    taps = np.zeros(tail_start + tail_len)
    taps[delay] = 2.0 / distance_m
    t = np.arange(tail_len) / fs
    taps[tail_start:] = 0.05 * rng.standard_normal(tail_len) * np.exp(-_DECAY_LN * t / rt60)
    taps /= np.sqrt(np.sum(taps ** 2))
    return RoomImpulseResponse(taps, rt60, distance_m, "synthetic-decay")


def drr_db(rir):
    """Direct-to-reverberant ratio using a 5 ms direct-path window."""
    d0 = int(np.argmax(np.abs(rir.taps)))
    split = d0 + int(_DRR_DIRECT_WINDOW_S * SAMPLE_RATE)
    direct = float(np.sum(rir.taps[:split] ** 2))
    tail = float(np.sum(rir.taps[split:] ** 2))
    if tail <= 0:
        return _DRR_ANECHOIC_DB
    return min(10.0 * np.log10(direct / tail), _DRR_ANECHOIC_DB)


def convolve_rir(a, rir):
    """Full linear convolution truncated back to the input length."""
    if len(rir.taps) == 0:
        raise DataError("empty RIR")
    y = fftconvolve(a.samples, rir.taps, mode="full")[:len(a.samples)]
    return AudioBuffer(y, a.sample_rate)


# ---------------------------------------------------------------------------
# Noise


NOISE_KINDS = ("office", "home", "other")
NOISE_KIND_PROBS = (0.8, 0.1, 0.1)

# power-law spectral slopes: office ~ pink, home ~ brown, other = milder presets
_NOISE_SLOPES = {"office": [-1.0], "home": [-2.0], "other": [0.0, -0.5]}


def generate_noise(kind, n, rng):
    """Unit-RMS colored noise with a per-kind power-law spectrum."""
    if kind not in _NOISE_SLOPES:
        raise DataError(f"unknown noise kind {kind!r}")
    slopes = _NOISE_SLOPES[kind]
    slope = slopes[rng.integers(len(slopes))] if len(slopes) > 1 else slopes[0]
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    shaping = np.ones_like(f)
    shaping[1:] = (f[1:] / f[1]) ** (slope / 2.0)
    shaping[0] = 0.0
    x = np.fft.irfft(spec * shaping, n=n)
    return AudioBuffer(x / np.sqrt(np.mean(x ** 2)))


@dataclass
class ConditionSpec:
    utterance_id: str
    voice_level_db_spl: float
    noise_level_db_spl: float
    rir_id: str
    noise_kind: str
    processed: bool
    realized_snr_db: float = float("nan")


def measure_snr(speech, noise, p=None):
    """Active-frame SNR in dB; activity is decided on the speech signal."""
    if len(speech) != len(noise):
        raise DataError("speech and noise lengths differ")
    flags = vad_flags(speech.samples, p) == 1
    if not np.any(flags):
        raise DataError("no speech-active frames, SNR undefined")
    p_s = np.mean(frame_powers(speech.samples, p)[flags])
    p_n = np.mean(frame_powers(noise.samples, p)[flags])
    if p_n <= 0:
        raise DataError("zero noise power over active frames")
    return float(10.0 * np.log10(p_s / p_n))


def mix_noise(speech, noise, spec, p=None):
    """Add noise at the SNR implied by the condition's SPL levels.

    The target SNR is the voice/noise SPL difference clamped to [0, 50] dB;
    the noise gain is calibrated against measured active-frame powers so the
    realized SNR hits the (clamped) target exactly.
    """
    noise_x = np.resize(noise.samples, len(speech.samples))
    p_noise_raw = float(np.mean(noise_x ** 2))
    if p_noise_raw <= 0:
        raise DataError("zero-energy noise")
    target = float(np.clip(spec.voice_level_db_spl - spec.noise_level_db_spl,
                           SNR_MIN_DB, SNR_MAX_DB))
    flags = vad_flags(speech.samples, p) == 1
    if not np.any(flags):
        raise DataError("no speech-active frames to calibrate against")
    p_s = np.mean(frame_powers(speech.samples, p)[flags])
    p_n = np.mean(frame_powers(noise_x, p)[flags])
    gain = math.sqrt(p_s / (p_n * 10.0 ** (target / 10.0)))
    scaled = AudioBuffer(gain * noise_x, speech.sample_rate)
    # re-measured SNR equals the target up to rounding; keep it inside the bounds
    realized = float(np.clip(measure_snr(speech, scaled, p), SNR_MIN_DB, SNR_MAX_DB))
    mixed = AudioBuffer(speech.samples + scaled.samples, speech.sample_rate)
    return mixed, realized


# ---------------------------------------------------------------------------
# Processing chain (noise suppressor + AGC)


_SUPPRESS_NOISE_EST_S = 0.5
_SUPPRESS_FLOOR = 0.3


def noise_suppress(a, p=None):
    """Magnitude spectral subtraction with the floor tracked from the first 0.5 s."""
    p = p or FramingParams()
    if len(a.samples) < p.window_len:
        return AudioBuffer(a.samples.copy(), a.sample_rate)
    spectra = stft(a.samples, p)
    n_est = max(1, min(spectra.shape[0],
                       int(_SUPPRESS_NOISE_EST_S * a.sample_rate / p.hop)))
    noise_mag = np.mean(np.abs(spectra[:n_est]), axis=0)
    mag = np.abs(spectra)
    reduced = np.maximum(mag - noise_mag[None, :], _SUPPRESS_FLOOR * mag)
    phase = np.where(mag > 0, spectra / np.maximum(mag, 1e-30), 1.0)
    y = istft(reduced * phase, len(a.samples), p)
    # WOLA edges are not perfectly normalized; never let output exceed input energy
    e_in = float(np.sum(a.samples ** 2))
    e_out = float(np.sum(y ** 2))
    if e_out > e_in and e_out > 0:
        y *= math.sqrt(e_in / e_out)
    return AudioBuffer(y, a.sample_rate)


_AGC_FRAME = 160                    # 10 ms
_AGC_MAX_STEP_DB = 0.3              # 3 dB per 100 ms


def agc(a, target_dbfs, p=None):
    """Slow automatic gain control driving active-frame RMS toward the target.

    Gain moves at most 0.3 dB per 10 ms frame and holds during inactive frames,
    so silence (and all-zero input) passes through untouched.
    """
    x = a.samples
    n_frames = len(x) // _AGC_FRAME
    if n_frames == 0:
        return AudioBuffer(x.copy(), a.sample_rate)
    frames = x[:n_frames * _AGC_FRAME].reshape(n_frames, _AGC_FRAME)
    powers = np.mean(frames * frames, axis=1)
    db = 10.0 * np.log10(powers + 1e-30)
    floor_db = np.percentile(db, 10)
    threshold = min(floor_db + 6.0, np.max(db) - 12.0)
    active = (db > threshold) & (powers > 1e-10)

    y = x.copy()
    gain_db = 0.0
    for i in range(n_frames):
        if active[i]:
            err = target_dbfs - (10.0 * np.log10(powers[i]) + gain_db)
            gain_db += float(np.clip(err, -_AGC_MAX_STEP_DB, _AGC_MAX_STEP_DB))
        lo = i * _AGC_FRAME
        y[lo:lo + _AGC_FRAME] *= db_to_gain(gain_db)
    y[n_frames * _AGC_FRAME:] *= db_to_gain(gain_db)
    return AudioBuffer(y, a.sample_rate)


# ---------------------------------------------------------------------------
# Proxy labels


def proxy_mos(spec, drr):
    """Deterministic stand-in label: MOS rises with SNR and DRR, capped at 5.

    1 + 4 * sigmoid(0.18*(snr-18)) * sigmoid(0.5*(drr+2)), with a 1.05 bonus
    for processed utterances; the product is clipped to 1 so MOS stays in
    [1, 5]. Monotone nondecreasing in both SNR and DRR.
    """
    snr = spec.realized_snr_db
    if not (SNR_MIN_DB <= snr <= SNR_MAX_DB):
        raise DataError(f"realized SNR {snr} outside [0, 50] dB")
    s1 = 1.0 / (1.0 + math.exp(-0.18 * (snr - 18.0)))
    s2 = 1.0 / (1.0 + math.exp(-0.5 * (drr + 2.0)))
    q = s1 * s2 * (1.05 if spec.processed else 1.0)
    return 1.0 + 4.0 * min(q, 1.0)
