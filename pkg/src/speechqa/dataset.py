"""Dataset rendering and the tab-separated manifest format."""

import os
from dataclasses import dataclass, field

import numpy as np

from .audio import write_wav
from .errors import ConfigError, DataError
from .synth import (ConditionSpec, NOISE_KIND_PROBS, NOISE_KINDS,
                    GENERATOR_VERSION, agc, convolve_rir, drr_db,
                    generate_clean, generate_noise, mix_noise, noise_suppress,
                    normalize_level, proxy_mos, spl_to_dbfs, synth_rir)

MANIFEST_NAME = "manifest.tsv"


@dataclass
class SynthConfig:
    n_utterances: int = 100
    out_dir: str = "."
    duration_s: float = 20.0
    voice_spl_mean: float = 65.0
    voice_spl_sd: float = 8.0
    noise_spl_mean: float = 45.0
    noise_spl_sd: float = 15.0
    processed_fraction: float = 0.5
    anechoic_fraction: float = 0.1
    n_rirs: int = 120
    seed: int = 0

    def validate(self):
        if self.n_utterances < 1:
            raise ConfigError("n_utterances must be >= 1")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if not (0.0 <= self.processed_fraction <= 1.0):
            raise ConfigError("processed_fraction must lie in [0, 1]")
        if not (0.0 <= self.anechoic_fraction <= 1.0):
            raise ConfigError("anechoic_fraction must lie in [0, 1]")


@dataclass
class ManifestRecord:
    utterance_id: str
    path: str  # relative to the manifest directory
    spec: ConditionSpec
    label: float | None


@dataclass
class DatasetManifest:
    records: list
    seed: int
    version: str = GENERATOR_VERSION

    def ids(self):
        return [r.utterance_id for r in self.records]

    def labels(self):
        return {r.utterance_id: r.label for r in self.records if r.label is not None}


def write_manifest(manifest, path):
    lines = [f"#{manifest.version}\tseed={manifest.seed}"]
    for r in manifest.records:
        s = r.spec
        label = "NA" if r.label is None else f"{r.label:.6f}"
        lines.append("\t".join([
            r.utterance_id, r.path, f"{s.voice_level_db_spl:.6f}",
            f"{s.noise_level_db_spl:.6f}", s.noise_kind, s.rir_id,
            "1" if s.processed else "0", f"{s.realized_snr_db:.6f}", label,
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: missing manifest header line")
    head = lines[0][1:].split("\t")
    version = head[0]
    seed = int(head[1].split("=", 1)[1])
    records = []
    seen = set()
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 9:
            raise DataError(f"{path}:{ln}: expected 9 fields, got {len(parts)}")
        (uid, rel, v_spl, n_spl, kind, rir_id, processed, snr, label) = parts
        if uid in seen:
            raise DataError(f"{path}:{ln}: duplicate utterance id {uid!r}")
        seen.add(uid)
        spec = ConditionSpec(uid, float(v_spl), float(n_spl), rir_id, kind,
                             processed == "1", float(snr))
        records.append(ManifestRecord(
            uid, rel, spec, None if label == "NA" else float(label)))
    return DatasetManifest(records, seed, version)


def read_label_file(path):
    """Two-column (id, MOS) file; duplicates and malformed lines are errors."""
    labels = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected 'id mos', got {line!r}")
            uid, raw = parts
            if uid in labels:
                raise DataError(f"{path}:{ln}: duplicate id {uid!r}")
            try:
                mos = float(raw)
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: bad MOS value {raw!r}") from exc
            if not (1.0 <= mos <= 5.0):
                raise DataError(f"{path}:{ln}: MOS {mos} outside [1, 5]")
            labels[uid] = mos
    return labels


def _build_rir_pool(cfg, rng):
    pool = []
    for i in range(cfg.n_rirs):
        if rng.random() < cfg.anechoic_fraction:
            rir = synth_rir(0.0, float(rng.uniform(0.5, 3.0)), rng)
        else:
            rir = synth_rir(float(rng.uniform(0.3, 0.5)),
                            float(rng.uniform(0.5, 3.0)), rng)
        pool.append((f"rir{i:03d}", rir))
    return pool


def render_utterance(spec, rir, duration_s, seed, index):
    """Render one degraded utterance: clean -> level -> RIR -> noise [-> NS+AGC].

    Pure function of its arguments; returns (AudioBuffer, realized_snr_db).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    clean = generate_clean(duration_s, rng)
    voice_dbfs = spl_to_dbfs(spec.voice_level_db_spl)
    leveled = normalize_level(clean, voice_dbfs)
    reverberant = convolve_rir(leveled, rir)
    noise = generate_noise(spec.noise_kind, len(reverberant), rng)
    mixed, realized = mix_noise(reverberant, noise, spec)
    if spec.processed:
        mixed = agc(noise_suppress(mixed), voice_dbfs)
    return mixed, realized


def synthesize_dataset(cfg, external_labels=None):
    """Render the full dataset and write WAVs plus the manifest.

    Labels come from the proxy oracle unless an external (id -> MOS) map is
    supplied. Deterministic for a fixed config.
    """
    cfg.validate()
    out_dir = cfg.out_dir
    wav_dir = os.path.join(out_dir, "wav")
    try:
        os.makedirs(wav_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {wav_dir}: {exc}") from exc

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11D]))
    pool = _build_rir_pool(cfg, rng)
    records = []
    total_clipped = 0
    for i in range(cfg.n_utterances):
        uid = f"utt{i:05d}"
        rir_id, rir = pool[rng.integers(len(pool))]
        kind = NOISE_KINDS[rng.choice(len(NOISE_KINDS), p=NOISE_KIND_PROBS)]
        spec = ConditionSpec(
            utterance_id=uid,
            voice_level_db_spl=float(rng.normal(cfg.voice_spl_mean, cfg.voice_spl_sd)),
            noise_level_db_spl=float(rng.normal(cfg.noise_spl_mean, cfg.noise_spl_sd)),
            rir_id=rir_id,
            noise_kind=kind,
            processed=bool(rng.random() < cfg.processed_fraction),
        )
        buf, realized = render_utterance(spec, rir, cfg.duration_s, cfg.seed, i)
        spec.realized_snr_db = realized
        rel = os.path.join("wav", f"{uid}.wav")
        total_clipped += write_wav(os.path.join(out_dir, rel), buf)
        if external_labels is not None:
            label = external_labels.get(uid)
        else:
            label = proxy_mos(spec, drr_db(rir))
        records.append(ManifestRecord(uid, rel, spec, label))

    manifest = DatasetManifest(records, cfg.seed)
    write_manifest(manifest, os.path.join(out_dir, MANIFEST_NAME))
    if total_clipped:
        print(f"synthesize_dataset: {total_clipped} samples clipped at write-out")
    return manifest
