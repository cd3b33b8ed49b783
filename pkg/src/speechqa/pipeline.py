"""Stage orchestration: extraction over a manifest, training, prediction.

Everything here is deterministic given the dataset seed; per-utterance work is
a pure function of the utterance and the configuration.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import container, evaluation, ivector, models
from .audio import read_wav
from .dataset import read_manifest
from .errors import DataError, NoActiveFramesError
from .features import (CqtParams, N_MFCC, cqt, frame_features,
                       mel_context_vectors, mfcc_from_spectra, stft, vad_flags)

FEATURE_KINDS = ("cqt", "mel", "ivec")


@dataclass
class IvecConfig:
    n_components: int = 64
    dim: int = 400
    ubm_iterations: int = 10
    tv_iterations: int = 5
    max_frames_per_utt: int = 2000
    seed: int = 0


def utterance_mfcc(x):
    """Static MFCC frames (n_frames, 26) restricted to speech-active frames."""
    spectra = stft(x)
    coeffs = mfcc_from_spectra(np.abs(spectra), n_coeffs=N_MFCC)
    flags = vad_flags(x) == 1
    return coeffs[flags]


def feature_dir(out_dir, kind):
    return os.path.join(out_dir, "features", kind)


def feature_path(out_dir, kind, uid):
    return os.path.join(feature_dir(out_dir, kind), f"{uid}.ftr")


def frontend_path(out_dir):
    return os.path.join(feature_dir(out_dir, "ivec"), "frontend.mdl")


def _wav(data_dir, record):
    return read_wav(os.path.join(data_dir, record.path)).samples


def train_ivector_frontend(data_dir, manifest, cfg, train_ids=None):
    """Train UBM and T on the manifest's (train) utterances, return TvMatrix."""
    ids = set(train_ids) if train_ids is not None else None
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1EC]))
    frame_sets = []
    for record in manifest.records:
        if ids is not None and record.utterance_id not in ids:
            continue
        frames = utterance_mfcc(_wav(data_dir, record))
        if len(frames) > cfg.max_frames_per_utt:
            frames = frames[:cfg.max_frames_per_utt]
        if len(frames):
            frame_sets.append(frames)
    if not frame_sets:
        raise DataError("no speech-active frames anywhere in the manifest")
    pool = np.vstack(frame_sets)
    ubm = ivector.train_ubm(pool, cfg.n_components, cfg.ubm_iterations, rng)
    stats = [ivector.baum_welch_stats(ubm, frames) for frames in frame_sets]
    return ivector.train_tv(stats, ubm, cfg.dim, cfg.tv_iterations, rng)


def _extract_one(data_dir, kind, record, cqt_params, tv):
    x = _wav(data_dir, record)
    if kind == "cqt":
        feats = cqt(x, cqt_params)
    elif kind == "mel":
        feats = mel_context_vectors(x)
    else:
        frames = utterance_mfcc(x)
        if len(frames) == 0:
            raise NoActiveFramesError(f"{record.utterance_id}: no active frames")
        stats = ivector.baum_welch_stats(tv.ubm, frames)
        feats = ivector.extract_ivector(tv, stats)
    container.write_feature_file(
        feature_path(data_dir, kind, record.utterance_id), feats)


def _extract_worker(args):
    _extract_one(*args, tv=None)


def extract_features(data_dir, manifest, kind, force=False, cqt_params=None,
                     ivec_cfg=None, train_ids=None, jobs=1):
    """Write one feature file per utterance; existing files are skipped.

    For `ivec`, the UBM/T front-end is trained first (and reused) when its
    model file is absent. cqt/mel extraction can fan out over worker
    processes with jobs > 1; output files are identical either way.
    """
    if kind not in FEATURE_KINDS:
        raise DataError(f"unknown feature kind {kind!r}")
    os.makedirs(feature_dir(data_dir, kind), exist_ok=True)
    tv = None
    if kind == "ivec":
        fp = frontend_path(data_dir)
        if force or not os.path.exists(fp):
            tv = train_ivector_frontend(data_dir, manifest,
                                        ivec_cfg or IvecConfig(), train_ids)
            ivector.save_tv(fp, tv)
        else:
            tv = ivector.load_tv(fp)
    pending = [r for r in manifest.records
               if force or not os.path.exists(
                   feature_path(data_dir, kind, r.utterance_id))]
    if jobs > 1 and kind != "ivec":
        import concurrent.futures
        work = [(data_dir, kind, r, cqt_params) for r in pending]
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_extract_worker, work))
    else:
        for record in pending:
            _extract_one(data_dir, kind, record, cqt_params, tv)
    return len(pending)


def load_features(data_dir, kind, ids):
    return {uid: container.read_feature_file(feature_path(data_dir, kind, uid))
            for uid in ids}


MODEL_FEATURE_KIND = {"cqt_cnn": "cqt", "ivec_dnn": "ivec", "mel_dnn": "mel"}


def training_arrays(kind, features_by_id, labels_by_id, ids, seed=0,
                    windows_per_utt=30):
    """Stack per-utterance features into (X, y) for a model kind.

    mel_dnn expands utterances into (capped, seeded-subsampled) window rows,
    each labeled with the utterance MOS; the other kinds contribute one row
    per utterance.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA88A]))
    xs, ys = [], []
    for uid in ids:
        feats = features_by_id[uid]
        label = labels_by_id[uid]
        if kind == "mel_dnn":
            if windows_per_utt and len(feats) > windows_per_utt:
                pick = np.sort(rng.choice(len(feats), windows_per_utt, replace=False))
                feats = feats[pick]
            xs.append(feats)
            ys.append(np.full(len(feats), label))
        elif kind == "cqt_cnn":
            xs.append(feats[None, None, :, :])
            ys.append([label])
        else:
            xs.append(feats[None, :])
            ys.append([label])
    return np.concatenate(xs), np.concatenate(ys)


def predict_all(checkpoint, features_by_id, ids):
    """Map utterance ids to raw predictions; scoring errors are collected."""
    net = checkpoint.network()
    predictions = {}
    errored = []
    for uid in ids:
        try:
            pred = models.predict_utterance(checkpoint, uid, features_by_id[uid],
                                            net=net)
            predictions[uid] = pred.mos
        except (DataError, NoActiveFramesError):
            errored.append(uid)
    return predictions, errored


def train_from_manifest(data_dir, manifest, kind, spec=None, train_cfg=None,
                        seed=0, windows_per_utt=30):
    """Split, load features, and train one model; returns (checkpoint, split)."""
    labeled = manifest.labels()
    ids = [uid for uid in manifest.ids() if uid in labeled]
    if len(ids) < 3:
        raise DataError("manifest has fewer than 3 labeled utterances")
    assignment = evaluation.split(ids, seed)
    fkind = MODEL_FEATURE_KIND[kind]
    features = load_features(data_dir, fkind, ids)
    spec = spec or models.default_spec(kind)
    cfg = train_cfg or models.TrainConfig(seed=seed)
    xt, yt = training_arrays(kind, features, labeled, assignment.ids("train"),
                             seed=seed, windows_per_utt=windows_per_utt)
    xv, yv = training_arrays(kind, features, labeled, assignment.ids("val"),
                             seed=seed + 1, windows_per_utt=windows_per_utt)
    checkpoint = models.train(spec, xt, yt, xv, yv, cfg)
    return checkpoint, assignment, features


def evaluate_on_split(checkpoint, features_by_id, labels_by_id, test_ids,
                      model_name):
    """Clipped-MOS evaluation of a checkpoint on the test split."""
    predictions, errored = predict_all(checkpoint, features_by_id, test_ids)
    clipped = {uid: float(np.clip(v, 1.0, 5.0)) for uid, v in predictions.items()}
    return evaluation.evaluate(clipped, labels_by_id, model_name, errored)
