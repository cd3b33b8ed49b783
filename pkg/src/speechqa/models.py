"""The three MOS estimators: assembly, training, aggregation, checkpoints.

`cqt_cnn` consumes the 240x220 constant-Q map, `ivec_dnn` a 400-dim i-vector,
`mel_dnn` one 1450-dim context vector per speech-active frame (its window
scores are aggregated per utterance by mean, histogram mode, or an ELM over
window-score statistics).
"""

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .errors import DataError, NoActiveFramesError, TrainingDivergedError
from .nn import (Adam, Conv2d, Dense, Dropout, ElmModel, Flatten, Layer,
                 MaxPool2d, ReLU, mse_loss)

MODEL_KINDS = ("cqt_cnn", "ivec_dnn", "mel_dnn")
AGGREGATIONS = ("mean", "mode", "elm")

# statistics of the window-score timeline fed to the ELM aggregator
ELM_STAT_DIM = 9


@dataclass
class ModelSpec:
    kind: str
    input_shape: tuple          # (dim,) for DNNs, (channels, h, w) for the CNN
    hidden: tuple = ()          # dense widths after flatten / input
    conv_stages: tuple = ()     # ((out_ch, kh, kw, pad), ...) per stage, pool+dropout after each
    dropout: float = 0.0
    lr: float = 1e-4
    aggregation: str = "mean"

    def to_json(self):
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        d["input_shape"] = tuple(d["input_shape"])
        d["hidden"] = tuple(d["hidden"])
        d["conv_stages"] = tuple(tuple(tuple(l) for l in stage)
                                 for stage in d["conv_stages"])
        return ModelSpec(**d)


def default_spec(kind, **overrides):
    """Full-scale architecture defaults; overrides allow desk-scale variants."""
    if kind == "cqt_cnn":
        spec = ModelSpec(
            kind="cqt_cnn", input_shape=(1, 240, 220),
            conv_stages=(((32, 25, 30, "valid"), (32, 25, 30, "same")),
                         ((64, 3, 3, "valid"), (64, 3, 3, "valid"))),
            hidden=(64,), dropout=0.2, lr=1e-4)
    elif kind == "ivec_dnn":
        spec = ModelSpec(kind="ivec_dnn", input_shape=(400,),
                         hidden=(200, 100), dropout=0.2, lr=1e-4)
    elif kind == "mel_dnn":
        spec = ModelSpec(kind="mel_dnn", input_shape=(1450,),
                         hidden=(1024, 1024, 1024, 1024), dropout=0.5, lr=4e-4)
    else:
        raise DataError(f"unknown model kind {kind!r}")
    for key, value in overrides.items():
        if not hasattr(spec, key):
            raise DataError(f"unknown spec override {key!r}")
        setattr(spec, key, value)
    if spec.aggregation not in AGGREGATIONS:
        raise DataError(f"unknown aggregation {spec.aggregation!r}")
    return spec


class Network:
    """A plain layer stack with a scalar linear output."""

    def __init__(self, layers):
        self.layers = layers

    def set_training(self, flag):
        for layer in self.layers:
            layer.training = flag

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x[:, 0]

    def backward(self, dy):
        g = dy[:, None]
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def n_params(self):
        return sum(p.size for p in self.params())


class _PaddedConv(Conv2d):
    """'same'-padded variant of Conv2d (zero padding, stride 1)."""

    def forward(self, x):
        _, _, kh, kw = self.w.shape
        self._pad = ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)
        (pt, pb), (pl, pr) = self._pad
        return super().forward(np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))))

    def backward(self, dy):
        dx = super().backward(dy)
        (pt, pb), (pl, pr) = self._pad
        h, w = dx.shape[2] - pt - pb, dx.shape[3] - pl - pr
        return dx[:, :, pt:pt + h, pl:pl + w]


def conv_shape_chain(spec):
    """Spatial sizes through the conv stages, ending with the flatten size."""
    _, h, w = spec.input_shape
    chain = [(h, w)]
    channels = spec.input_shape[0]
    for stage in spec.conv_stages:
        for out_ch, kh, kw, pad in stage:
            if pad == "valid":
                h, w = h - kh + 1, w - kw + 1
            elif pad != "same":
                raise DataError(f"unknown padding {pad!r}")
            if h < 1 or w < 1:
                raise DataError("kernel larger than its input in the shape chain")
            channels = out_ch
            chain.append((h, w))
        h, w = h // 2, w // 2
        chain.append((h, w))
    return chain, channels * h * w


def build(spec, rng):
    """Instantiate the network for a spec; shape chain is asserted here."""
    layers = []
    if spec.kind == "cqt_cnn":
        _, flatten_size = conv_shape_chain(spec)
        in_ch = spec.input_shape[0]
        for stage in spec.conv_stages:
            for out_ch, kh, kw, pad in stage:
                cls = _PaddedConv if pad == "same" else Conv2d
                layers.append(cls(in_ch, out_ch, (kh, kw), rng))
                layers.append(ReLU())
                in_ch = out_ch
            layers.append(MaxPool2d())
            layers.append(Dropout(spec.dropout, rng))
        layers.append(Flatten())
        n_in = flatten_size
    else:
        n_in = spec.input_shape[0]
    for width in spec.hidden:
        layers.append(Dense(n_in, width, rng))
        layers.append(ReLU())
        if spec.dropout > 0:
            layers.append(Dropout(spec.dropout, rng))
        n_in = width
    layers.append(Dense(n_in, 1, rng))
    return Network(layers)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: list
    opt_state: dict
    input_mean: np.ndarray
    input_std: np.ndarray
    seed: int
    epochs: int
    val_history: list
    elm: ElmModel | None = None
    elm_norm: tuple | None = None   # (mean, std) over training window statistics

    def network(self):
        net = build(self.spec, np.random.default_rng(0))
        for p, saved in zip(net.params(), self.params):
            p[...] = saved
        net.set_training(False)
        return net


def _normalizer(x):
    mean = x.reshape(len(x), -1).mean(axis=0)
    std = x.reshape(len(x), -1).std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean.reshape(x.shape[1:]), std.reshape(x.shape[1:])


def train(spec, x_train, y_train, x_val, y_val, cfg=None):
    """Minibatch Adam on MSE with early stopping on validation MSE.

    Inputs are standardized with training-split statistics (stored in the
    checkpoint). Returns the best-validation checkpoint; deterministic given
    cfg.seed.
    """
    cfg = cfg or TrainConfig()
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    if len(x_train) == 0:
        raise DataError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    net = build(spec, rng)
    mean, std = _normalizer(x_train)
    xt = (x_train - mean) / std
    xv = (np.asarray(x_val, dtype=np.float64) - mean) / std
    yv = np.asarray(y_val, dtype=np.float64)

    opt = Adam(net.params(), lr=spec.lr)
    best_params = [p.copy() for p in net.params()]
    best_val = np.inf
    best_epoch = 0
    history = []
    n = len(xt)
    for epoch in range(cfg.max_epochs):
        net.set_training(True)
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            pred = net.forward(xt[idx])
            loss, dpred = mse_loss(pred, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError("NaN loss", epoch=epoch,
                                            batch=start // cfg.batch_size)
            net.backward(dpred)
            opt.step(net.grads())
        net.set_training(False)
        val_mse, _ = mse_loss(net.forward(xv), yv)
        history.append(val_mse)
        if val_mse < best_val - 1e-12:
            best_val = val_mse
            best_params = [p.copy() for p in net.params()]
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.patience:
            break

    return Checkpoint(spec=spec, params=best_params, opt_state=opt.state_arrays(),
                      input_mean=mean, input_std=std, seed=cfg.seed,
                      epochs=len(history), val_history=history)


# ---------------------------------------------------------------------------
# Prediction and aggregation


@dataclass
class UtterancePrediction:
    utterance_id: str
    window_scores: np.ndarray | None
    mos: float
    aggregation: str

    def reported_mos(self):
        return float(np.clip(self.mos, 1.0, 5.0))


MODE_BIN_WIDTH = 0.1


def aggregate_mode(scores):
    """Mean of the scores falling in the fullest 0.1-wide bin over [1, 5]."""
    scores = np.asarray(scores, dtype=np.float64)
    bins = np.clip(((np.clip(scores, 1.0, 5.0) - 1.0) / MODE_BIN_WIDTH).astype(int),
                   0, int(4.0 / MODE_BIN_WIDTH) - 1)
    counts = np.bincount(bins, minlength=int(4.0 / MODE_BIN_WIDTH))
    winner = int(np.argmax(counts))  # argmax ties break toward the lower bin
    return float(np.mean(scores[bins == winner]))


def window_statistics(scores):
    """Timeline statistics fed to the ELM aggregator (fixed 9-dim layout)."""
    s = np.asarray(scores, dtype=np.float64)
    return np.array([s.mean(), s.std(), s.min(), s.max(),
                     *np.percentile(s, [5, 25, 50, 75, 95])])


def _scores(checkpoint, net, features):
    x = (np.asarray(features, dtype=np.float64) - checkpoint.input_mean) \
        / checkpoint.input_std
    return net.forward(x)


def predict_utterance(checkpoint, utterance_id, features, net=None):
    """One MOS estimate per utterance.

    For mel_dnn, `features` holds one row per active-frame window and the
    window scores are aggregated by the spec's method; the other kinds score a
    single feature array directly.
    """
    net = net or checkpoint.network()
    spec = checkpoint.spec
    if spec.kind == "mel_dnn":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise NoActiveFramesError(f"{utterance_id}: no speech windows to score")
        scores = _scores(checkpoint, net, features)
        if spec.aggregation == "mean":
            mos = float(np.mean(scores))
        elif spec.aggregation == "mode":
            mos = aggregate_mode(scores)
        else:
            if checkpoint.elm is None:
                raise DataError("ELM aggregation requested but no ELM head fitted")
            stat_mean, stat_std = checkpoint.elm_norm
            stats = (window_statistics(scores) - stat_mean) / stat_std
            mos = float(checkpoint.elm.predict(stats[None, :])[0])
        return UtterancePrediction(utterance_id, scores, mos, spec.aggregation)
    feats = np.asarray(features, dtype=np.float64)
    expected = spec.input_shape
    if feats.shape not in (expected, tuple(expected)):
        if spec.kind == "cqt_cnn" and feats.shape == tuple(expected[1:]):
            feats = feats[None, :, :]
        else:
            raise DataError(
                f"{utterance_id}: feature shape {feats.shape} does not match "
                f"{spec.kind} input {tuple(expected)}")
    score = float(_scores(checkpoint, net, feats[None, ...])[0])
    return UtterancePrediction(utterance_id, None, score, "direct")


ELM_INPUT_SCALE = 0.3
ELM_RIDGE_GRID = (1e-2, 1e-1, 1.0, 10.0, 100.0)


def fit_elm_head(checkpoint, features_by_id, labels_by_id, train_ids,
                 val_ids=None, n_hidden=512, ridge=1e-6, seed=0):
    """Fit the ELM aggregator on training-split window-score statistics.

    Statistics are standardized with training moments. When a validation split
    is given, the ridge strength is picked from a small grid by validation
    MSE; otherwise the passed ridge is used as-is.
    """
    if checkpoint.spec.kind != "mel_dnn":
        raise DataError("ELM head applies to mel_dnn checkpoints only")
    if len(train_ids) < 2:
        raise DataError("need at least 2 training utterances for the ELM head")
    net = checkpoint.network()

    def stat_rows(ids):
        rows = [window_statistics(_scores(checkpoint, net, features_by_id[uid]))
                for uid in ids]
        return np.stack(rows), np.array([labels_by_id[uid] for uid in ids])

    s_train, y_train = stat_rows(train_ids)
    mean = s_train.mean(axis=0)
    std = np.where(s_train.std(axis=0) < 1e-9, 1.0, s_train.std(axis=0))
    s_train = (s_train - mean) / std

    def make_elm(ridge_value):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE17]))
        elm = ElmModel(ELM_STAT_DIM, n_hidden=n_hidden, ridge=ridge_value, rng=rng)
        elm.w_in *= ELM_INPUT_SCALE
        elm.b_in *= ELM_INPUT_SCALE
        return elm.fit(s_train, y_train)

    if val_ids:
        s_val, y_val = stat_rows(val_ids)
        s_val = (s_val - mean) / std
        best = None
        for candidate in ELM_RIDGE_GRID:
            elm = make_elm(candidate)
            val_mse = float(np.mean(
                (np.clip(elm.predict(s_val), 1.0, 5.0) - y_val) ** 2))
            if best is None or val_mse < best[0]:
                best = (val_mse, elm)
        elm = best[1]
    else:
        elm = make_elm(ridge)

    out = copy.copy(checkpoint)
    out.spec = copy.copy(checkpoint.spec)
    out.spec.aggregation = "elm"
    out.elm = elm
    out.elm_norm = (mean, std)
    return out


# ---------------------------------------------------------------------------
# Checkpoint serialization


def save(checkpoint, path):
    entries = {"spec": checkpoint.spec.to_json(),
               "meta": json.dumps({"seed": checkpoint.seed,
                                   "epochs": checkpoint.epochs}),
               "val_history": np.asarray(checkpoint.val_history, dtype=np.float64),
               "input_mean": checkpoint.input_mean,
               "input_std": checkpoint.input_std}
    for i, p in enumerate(checkpoint.params):
        entries[f"param{i}"] = p
    for key, value in checkpoint.opt_state.items():
        entries[f"opt.{key}"] = value
    if checkpoint.elm is not None:
        entries["elm.w_in"] = checkpoint.elm.w_in
        entries["elm.b_in"] = checkpoint.elm.b_in
        entries["elm.beta"] = np.asarray(checkpoint.elm.beta)
        entries["elm.ridge"] = np.array([checkpoint.elm.ridge])
        entries["elm.stat_mean"] = np.asarray(checkpoint.elm_norm[0])
        entries["elm.stat_std"] = np.asarray(checkpoint.elm_norm[1])
    container.write_archive(path, entries)


def load(path):
    entries = container.read_archive(path)
    spec = ModelSpec.from_json(entries["spec"])
    meta = json.loads(entries["meta"])
    params = []
    while f"param{len(params)}" in entries:
        params.append(entries[f"param{len(params)}"])
    opt_state = {key[4:]: value for key, value in entries.items()
                 if key.startswith("opt.")}
    elm = None
    elm_norm = None
    if "elm.beta" in entries:
        elm = ElmModel.__new__(ElmModel)
        elm.w_in = entries["elm.w_in"]
        elm.b_in = entries["elm.b_in"]
        elm.beta = entries["elm.beta"]
        elm.ridge = float(entries["elm.ridge"][0])
        elm_norm = (entries["elm.stat_mean"], entries["elm.stat_std"])
    return Checkpoint(spec=spec, params=params, opt_state=opt_state,
                      input_mean=entries["input_mean"],
                      input_std=entries["input_std"],
                      seed=meta["seed"], epochs=meta["epochs"],
                      val_history=list(entries["val_history"]), elm=elm,
                      elm_norm=elm_norm)
