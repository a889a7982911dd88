"""Word-prediction architectures, loss, training loop, checkpoints.

Two variants share one engine. "cnn-pool" interleaves convolutions with
max pooling, collapses time with a global max, and finishes with dense
layers. "psc" stacks convolutions without pooling, ends in a linear
convolution with one filter per vocabulary word, and aggregates the
resulting per-position word scores with logsumexp pooling; the pre-pooling
score matrix doubles as a localization map.

Both produce a per-word presence probability via a final sigmoid and train
against soft or binary targets with a summed binary cross-entropy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DataError, FormatError, InvalidInputError, NumericError
from .tensor import Tensor

_CKPT_MAGIC = b"GKWM"
_CKPT_VERSION = 1

CNN_POOL = "cnn-pool"
PSC = "psc"

LOSS_CLAMP = 1e-7


# -- architecture description ------------------------------------------------

@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer stack as data. Layers are tuples:

    ("conv", width, filters, activation)   valid conv over time
    ("pool", size)                         non-overlapping max pool
    ("maxtime",)                           max over remaining time
    ("lse", r)                             logsumexp pooling over time
    ("dense", units, activation)
    ("sigmoid",)                           output squash (psc)
    """

    variant: str
    vocab_size: int
    input_dim: int
    layers: tuple

    def __post_init__(self):
        if self.variant not in (CNN_POOL, PSC):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.vocab_size < 1 or self.input_dim < 1:
            raise ConfigError("vocab_size and input_dim must be >= 1")
        convs = [l for l in self.layers if l[0] == "conv"]
        if self.variant == PSC:
            if convs[-1][2] != self.vocab_size:
                raise ConfigError(
                    f"psc final convolution must have vocab_size={self.vocab_size} "
                    f"filters, got {convs[-1][2]}"
                )
            r = next(l[1] for l in self.layers if l[0] == "lse")
            if not r > 0:
                raise ConfigError(f"pooling sharpness r must be > 0, got {r}")
        else:
            last = self.layers[-1]
            if last[0] != "dense" or last[1] != self.vocab_size:
                raise ConfigError(
                    f"cnn-pool must end in a dense layer of vocab_size="
                    f"{self.vocab_size} units"
                )

    @property
    def r(self):
        for layer in self.layers:
            if layer[0] == "lse":
                return layer[1]
        return None

    @property
    def min_frames(self):
        """Smallest input length every valid convolution and pool accepts."""
        need = 1
        for layer in reversed(self.layers):
            if layer[0] == "conv":
                need = need + layer[1] - 1
            elif layer[0] == "pool":
                need = (need - 1) * layer[1] + 1
        return need

    def time_extents(self, frames):
        """Frame counts after each conv/pool layer for a `frames`-long input."""
        extents = []
        t = frames
        for layer in self.layers:
            if layer[0] == "conv":
                t = t - layer[1] + 1
                extents.append(t)
            elif layer[0] == "pool":
                t = -(-t // layer[1])
                extents.append(t)
        return extents

    def to_dict(self):
        return {
            "variant": self.variant,
            "vocab_size": self.vocab_size,
            "input_dim": self.input_dim,
            "layers": [list(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                variant=d["variant"],
                vocab_size=int(d["vocab_size"]),
                input_dim=int(d["input_dim"]),
                layers=tuple(tuple(l) for l in d["layers"]),
            )
        except KeyError as err:
            raise FormatError(f"architecture description missing key {err}") from None

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def cnn_pool(vocab_size, input_dim=39, conv_filters=(64, 256, 1024), dense_units=4096):
    """Conv/pool stack with a global temporal max and a dense head."""
    f1, f2, f3 = conv_filters
    layers = (
        ("conv", 9, f1, "relu"),
        ("pool", 3),
        ("conv", 10, f2, "relu"),
        ("pool", 3),
        ("conv", 11, f3, "relu"),
        ("maxtime",),
        ("dense", dense_units, "relu"),
        ("dense", vocab_size, "sigmoid"),
    )
    return ArchitectureSpec(CNN_POOL, vocab_size, input_dim, layers)


def psc(vocab_size, input_dim=39, conv_filters=(96, 96, 96, 96, 96), r=1.0):
    """All-conv stack ending in one linear filter per word, pooled softly."""
    layers = tuple(
        ("conv", 9 if i == 0 else 10, f, "relu") for i, f in enumerate(conv_filters)
    ) + (
        ("conv", 10, vocab_size, "none"),
        ("lse", float(r)),
        ("sigmoid",),
    )
    return ArchitectureSpec(PSC, vocab_size, input_dim, layers)


def toy_spec(variant, vocab_size=3, input_dim=8):
    """Reduced-width instance of either architecture for gradient checks."""
    if variant == CNN_POOL:
        return cnn_pool(vocab_size, input_dim, conv_filters=(4, 5, 6), dense_units=10)
    if variant == PSC:
        return psc(vocab_size, input_dim, conv_filters=(5, 5, 5, 5, 5))
    raise ConfigError(f"unknown variant {variant!r}")


# -- the model ----------------------------------------------------------------

class SpeechModel:
    """Parameter store plus the forward pass for one ArchitectureSpec."""

    def __init__(self, spec, seed=0, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.params = {}
        self.last_time_extents = []
        self._last_h = None
        self._last_h_lengths = None
        rng = np.random.default_rng(seed)
        d = spec.input_dim
        conv_i = dense_i = 0
        for layer in spec.layers:
            if layer[0] == "conv":
                _, width, filters, activation = layer
                conv_i += 1
                fan_in, fan_out = width * d, width * filters
                limit = self._limit(activation, fan_in, fan_out)
                self.params[f"conv{conv_i}.filters"] = Tensor(
                    rng.uniform(-limit, limit, size=(filters, width, d)).astype(dtype),
                    requires_grad=True, _op=f"conv{conv_i}.filters",
                )
                self.params[f"conv{conv_i}.bias"] = Tensor(
                    np.zeros(filters, dtype=dtype),
                    requires_grad=True, _op=f"conv{conv_i}.bias",
                )
                d = filters
            elif layer[0] == "dense":
                _, units, activation = layer
                dense_i += 1
                limit = self._limit(activation, d, units)
                self.params[f"dense{dense_i}.weights"] = Tensor(
                    rng.uniform(-limit, limit, size=(units, d)).astype(dtype),
                    requires_grad=True, _op=f"dense{dense_i}.weights",
                )
                self.params[f"dense{dense_i}.bias"] = Tensor(
                    np.zeros(units, dtype=dtype),
                    requires_grad=True, _op=f"dense{dense_i}.bias",
                )
                d = units

    @staticmethod
    def _limit(activation, fan_in, fan_out):
        # He-uniform ahead of ReLU, Glorot-uniform for linear/sigmoid
        if activation == "relu":
            return np.sqrt(6.0 / fan_in)
        return np.sqrt(6.0 / (fan_in + fan_out))

    def parameters(self):
        return list(self.params.items())

    def forward(self, features, lengths=None):
        """Features (B, T, D) with valid `lengths`, or a single (T, D) matrix.

        Returns the (B, vocab_size) probability Tensor. For the psc variant
        the pre-pooling score matrix is kept on the model (`localization`).
        """
        x = np.asarray(features, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
            lengths = None
        if x.ndim != 3:
            raise DataError(f"features must be (T, D) or (B, T, D), got {x.shape}")
        B, T, D = x.shape
        if D != self.spec.input_dim:
            raise DataError(
                f"feature dimension {D} != expected {self.spec.input_dim}"
            )
        lengths = (
            np.full(B, T, dtype=np.int64) if lengths is None
            else np.asarray(lengths, dtype=np.int64)
        )
        need = self.spec.min_frames
        if (lengths < need).any():
            short = int(np.argmin(lengths))
            raise InvalidInputError(
                f"utterance at batch index {short} has {int(lengths[short])} "
                f"frames; this architecture needs at least {need}"
            )

        t = Tensor(x)
        lens = lengths
        extents = []
        self._last_h = None
        self._last_h_lengths = None
        conv_i = dense_i = 0
        for layer in self.spec.layers:
            if layer[0] == "conv":
                _, width, _, activation = layer
                conv_i += 1
                t = ops.conv1d_valid(
                    t,
                    self.params[f"conv{conv_i}.filters"],
                    self.params[f"conv{conv_i}.bias"],
                    lengths=lens,
                )
                lens = ops.conv_out_lengths(lens, width)
                extents.append(t.data.shape[1])
                if activation == "relu":
                    t = ops.relu(t)
            elif layer[0] == "pool":
                t = ops.max_pool1d(t, layer[1], lengths=lens)
                lens = ops.pool_out_lengths(lens, layer[1])
                extents.append(t.data.shape[1])
            elif layer[0] == "maxtime":
                t = ops.max_over_time(t, lengths=lens)
                lens = None
            elif layer[0] == "lse":
                self._last_h = t
                self._last_h_lengths = lens.copy()
                t = ops.logsumexp_pool(t, layer[1], lengths=lens)
                lens = None
            elif layer[0] == "dense":
                _, _, activation = layer
                dense_i += 1
                t = ops.dense(
                    t,
                    self.params[f"dense{dense_i}.weights"],
                    self.params[f"dense{dense_i}.bias"],
                    activation=activation,
                )
            elif layer[0] == "sigmoid":
                t = ops.sigmoid(t)
        self.last_time_extents = extents
        return t

    def predict(self, features):
        """Single utterance (T, D) -> (vocab_size,) probabilities."""
        return self.forward(features).data[0].copy()

    def localization(self):
        """Per-position word scores from the last psc forward: (h, lengths)."""
        if self._last_h is None:
            raise ConfigError("no localization available; run a psc forward first")
        return self._last_h.data, self._last_h_lengths

    def state(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state):
        for name, p in self.params.items():
            arr = state[name]
            if arr.shape != p.data.shape:
                raise FormatError(
                    f"parameter {name}: stored shape {arr.shape} != "
                    f"expected {p.data.shape}"
                )
            p.data = arr.astype(self.dtype).copy()


def forward_cnn(model, features):
    """Single-utterance convenience for the cnn-pool variant: (W,) probs."""
    if model.spec.variant != CNN_POOL:
        raise ConfigError(f"model variant is {model.spec.variant!r}, not cnn-pool")
    return model.predict(features)


def forward_psc(model, features):
    """Single-utterance psc forward: ((W,) probs, (T', W) localization)."""
    if model.spec.variant != PSC:
        raise ConfigError(f"model variant is {model.spec.variant!r}, not psc")
    probs = model.predict(features)
    h, h_lens = model.localization()
    return probs, h[0, : h_lens[0]].copy()


# -- loss ----------------------------------------------------------------------

def bow_loss(prediction, target):
    """Summed binary cross-entropy against per-word targets in [0, 1].

    L = -sum_w [ y_w log f_w + (1 - y_w) log(1 - f_w) ], averaged over the
    batch when prediction is 2-D. Predictions are clamped to
    [LOSS_CLAMP, 1 - LOSS_CLAMP] before the logs.
    """
    pred = prediction if isinstance(prediction, Tensor) else Tensor(prediction)
    y = np.asarray(target, dtype=pred.data.dtype)
    if y.shape != pred.data.shape:
        raise DataError(f"target shape {y.shape} != prediction shape {pred.data.shape}")
    batch = pred.data.shape[0] if pred.data.ndim == 2 else 1
    p = np.clip(pred.data, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    per_entry = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    value = per_entry.sum() / batch
    out = Tensor(np.asarray(value, dtype=pred.data.dtype), _parents=(pred,), _op="bow_loss")
    if out.requires_grad:
        def backward():
            inside = (pred.data >= LOSS_CLAMP) & (pred.data <= 1.0 - LOSS_CLAMP)
            g = np.where(inside, (p - y) / (p * (1.0 - p)), 0.0) / batch
            pred.accumulate_grad(out.grad * g)
        out._backward = backward
    return out


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = None  # None -> variant default
    batch_size: int = 32
    epochs: int = 60
    seed: int = 0
    patience: int = 5

    def resolve_lr(self, variant):
        if self.learning_rate is not None:
            if not self.learning_rate > 0:
                raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
            return self.learning_rate
        return 1e-3 if variant == PSC else 1e-4

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


def _pad_batch(feature_map, ids, dtype):
    lengths = np.array([len(feature_map[i]) for i in ids], dtype=np.int64)
    width = feature_map[ids[0]].shape[1]
    batch = np.zeros((len(ids), int(lengths.max()), width), dtype=dtype)
    for row, utt_id in enumerate(ids):
        batch[row, : lengths[row]] = feature_map[utt_id]
    return batch, lengths


def _epoch_loss(model, feature_map, target_map, ids, batch_size):
    total = 0.0
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        batch, lengths = _pad_batch(feature_map, chunk, model.dtype)
        targets = np.stack([target_map[i] for i in chunk])
        loss = bow_loss(model.forward(batch, lengths), targets)
        total += loss.data.item() * len(chunk)
    return total / len(ids)


def train(feature_map, target_map, train_ids, dev_ids, spec, config=None,
          progress=None, dtype=np.float32):
    """Fit a model; returns (model-with-best-dev-params, metadata dict).

    Shuffles per epoch with the seeded generator, pads each batch to its
    longest utterance with valid-length masks, and stops early when dev
    loss has not improved for `patience` epochs. `progress`, if given, is
    called as progress(epoch, train_loss, dev_loss) after each epoch.
    """
    from .optim import Adam

    config = config or TrainConfig()
    config.validate()
    if not train_ids:
        raise DataError("no training utterances")
    if not dev_ids:
        raise DataError("no dev utterances for early stopping")
    for utt_id in list(train_ids) + list(dev_ids):
        if utt_id not in feature_map:
            raise DataError(f"utterance {utt_id!r} has no features")
        if utt_id not in target_map:
            raise DataError(f"utterance {utt_id!r} has no target")
        if target_map[utt_id].shape != (spec.vocab_size,):
            raise DataError(
                f"utterance {utt_id!r}: target dimension "
                f"{target_map[utt_id].shape} != ({spec.vocab_size},)"
            )
        if len(feature_map[utt_id]) < spec.min_frames:
            raise InvalidInputError(
                f"utterance {utt_id!r} has {len(feature_map[utt_id])} frames; "
                f"the {spec.variant} architecture needs at least {spec.min_frames}"
            )

    lr = config.resolve_lr(spec.variant)
    model = SpeechModel(spec, seed=config.seed, dtype=dtype)
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(config.seed)
    train_ids = list(train_ids)
    dev_ids = list(dev_ids)

    history = {"train_loss": [], "dev_loss": []}
    best_dev = np.inf
    best_state = model.state()
    best_epoch = 0
    stale = 0
    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        epochs_run = epoch
        order = [train_ids[k] for k in rng.permutation(len(train_ids))]
        running = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            batch, lengths = _pad_batch(feature_map, chunk, model.dtype)
            targets = np.stack([target_map[i] for i in chunk])
            try:
                loss = bow_loss(model.forward(batch, lengths), targets)
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericError as err:
                raise NumericError(
                    f"epoch {epoch}, batch {start // config.batch_size}: {err}"
                ) from err
            running += loss.data.item() * len(chunk)
        train_loss = running / len(order)
        dev_loss = _epoch_loss(model, feature_map, target_map, dev_ids, config.batch_size)
        history["train_loss"].append(train_loss)
        history["dev_loss"].append(dev_loss)
        if progress is not None:
            progress(epoch, train_loss, dev_loss)
        if dev_loss < best_dev:
            best_dev = dev_loss
            best_state = model.state()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_state(best_state)
    metadata = {
        "variant": spec.variant,
        "seed": config.seed,
        "learning_rate": lr,
        "batch_size": config.batch_size,
        "epochs_run": epochs_run,
        "best_epoch": best_epoch,
        "train_loss": history["train_loss"],
        "dev_loss": history["dev_loss"],
    }
    return model, metadata


def score_utterances(model, feature_map, ids, batch_size=32):
    """Forward a list of utterances; returns an (N, vocab_size) matrix."""
    out = np.zeros((len(ids), model.spec.vocab_size), dtype=np.float32)
    for start in range(0, len(ids), batch_size):
        chunk = list(ids[start : start + batch_size])
        batch, lengths = _pad_batch(feature_map, chunk, model.dtype)
        probs = model.forward(batch, lengths)
        out[start : start + len(chunk)] = probs.data.astype(np.float32)
    return out


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model, vocab_fingerprint, metadata):
    """Binary checkpoint: architecture, vocabulary fingerprint, metadata,
    parameter tensors in declaration order."""
    if len(vocab_fingerprint) != 8:
        raise FormatError("vocabulary fingerprint must be 8 bytes")
    spec_blob = model.spec.canonical_json().encode("utf-8")
    meta_blob = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(spec_blob)))
        fh.write(spec_blob)
        fh.write(vocab_fingerprint)
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        for _, p in model.parameters():
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n, path, what):
    blob = fh.read(n)
    if len(blob) != n:
        raise FormatError(f"{path}: truncated checkpoint while reading {what}")
    return blob


def load_checkpoint(path, vocab=None, variant=None, dtype=np.float32):
    """Read a checkpoint; returns (model, vocab_fingerprint, metadata).

    With `vocab` given, refuses a fingerprint mismatch; with `variant`
    given, refuses a different architecture family.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "header"))
        try:
            spec = ArchitectureSpec.from_dict(
                json.loads(_read_exact(fh, spec_len, path, "architecture"))
            )
        except (json.JSONDecodeError, ConfigError, TypeError, ValueError) as err:
            raise FormatError(f"{path}: bad architecture block: {err}") from None
        fingerprint = _read_exact(fh, 8, path, "fingerprint")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "header"))
        try:
            metadata = json.loads(_read_exact(fh, meta_len, path, "metadata"))
        except json.JSONDecodeError as err:
            raise FormatError(f"{path}: bad metadata block: {err}") from None

        if variant is not None and spec.variant != variant:
            raise DataError(
                f"{path}: checkpoint holds a {spec.variant!r} model, "
                f"but {variant!r} was requested"
            )
        if vocab is not None and vocab.fingerprint() != fingerprint:
            raise DataError(
                f"{path}: vocabulary fingerprint mismatch: checkpoint has "
                f"{fingerprint.hex()}, current vocabulary is "
                f"{vocab.fingerprint().hex()}"
            )

        model = SpeechModel(spec, seed=0, dtype=dtype)
        state = {}
        for name, p in model.parameters():
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, f"{name} rank"))
            if rank != p.data.ndim:
                raise FormatError(f"{path}: parameter {name}: rank {rank} unexpected")
            shape = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, path, f"{name} shape")
            )
            if shape != p.data.shape:
                raise FormatError(
                    f"{path}: parameter {name}: stored shape {shape} != "
                    f"expected {p.data.shape}"
                )
            count = int(np.prod(shape))
            blob = _read_exact(fh, 4 * count, path, f"{name} values")
            state[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        trailing = fh.read(1)
    if trailing:
        raise FormatError(f"{path}: trailing bytes after parameters")
    model.load_state(state)
    return model, fingerprint, metadata


# -- gradient checking -------------------------------------------------------------

def gradient_check(spec, seed=0, step=1e-5, frames=None, corrupt=False):
    """Central-difference check of every parameter gradient at 64-bit.

    Returns (max relative error, worst parameter name). `corrupt`
    deliberately scales one analytic gradient, a negative control proving
    the check can fail.
    """
    rng = np.random.default_rng(seed)
    model = SpeechModel(spec, seed=seed + 1, dtype=np.float64)
    T = frames if frames is not None else spec.min_frames + 6
    x = rng.normal(size=(T, spec.input_dim)) * 0.5
    y = (rng.uniform(size=spec.vocab_size) < 0.5).astype(np.float64)[None, :]

    def loss_value():
        return bow_loss(model.forward(x), y).data.item()

    loss = bow_loss(model.forward(x), y)
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in model.parameters()
    }
    if corrupt:
        first = next(iter(analytic))
        analytic[first] = analytic[first] * 1.5 + 1e-3

    worst = 0.0
    worst_name = ""
    for name, p in model.parameters():
        a = analytic[name]
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + step
            hi = loss_value()
            p.data[idx] = orig - step
            lo = loss_value()
            p.data[idx] = orig
            numeric = (hi - lo) / (2.0 * step)
            rel = abs(a[idx] - numeric) / max(abs(a[idx]), abs(numeric), 1e-3)
            if rel > worst:
                worst = rel
                worst_name = name
    return worst, worst_name
