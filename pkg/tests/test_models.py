"""Architectures, loss, training loop, checkpoints, gradient harness."""

import numpy as np
import pytest

from gkw import models, ops
from gkw.errors import ConfigError, DataError, FormatError, InvalidInputError, NumericError
from gkw.models import (
    SpeechModel,
    TrainConfig,
    bow_loss,
    cnn_pool,
    forward_cnn,
    forward_psc,
    gradient_check,
    load_checkpoint,
    psc,
    save_checkpoint,
    score_utterances,
    toy_spec,
    train,
)
from gkw.targets import Vocabulary
from gkw.tensor import Tensor


def toy_corpus(rng, spec, n=20, vocab_size=5):
    """Prototype-concatenation utterances that a toy model can learn."""
    protos = rng.normal(size=(vocab_size, 16, spec.input_dim))
    feats, targs, ids = {}, {}, []
    for k in range(n):
        words = rng.choice(vocab_size, size=int(rng.integers(4, 6)), replace=True)
        mat = np.concatenate([protos[w] for w in words])
        mat = mat + rng.normal(size=mat.shape) * 0.1
        uid = f"u{k:03d}"
        feats[uid] = mat.astype(np.float32)
        vec = np.zeros(vocab_size, dtype=np.float32)
        vec[np.unique(words)] = 1.0
        targs[uid] = vec
        ids.append(uid)
    return feats, targs, ids


# -- shape contracts ----------------------------------------------------------

def test_cnn_time_extents_and_minimum():
    spec = cnn_pool(1000)
    assert spec.time_extents(800) == [792, 264, 255, 85, 75]
    assert spec.min_frames == 126


def test_psc_time_extents_and_minimum():
    spec = psc(1000)
    assert spec.time_extents(800) == [792, 783, 774, 765, 756, 747]
    assert spec.min_frames == 54


def test_forward_records_extents():
    spec = toy_spec("cnn-pool")
    model = SpeechModel(spec, seed=0)
    model.forward(np.zeros((200, spec.input_dim), dtype=np.float32))
    assert model.last_time_extents == spec.time_extents(200)


def test_output_shape_and_range():
    rng = np.random.default_rng(1)
    for variant in ("cnn-pool", "psc"):
        spec = toy_spec(variant, vocab_size=4)
        model = SpeechModel(spec, seed=2)
        x = rng.normal(size=(spec.min_frames + 10, spec.input_dim)).astype(np.float32)
        probs = model.predict(x)
        assert probs.shape == (4,)
        assert np.all(probs > 0.0) and np.all(probs < 1.0)


def test_too_short_input_names_minimum():
    spec = toy_spec("cnn-pool")
    model = SpeechModel(spec, seed=0)
    with pytest.raises(InvalidInputError, match=str(spec.min_frames)):
        model.predict(np.zeros((spec.min_frames - 1, spec.input_dim), dtype=np.float32))


def test_wrong_feature_dim():
    spec = toy_spec("psc")
    model = SpeechModel(spec, seed=0)
    with pytest.raises(DataError):
        model.predict(np.zeros((60, spec.input_dim + 1), dtype=np.float32))


def test_zero_output_layer_gives_half():
    spec = toy_spec("cnn-pool", vocab_size=4)
    model = SpeechModel(spec, seed=3)
    model.params["dense2.weights"].data[:] = 0.0
    model.params["dense2.bias"].data[:] = 0.0
    probs = model.predict(np.random.default_rng(0).normal(size=(130, 8)).astype(np.float32))
    assert np.all(probs == 0.5)


def test_forward_is_pure():
    spec = toy_spec("psc")
    model = SpeechModel(spec, seed=4)
    x = np.random.default_rng(5).normal(size=(60, 8)).astype(np.float32)
    assert np.array_equal(model.predict(x), model.predict(x))


def test_masking_invariance():
    # appending padding frames must not change the output at all
    rng = np.random.default_rng(6)
    for variant in ("cnn-pool", "psc"):
        spec = toy_spec(variant)
        model = SpeechModel(spec, seed=7)
        T = spec.min_frames + 9
        x = rng.normal(size=(T, spec.input_dim)).astype(np.float32)
        plain = model.forward(x).data[0]
        padded = np.concatenate([x, rng.normal(size=(25, spec.input_dim)).astype(np.float32)])
        batch = np.stack([padded, padded])
        masked = model.forward(batch, lengths=np.array([T, T + 25])).data[0]
        assert np.abs(masked - plain).max() <= 1e-6


def test_psc_localization_consistency():
    spec = toy_spec("psc", vocab_size=4)
    model = SpeechModel(spec, seed=8)
    x = np.random.default_rng(9).normal(size=(70, 8)).astype(np.float32)
    probs, h = forward_psc(model, x)
    assert h.shape == (70 - 8 - 5 * 9, 4)
    recomputed = ops.sigmoid(ops.logsumexp_pool(Tensor(h), spec.r)).data
    assert np.array_equal(probs, recomputed)


def test_psc_constant_input_gives_sigmoid_of_h():
    spec = toy_spec("psc", vocab_size=3)
    model = SpeechModel(spec, seed=10)
    x = np.full((60, 8), 0.3, dtype=np.float32)
    probs, h = forward_psc(model, x)
    assert np.abs(h - h[0]).max() < 1e-5
    expit = 1.0 / (1.0 + np.exp(-h[0].astype(np.float64)))
    assert np.abs(probs - expit).max() < 1e-6


def test_variant_dispatch_guards():
    cnn_model = SpeechModel(toy_spec("cnn-pool"), seed=0)
    psc_model = SpeechModel(toy_spec("psc"), seed=0)
    x = np.zeros((130, 8), dtype=np.float32)
    with pytest.raises(ConfigError):
        forward_psc(cnn_model, x)
    with pytest.raises(ConfigError):
        forward_cnn(psc_model, x)


def test_spec_validation():
    with pytest.raises(ConfigError):
        models.ArchitectureSpec("mlp", 3, 8, (("dense", 3, "sigmoid"),))
    with pytest.raises(ConfigError):
        psc(5, conv_filters=(4, 4, 4, 4, 4), r=0.0)


# -- loss -----------------------------------------------------------------------

def test_loss_symmetric_point():
    loss = bow_loss(Tensor(np.array([0.5])), np.array([0.5]))
    assert abs(loss.data.item() - np.log(2.0)) < 1e-7
    assert abs(loss.data.item() - 0.693147) < 1e-6


def test_loss_pinned_example():
    loss = bow_loss(Tensor(np.array([0.9, 0.1])), np.array([1.0, 0.0]))
    assert abs(loss.data.item() - (-2.0 * np.log(0.9))) < 1e-7
    assert abs(loss.data.item() - 0.210721) < 1e-6


def test_loss_gradient_zero_at_target():
    rng = np.random.default_rng(11)
    for _ in range(20):
        y = rng.uniform(0.05, 0.95, size=6)
        pred = Tensor(y.copy(), requires_grad=True)
        bow_loss(pred, y).backward()
        assert np.abs(pred.grad).max() <= 1e-6


def test_loss_entropy_floor():
    rng = np.random.default_rng(12)
    for _ in range(50):
        y = rng.uniform(0.01, 0.99, size=8)
        loss = bow_loss(Tensor(y.copy()), y).data.item()
        floor = -(y * np.log(y) + (1 - y) * np.log1p(-y)).sum()
        assert abs(loss - floor) < 1e-6
        f = rng.uniform(0.01, 0.99, size=8)
        assert bow_loss(Tensor(f), y).data.item() >= floor - 1e-9


def test_loss_nonnegative_for_binary_targets():
    rng = np.random.default_rng(13)
    for _ in range(50):
        y = (rng.uniform(size=5) < 0.5).astype(np.float64)
        f = rng.uniform(1e-6, 1 - 1e-6, size=5)
        assert bow_loss(Tensor(f), y).data.item() >= 0.0


def test_loss_batch_is_mean_over_rows():
    rng = np.random.default_rng(14)
    preds = rng.uniform(0.1, 0.9, size=(3, 4))
    ys = (rng.uniform(size=(3, 4)) < 0.5).astype(np.float64)
    batch = bow_loss(Tensor(preds.copy()), ys).data.item()
    singles = [bow_loss(Tensor(preds[i]), ys[i]).data.item() for i in range(3)]
    assert abs(batch - np.mean(singles)) < 1e-9


def test_loss_dimension_mismatch():
    with pytest.raises(DataError):
        bow_loss(Tensor(np.array([0.5, 0.5])), np.array([1.0]))


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(15)
    y = rng.uniform(size=5)
    f = rng.uniform(0.05, 0.95, size=5)
    pred = Tensor(f.copy(), requires_grad=True)
    bow_loss(pred, y).backward()
    step = 1e-7
    for i in range(5):
        fp = f.copy(); fp[i] += step
        fm = f.copy(); fm[i] -= step
        num = (bow_loss(Tensor(fp), y).data - bow_loss(Tensor(fm), y).data) / (2 * step)
        assert abs(pred.grad[i] - num) < 1e-5


# -- training ---------------------------------------------------------------------

def test_train_loss_decreases():
    rng = np.random.default_rng(16)
    spec = toy_spec("psc", vocab_size=5)
    feats, targs, ids = toy_corpus(rng, spec, n=30)
    _, meta = train(
        feats, targs, ids[:24], ids[24:], spec,
        TrainConfig(epochs=20, batch_size=8, seed=0, patience=20),
    )
    assert meta["train_loss"][-1] < meta["train_loss"][0]


def test_overfit_single_utterance():
    rng = np.random.default_rng(17)
    spec = toy_spec("psc", vocab_size=5)
    feats, targs, ids = toy_corpus(rng, spec, n=1)
    uid = ids[0]
    model, _ = train(
        feats, targs, [uid], [uid], spec,
        TrainConfig(epochs=200, batch_size=1, seed=1, patience=200, learning_rate=0.01),
    )
    assert np.abs(model.predict(feats[uid]) - targs[uid]).max() < 0.05


def test_train_determinism(tmp_path):
    rng = np.random.default_rng(18)
    spec = toy_spec("psc", vocab_size=5)
    feats, targs, ids = toy_corpus(rng, spec, n=16)
    fp = Vocabulary([f"w{i}" for i in range(5)]).fingerprint()

    def run(path):
        model, meta = train(
            feats, targs, ids[:12], ids[12:], spec,
            TrainConfig(epochs=5, batch_size=4, seed=42, patience=5),
        )
        save_checkpoint(path, model, fp, meta)
        return path.read_bytes()

    assert run(tmp_path / "a.ckpt") == run(tmp_path / "b.ckpt")


def test_train_early_stopping_restores_best():
    rng = np.random.default_rng(19)
    spec = toy_spec("psc", vocab_size=5)
    feats, targs, ids = toy_corpus(rng, spec, n=16)
    model, meta = train(
        feats, targs, ids[:12], ids[12:], spec,
        TrainConfig(epochs=40, batch_size=4, seed=2, patience=3),
    )
    dev = meta["dev_loss"]
    assert meta["best_epoch"] == int(np.argmin(dev)) + 1
    if meta["epochs_run"] < 40:
        # stopped early: the tail after the best epoch is all non-improving
        assert meta["epochs_run"] - meta["best_epoch"] >= 3


def test_train_validates_inputs():
    spec = toy_spec("psc", vocab_size=3)
    feats = {"u0": np.zeros((60, 8), dtype=np.float32)}
    targs = {"u0": np.zeros(3, dtype=np.float32)}
    with pytest.raises(DataError, match="u1"):
        train(feats, targs, ["u0", "u1"], ["u0"], spec)
    with pytest.raises(DataError, match="dimension"):
        train(feats, {"u0": np.zeros(4, dtype=np.float32)}, ["u0"], ["u0"], spec)
    short = {"u0": np.zeros((20, 8), dtype=np.float32)}
    with pytest.raises(InvalidInputError, match="u0"):
        train(short, targs, ["u0"], ["u0"], spec)
    with pytest.raises(DataError):
        train(feats, targs, [], ["u0"], spec)


def test_train_divergence_reports_epoch_and_batch():
    rng = np.random.default_rng(20)
    spec = toy_spec("psc", vocab_size=3)
    feats, targs, ids = toy_corpus(rng, spec, n=8, vocab_size=3)
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError, match="epoch"):
            train(
                feats, targs, ids[:6], ids[6:], spec,
                TrainConfig(epochs=3, batch_size=2, seed=0, patience=5,
                            learning_rate=1e12),
            )


def test_score_utterances_matches_predict():
    rng = np.random.default_rng(21)
    spec = toy_spec("psc", vocab_size=4)
    model = SpeechModel(spec, seed=5)
    feats = {
        f"u{k}": rng.normal(size=(int(rng.integers(56, 90)), 8)).astype(np.float32)
        for k in range(7)
    }
    ids = sorted(feats)
    mat = score_utterances(model, feats, ids, batch_size=3)
    for row, uid in enumerate(ids):
        assert np.abs(mat[row] - model.predict(feats[uid])).max() <= 1e-6


# -- checkpoints --------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(22)
    spec = toy_spec("cnn-pool", vocab_size=4)
    model = SpeechModel(spec, seed=6)
    vocab = Vocabulary(["a1", "b2", "c3", "d4"])
    meta = {"seed": 6, "note_free": True}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, vocab.fingerprint(), meta)
    loaded, fp, got_meta = load_checkpoint(path, vocab=vocab, variant="cnn-pool")
    assert fp == vocab.fingerprint()
    assert got_meta == meta
    probe = rng.normal(size=(140, 8)).astype(np.float32)
    assert np.abs(loaded.predict(probe) - model.predict(probe)).max() <= 1e-6


def test_checkpoint_fingerprint_mismatch_names_both(tmp_path):
    spec = toy_spec("psc", vocab_size=3)
    model = SpeechModel(spec, seed=7)
    vocab_a = Vocabulary(["x", "y", "z"])
    vocab_b = Vocabulary(["x", "y", "q"])
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, vocab_a.fingerprint(), {})
    with pytest.raises(DataError) as err:
        load_checkpoint(path, vocab=vocab_b)
    assert vocab_a.fingerprint().hex() in str(err.value)
    assert vocab_b.fingerprint().hex() in str(err.value)


def test_checkpoint_variant_mismatch(tmp_path):
    model = SpeechModel(toy_spec("psc"), seed=8)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, b"\x00" * 8, {})
    with pytest.raises(DataError, match="psc"):
        load_checkpoint(path, variant="cnn-pool")


def test_checkpoint_corruption_detected(tmp_path):
    model = SpeechModel(toy_spec("psc"), seed=9)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, b"\x01" * 8, {})
    blob = path.read_bytes()
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(blob[:-40])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(blob + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


# -- gradient harness ----------------------------------------------------------------

def test_gradient_check_passes_both_variants():
    for variant in ("cnn-pool", "psc"):
        err, worst = gradient_check(toy_spec(variant), seed=0)
        assert err <= 1e-6, f"{variant}: {err} at {worst}"


def test_gradient_check_negative_control():
    err, worst = gradient_check(toy_spec("psc"), seed=0, corrupt=True)
    assert err > 1e-6
    assert worst
