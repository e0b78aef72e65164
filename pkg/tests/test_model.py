import numpy as np
import pytest

from ensmt.errors import CheckpointError, ConfigError, DataError, ShapeError
from ensmt.model import (EncoderOutput, ModelConfig, Seq2Seq, load_checkpoint, save_checkpoint,
                         with_image_input)
from ensmt.tensor import Graph, constant
from oracles import lstm_step


def small(**kw):
    base = dict(vocab_size=12, embed_dim=6, hidden_dim=8, encoder_layers=2, dropout_rate=0.0, seed=3,
                init_scale=0.5)
    base.update(kw)
    return Seq2Seq(ModelConfig(**base), vocab_hash="h")


def np_params(model):
    return {k: v.data for k, v in model.params.items()}


def oracle_encode(P, layers, src):
    """Straight-line bi-LSTM over one unpadded sentence."""
    H = P["init.b"].shape[0]
    xs = [P["embedding"][t] for t in src]
    for layer in range(layers):
        outs = {}
        for d, order in (("fwd", range(len(xs))), ("bwd", reversed(range(len(xs))))):
            h, c = np.zeros(H), np.zeros(H)
            seq = []
            for t in order:
                h, c = lstm_step(P[f"enc.{layer}.{d}.W"], P[f"enc.{layer}.{d}.b"], xs[t], h, c)
                seq.append((t, h))
            outs[d] = dict(seq)
            outs[d + "_final"] = h
        xs = [np.concatenate([outs["fwd"][t], outs["bwd"][t]]) for t in range(len(xs))]
    return np.stack(xs), outs["fwd_final"], outs["bwd_final"]


def oracle_init(P, h_fwd, h_bwd, img=None):
    pre = P["init.W_e"] @ np.concatenate([h_fwd, h_bwd]) + P["init.b"]
    if img is not None:
        pre = pre + P["init.W_img"] @ img
    return np.tanh(pre)


def oracle_step(P, ann, h, c, ctx, prev):
    x = np.concatenate([P["embedding"][prev], ctx])
    h, c = lstm_step(P["dec.W"], P["dec.b"], x, h, c)
    e = np.tanh(ann @ P["attn.W_k"] + h @ P["attn.W_q"]) @ P["attn.v"]
    a = np.exp(e - e.max())
    a /= a.sum()
    ctx = a @ ann
    att = np.tanh(np.concatenate([h, ctx]) @ P["out.W_c"] + P["out.b_c"])
    return P["out.W"] @ att + P["out.b"], h, c, ctx, a


def test_single_token_source_shape():
    model = small()
    enc = model.encode(Graph(record=False), [[5]])
    assert enc.annotations.shape == (1, 1, 16)


def test_empty_source_rejected():
    with pytest.raises(DataError):
        small().encode(Graph(), [[]])


def test_zero_weights_give_zero_annotations():
    model = small()
    for p in model.params.values():
        if p.name != "embedding":
            p.data[...] = 0.0
    enc = model.encode(Graph(record=False), [[4, 5, 6]])
    ann, _, _ = oracle_encode(np_params(model), 2, [4, 5, 6])
    assert np.array_equal(enc.annotations.data[0], np.zeros((3, 16)))
    assert np.max(np.abs(ann)) == 0.0


def test_encoder_matches_straight_line_oracle():
    model = small()
    src = [4, 9, 7, 5, 11]
    enc = model.encode(Graph(record=False), [src])
    ann, hf, hb = oracle_encode(np_params(model), 2, src)
    assert np.max(np.abs(enc.annotations.data[0] - ann)) <= 1e-12
    assert np.max(np.abs(enc.final_fwd.data[0] - hf)) <= 1e-12
    assert np.max(np.abs(enc.final_bwd.data[0] - hb)) <= 1e-12


def test_padding_does_not_leak_into_short_rows():
    model = small()
    g = Graph(record=False)
    alone = model.encode(g, [[4, 5]])
    batched = model.encode(g, [[4, 5], [6, 7, 8, 9]])
    assert np.max(np.abs(batched.annotations.data[0, :2] - alone.annotations.data[0])) <= 1e-12
    assert np.max(np.abs(batched.final_bwd.data[0] - alone.final_bwd.data[0])) <= 1e-12
    s_alone = model.init_decoder(g, alone)
    s_batch = model.init_decoder(g, batched)
    la, _, _ = model.decode_step(g, s_alone, [2], alone)
    lb, _, _ = model.decode_step(g, s_batch, [2, 2], batched)
    assert np.max(np.abs(la.data[0] - lb.data[0])) <= 1e-12


def test_decoder_matches_straight_line_oracle():
    model = small(image_feature_dim=5)
    P = np_params(model)
    src, tgt = [4, 9, 7], [2, 5, 6, 10]
    img = np.random.default_rng(0).normal(size=5)
    g = Graph(record=False)
    enc = model.encode(g, [src])
    state = model.init_decoder(g, enc, img[None, :])
    ann, hf, hb = oracle_encode(P, 2, src)
    h = oracle_init(P, hf, hb, img)
    c, ctx = np.zeros(8), np.zeros(16)
    assert np.max(np.abs(state.h.data[0] - h)) <= 1e-12
    for tok in tgt:
        logits, state, alpha = model.decode_step(g, state, [tok], enc)
        ref_logits, h, c, ctx, a = oracle_step(P, ann, h, c, ctx, tok)
        assert np.max(np.abs(logits.data[0] - ref_logits)) <= 1e-12
        assert np.max(np.abs(alpha.data[0] - a)) <= 1e-12


def test_image_term_isolation():
    model = small(image_feature_dim=4)
    model.params["init.b"].data[...] = 0.0
    g = Graph(record=False)
    enc = model.encode(g, [[4, 5]])
    zero_enc = EncoderOutput(enc.annotations, enc.keys, enc.mask, constant(np.zeros((1, 8))),
                             constant(np.zeros((1, 8))))
    img = np.random.default_rng(1).normal(size=(1, 4))
    state = model.init_decoder(g, zero_enc, img)
    assert np.max(np.abs(state.h.data - np.tanh(img @ model.params["init.W_img"].data.T))) <= 1e-12


def test_image_dimension_checks():
    mm = small(image_feature_dim=4)
    g = Graph(record=False)
    enc = mm.encode(g, [[4]])
    with pytest.raises(ShapeError):
        mm.init_decoder(g, enc, np.ones((1, 3)))
    with pytest.raises(ShapeError):
        mm.init_decoder(g, enc)
    text = small()
    with pytest.raises(ShapeError):
        text.init_decoder(g, text.encode(g, [[4]]), np.ones((1, 4)))


def test_zero_image_projection_reduces_to_text_model():
    text = small()
    mm = with_image_input(text, 7)
    g = Graph(record=False)
    img = np.random.default_rng(2).normal(size=(1, 7))
    e1, e2 = text.encode(g, [[4, 5, 6]]), mm.encode(g, [[4, 5, 6]])
    s1, s2 = text.init_decoder(g, e1), mm.init_decoder(g, e2, img)
    for tok in (2, 7, 8):
        l1, s1, _ = text.decode_step(g, s1, [tok], e1)
        l2, s2, _ = mm.decode_step(g, s2, [tok], e2)
        assert np.max(np.abs(l1.data - l2.data)) <= 1e-12


def test_singleton_source_attention_is_one():
    model = small()
    g = Graph(record=False)
    enc = model.encode(g, [[6]])
    _, _, alpha = model.decode_step(g, model.init_decoder(g, enc), [2], enc)
    assert alpha.data.tolist() == [[1.0]]


def test_identical_annotations_give_uniform_attention():
    model = small()
    g = Graph(record=False)
    row = np.random.default_rng(3).normal(size=16)
    ann = constant(np.tile(row, (1, 5, 1)))
    keys = constant(np.tile(row @ model.params["attn.W_k"].data, (1, 5, 1)))
    enc = EncoderOutput(ann, keys, np.ones((1, 5), dtype=bool), constant(np.zeros((1, 8))),
                        constant(np.zeros((1, 8))))
    _, _, alpha = model.decode_step(g, model.init_decoder(g, enc), [2], enc)
    assert np.max(np.abs(alpha.data - 0.2)) <= 1e-15


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = small(image_feature_dim=3)
    model.regime = "SS"
    model.meta = {"epoch": 4}
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", expected_vocab_hash="h")
    assert back.config == model.config and back.regime == "SS" and back.meta == {"epoch": 4}
    for name, p in model.params.items():
        assert back.params[name].data.tobytes() == p.data.tobytes()


def test_truncated_or_corrupt_checkpoint_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small(), path)
    raw = path.read_bytes()
    for cut in (4, 20, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    path.write_bytes(raw + b"x")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_and_hash_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small(), path)
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path, expected_vocab_hash="other")
    raw = bytearray(path.read_bytes())
    raw[8] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(path)


def test_config_and_regime_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=5, dropout_rate=1.0)
    with pytest.raises(ConfigError):
        Seq2Seq(ModelConfig(vocab_size=5, embed_dim=2, hidden_dim=2), regime="XE")


def test_init_is_seeded():
    a, b, c = small(seed=1), small(seed=1), small(seed=2)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["embedding"].data, c.params["embedding"].data)
