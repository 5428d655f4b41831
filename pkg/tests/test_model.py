import itertools

import numpy as np
import pytest

from flowvi import numcore as nc
from flowvi.errors import EmptyInputError, ShapeError
from flowvi.flows import FlowStack
from flowvi.harness.gradcheck import tiny_batch, tiny_model
from flowvi.latent import LatentSample
from flowvi.model import (
    BOS,
    EOS,
    PAD,
    SPECIALS,
    UNK,
    ModelConfig,
    RefinedGate,
    SumModel,
    Tokenizer,
    beam_search,
    bow_embedding,
    decode_batch,
    forward,
    gate_fuse,
    gate_scores,
    greedy_decode,
    make_batch,
    model_scorer,
    posterior,
)


# --- tokenizer / batch --------------------------------------------------------

def test_tokenizer_reserved_ids_and_roundtrip(tmp_path):
    tok = Tokenizer.build(["The cat sat", "the dog"])
    assert tok.tokens[:4] == list(SPECIALS)
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    ids = tok.encode("THE cat zebra", add_bos=True, add_eos=True)
    assert ids[0] == BOS and ids[-1] == EOS and ids[3] == UNK
    assert tok.decode(ids) == "the cat <unk>"
    tok.save(tmp_path / "v.txt")
    assert Tokenizer.from_file(tmp_path / "v.txt").tokens == tok.tokens


def test_tokenizer_rejects_bad_vocab():
    with pytest.raises(ValueError):
        Tokenizer(["a", "b", "c", "d"])
    with pytest.raises(ValueError):
        Tokenizer([*SPECIALS, "x", "x"])


def test_batch_bow_counts_untruncated_source():
    tok = Tokenizer([*SPECIALS, "a", "b", "c"])
    b = make_batch(tok, ["a b c a b c a"], ["b c"], max_src=3)
    assert b.src.shape == (1, 3)
    assert b.bow.sum() == 7 > b.src_mask.sum()
    np.testing.assert_array_equal(b.tgt_in[0], [BOS, 5, 6])
    np.testing.assert_array_equal(b.tgt_out[0], [5, 6, EOS])


def test_empty_document_rejected():
    tok = Tokenizer([*SPECIALS, "a"])
    with pytest.raises(EmptyInputError):
        make_batch(tok, ["   "], ["a"])


def test_bow_embedding_examples():
    E = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(bow_embedding(np.array([0, 0, 1, 0]), E).data, E[2])
    np.testing.assert_allclose(bow_embedding(np.array([0, 1, 1, 0]), E).data, (E[1] + E[2]) / 2)
    np.testing.assert_allclose(bow_embedding(np.array([2, 1, 0, 0]), E).data, (2 * E[0] + E[1]) / 3)
    with pytest.raises(EmptyInputError):
        bow_embedding(np.zeros(4), E)


# --- gate -----------------------------------------------------------------------

def _gate(d=6, ell=3, seed=0, init="standard"):
    return RefinedGate(d, ell, np.random.default_rng(seed), init=init)


def test_gate_endpoints_exact():
    rng = np.random.default_rng(1)
    h, z = rng.normal(size=(5, 6)), rng.normal(size=3)
    gate = _gate()
    gate.wf.weight.data[:] = 0.0
    gate.wf.bias.data[:] = -1000.0   # f = 0
    np.testing.assert_array_equal(gate_fuse(h, z, gate).data, h)
    gate.wf.bias.data[:] = 1000.0    # f = 1
    zp = z @ gate.wz.weight.data
    np.testing.assert_array_equal(gate_fuse(h, z, gate).data, np.broadcast_to(zp, h.shape))


def test_gate_hand_values():
    gate = _gate()
    h, z = np.zeros((1, 6)), np.zeros(3)
    gate.wf.weight.data[:] = 0.0
    gate.wr.weight.data[:] = 0.0
    gate.wf.bias.data[:] = 0.0       # f = 0.5
    gate.wr.bias.data[:] = -1000.0   # r = 0
    np.testing.assert_allclose(gate_scores(h, z, gate).data, 0.25)
    gate.wr.bias.data[:] = 1000.0    # r = 1
    np.testing.assert_allclose(gate_scores(h, z, gate).data, 0.75)


def test_gate_monotone_in_f():
    f = np.linspace(0, 1, 1000)[:, None]
    r = np.linspace(0, 1, 11)[None, :]
    g = (1 - r) * f**2 + r * (1 - (1 - f) ** 2)
    assert np.all(np.diff(g, axis=0) >= 0)


@pytest.mark.parametrize("init,target,tol", [("standard", 0.5, 0.05), ("near_zero", 0.05, 0.02)])
def test_gate_initialisation_means(init, target, tol):
    rng = np.random.default_rng(2)
    gate = _gate(d=64, ell=16, init=init)
    h = rng.normal(size=(8, 17, 64))
    z = rng.normal(size=(8, 16))
    assert abs(gate_scores(h, z, gate).data.mean() - target) <= tol


def test_gate_shape_errors():
    gate = _gate()
    with pytest.raises(ShapeError):
        gate_fuse(np.zeros((2, 5)), np.zeros(3), gate)
    with pytest.raises(ShapeError):
        gate_fuse(np.zeros((2, 4, 6)), np.zeros((3, 3)), gate)


# --- forward ------------------------------------------------------------------------

def test_decoder_causality():
    model, tok = tiny_model("realnvp")
    model.eval()
    batch = tiny_batch(tok)
    s = posterior(model, batch, deterministic=True)
    base = forward(model, batch, s).data
    n = batch.tgt_in.shape[1]
    for j in range(n):
        b2 = batch.subset(slice(None))
        b2.tgt_in = batch.tgt_in.copy()
        b2.tgt_in[:, j] = 4 + (b2.tgt_in[:, j] + 1) % 8
        out = forward(model, b2, s).data
        np.testing.assert_array_equal(out[:, :j], base[:, :j])


def test_decoder_causality_gradient():
    model, tok = tiny_model("maf")
    model.eval()
    batch = tiny_batch(tok)
    s = posterior(model, batch, deterministic=True)
    captured = {}
    orig = model._embed

    def spy(ids):
        x = orig(ids)
        if ids.shape[1] == batch.tgt_in.shape[1] and np.array_equal(ids, batch.tgt_in):
            leaf = nc.Tensor(x.data, requires_grad=True)
            captured["x"] = leaf
            return leaf
        return x

    model._embed = spy
    logits = forward(model, batch, s)
    nc.backward(logits[:, 1, :].sum())
    g = captured["x"].grad
    assert np.all(g[:, 2:] == 0.0)
    assert np.any(g[:, :2] != 0.0)


def test_closed_gate_equals_plain_encoder_decoder():
    cfg = ModelConfig(vocab_size=12, d_model=8, n_heads=2, n_enc=1, n_dec=1, d_ff=16, dropout=0.0,
                      latent_dim=4, n_flows=0, infer_hidden=8)
    model = SumModel(cfg, np.random.default_rng(0))
    model.eval()
    model.gate.wf.weight.data[:] = 0.0
    model.gate.wf.bias.data[:] = -1000.0
    tok = Tokenizer([*SPECIALS, *[f"t{i}" for i in range(8)]])
    batch = tiny_batch(tok)
    s = posterior(model, batch, deterministic=True)
    np.testing.assert_array_equal(forward(model, batch, s).data, forward(model, batch, None).data)


def test_eval_forward_deterministic():
    model, tok = tiny_model("rqnsf", seed=3)
    model.eval()
    batch = tiny_batch(tok)
    a = forward(model, batch, posterior(model, batch, deterministic=True)).data
    b = forward(model, batch, posterior(model, batch, deterministic=True)).data
    np.testing.assert_array_equal(a, b)


def test_partition_prefixes_cover_latent_modules():
    model, _ = tiny_model("iaf")
    names = [n for n, _ in model.named_parameters()]
    assert any(n.startswith("infer.") for n in names)
    assert any(n.startswith("flows.") for n in names)
    assert any(n.startswith("gate.") for n in names)


# --- beam search -----------------------------------------------------------------

def _toy_logprobs(V=6, steps=3, seed=0):
    """A fixed random next-token table indexed by the full prefix."""
    rng = np.random.default_rng(seed)
    table = {}

    def fn(prefixes):
        out = []
        for row in prefixes:
            key = tuple(int(t) for t in row)
            if key not in table:
                logits = rng.normal(scale=2.0, size=V)
                table[key] = logits - np.logaddexp.reduce(logits)
            out.append(table[key])
        return np.array(out)

    return fn


def _enumerate_best(fn, V, max_len, lp, banned):
    allowed = [t for t in range(V) if t not in banned]
    best = None
    for L in range(1, max_len + 1):
        for seq in itertools.product(allowed, repeat=L):
            if EOS in seq[:-1]:
                continue
            if L < max_len and seq[-1] != EOS:
                continue
            total = 0.0
            for k in range(L):
                total += fn(np.array([[BOS, *seq[:k]]]))[0, seq[k]]
            score = total / L**lp
            if best is None or score > best[0]:
                best = (score, list(seq))
    return best


@pytest.mark.parametrize("seed", range(5))
def test_beam_equal_vocab_is_exhaustive(seed):
    V, banned = 6, (PAD, BOS, UNK)
    fn = _toy_logprobs(V, seed=seed)
    hyp = beam_search(fn, beam_size=V, length_penalty=2.0, max_len=3, banned=banned)
    score, seq = _enumerate_best(fn, V, 3, 2.0, banned)
    assert hyp.tokens == seq
    assert hyp.score == pytest.approx(score, abs=1e-12)


def test_beam_one_is_greedy():
    fn = _toy_logprobs(8, seed=4)
    hyp = beam_search(fn, beam_size=1, max_len=6)
    prefix = [BOS]
    toks = []
    for _ in range(6):
        lp = fn(np.array([prefix]))[0]
        lp[[PAD, BOS]] = -np.inf
        t = int(np.argmax(lp))
        toks.append(t)
        prefix.append(t)
        if t == EOS:
            break
    assert hyp.tokens == toks
    assert greedy_decode(fn, max_len=6).tokens == toks


def test_beam_truncation_flag():
    def never_eos(prefixes):
        lp = np.full((len(prefixes), 6), -10.0)
        lp[:, 4] = -0.01
        return lp

    hyp = beam_search(never_eos, beam_size=2, max_len=4)
    assert hyp.truncated and len(hyp.tokens) == 4


def test_model_decoding_defaults_and_beam1_greedy():
    model, tok = tiny_model("rqnsf", seed=5)
    batch = make_batch(tok, ["t0 t1 t2", "t3 t4"], None)
    hyps = decode_batch(model, batch)   # beam 4, length penalty 2.0
    assert len(hyps) == 2
    scorer = model_scorer(model.eval(), batch, 0)
    assert beam_search(scorer, beam_size=1, max_len=5).tokens == greedy_decode(scorer, max_len=5).tokens


def test_latent_dim_mismatch_in_forward():
    model, tok = tiny_model("realnvp")
    batch = tiny_batch(tok)
    bad = LatentSample(z0=nc.Tensor(np.zeros((2, 3))), zK=nc.Tensor(np.zeros((2, 3))), logdets=[],
                       mu0=nc.Tensor(np.zeros((2, 3))), log_sigma0=nc.Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        forward(model, batch, bad)


def test_vedsum_has_empty_stack():
    cfg = ModelConfig(vocab_size=12, d_model=8, n_heads=2, n_flows=0, latent_dim=4, infer_hidden=8)
    model = SumModel(cfg, np.random.default_rng(0))
    assert isinstance(model.flows, FlowStack) and len(model.flows) == 0
