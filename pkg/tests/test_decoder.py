import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from codectse import config
from codectse.codec import embed_sum, rvq_encode
from codectse.decoder import (
    ARDecoder,
    DecodeConfig,
    DecoderError,
    build_sequence,
    ce_loss,
    choose,
    coarse_to_embedding,
    generate,
    generate_naive,
    with_eos,
)

K, D = 8, 6


def codebooks(seed=0, L=3):
    g = torch.Generator().manual_seed(seed)
    cb = torch.randn(L, K, D, generator=g)
    cb[:, 0] = 0
    return cb


def make(seed=0, n_ar=2, chunk=None, output_mode="target", dim=16, max_len=512):
    torch.manual_seed(seed)
    cfg = config.DecoderConfig(layers=2, heads=2, dim=dim, n_ar=n_ar, max_len=max_len, output_mode=output_mode)
    return ARDecoder(cfg, D, K, chunk).eval()


def inputs(seed, n_r=5, n_m=9, dim=16):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n_r, dim, generator=g), torch.randn(n_m, dim, generator=g)


# ----------------------------------------------------------------- layout


def test_layout_example():
    dec = make()
    E_r, E_m = torch.zeros(10, 16), torch.zeros(20, 16)
    seq, lay = build_sequence(E_r, E_m, torch.zeros(20, 16), dec.specials)
    assert seq.shape[0] == 53 and lay.pos_tse == 32 and lay.total == 53
    seq, lay = build_sequence(E_r, E_m, None, dec.specials)
    assert lay.total == 33 and lay.out_range == (33, 33)


@settings(max_examples=30, deadline=None)
@given(r=st.integers(0, 20), m=st.integers(0, 20), o=st.integers(0, 20), sep=st.booleans())
def test_layout_partition(r, m, o, sep):
    dec = make()
    _, lay = build_sequence(torch.zeros(r, 16), torch.zeros(m, 16), torch.zeros(o, 16), dec.specials, sep)
    cover = [lay.pos_bos, *range(*lay.ref_range), *range(*lay.mix_range), lay.pos_tse, *range(*lay.out_range)]
    if sep:
        cover.append(lay.pos_sep)
    assert sorted(cover) == list(range(lay.total))
    assert lay.total == 2 + int(sep) + r + m + o


def test_dim_mismatch():
    dec = make()
    with pytest.raises(DecoderError):
        build_sequence(torch.zeros(3, 15), torch.zeros(3, 16), None, dec.specials)


def test_max_len_enforced():
    dec = make(max_len=20)
    E_r, E_m = inputs(0, 8, 12)
    with pytest.raises(DecoderError):
        dec(E_r, E_m, torch.zeros(0, 2, dtype=torch.long), codebooks())


# -------------------------------------------------------------- causality


@pytest.mark.parametrize("chunk", [None, 4])
def test_causal_perturbation(chunk):
    g = torch.Generator().manual_seed(1)
    for trial in range(10):
        dec = make(seed=trial, chunk=chunk)
        E_r, E_m = inputs(trial)
        coarse = torch.randn(7, 16, generator=g)
        seq, lay = build_sequence(E_r, E_m, coarse, dec.specials)
        with torch.no_grad():
            base = dec.logits(dec.hidden(seq, lay))
            p = int(torch.randint(lay.total - 1, (1,), generator=g))
            pert = seq.clone()
            pert[p + 1 :] += torch.randn(lay.total - p - 1, 16, generator=g)
            out = dec.logits(dec.hidden(pert, lay))
        assert torch.equal(base[: p + 1], out[: p + 1])


def test_chunk_mask_limits_mixture_view():
    dec = make(chunk=4)
    E_r, E_m = inputs(0, 3, 12)
    coarse = torch.randn(6, 16)
    seq, lay = build_sequence(E_r, E_m, coarse, dec.specials)
    with torch.no_grad():
        base = dec.forward_teacher_forced(seq, lay)
        pert = seq.clone()
        pert[lay.mix_range[0] + 8 :lay.mix_range[1]] += 5.0
        out = dec.forward_teacher_forced(pert, lay)
    # rows predict frames 0..6; frames 0..7 may only see mixture frames < 8
    assert torch.equal(base[:7], out[:7])


# ---------------------------------------------------------------- losses


def test_zero_heads_give_uniform_ce():
    dec = make()
    for h in dec.heads:
        torch.nn.init.zeros_(h.weight)
        torch.nn.init.zeros_(h.bias)
    E_r, E_m = inputs(0)
    target = with_eos(torch.randint(K, (6, 3)), 2, dec.eos_id)
    coarse = embed_sum(target[:-1], codebooks(), 2)
    seq, lay = build_sequence(E_r, E_m, dec.embed_coarse(coarse), dec.specials)
    logits = dec.forward_teacher_forced(seq, lay)
    assert logits.shape == (7, 2, K + 1)
    assert float(ce_loss(logits, target).detach()) == pytest.approx(math.log(K + 1), rel=1e-6)


def test_ce_limits_and_errors():
    target = torch.tensor([[1, 2], [8, 8]])
    logits = torch.full((2, 2, 9), -1e4)
    logits.scatter_(2, target[..., None], 1e4)
    assert float(ce_loss(logits, target)) == pytest.approx(0.0, abs=1e-6)
    assert float(ce_loss(torch.zeros(2, 2, 65), torch.zeros(2, 2, dtype=torch.long))) == pytest.approx(math.log(65))
    with pytest.raises(DecoderError):
        ce_loss(torch.zeros(2, 2, 9), torch.tensor([[0, 9], [0, 0]]))


def test_ce_decreases_on_fixed_example():
    dec = make()
    dec.train()
    E_r, E_m = inputs(3)
    cb = codebooks()
    target = with_eos(torch.randint(K, (6, 3), generator=torch.Generator().manual_seed(0)), 2, dec.eos_id)
    opt = torch.optim.Adam(dec.parameters(), lr=3e-3)
    losses = []
    for _ in range(50):
        logits = dec(E_r, E_m, target[:-1], cb)
        loss = ce_loss(logits, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert losses[-1] < 0.2 * losses[0]
    assert all(b < a for a, b in zip(losses[:10], losses[1:11]))


# ------------------------------------------------------------ generation


def test_coarse_to_embedding():
    cb = codebooks()
    assert torch.all(coarse_to_embedding(torch.zeros(4, 2, dtype=torch.long), cb) == 0)
    t = torch.randint(K, (5, 2))
    assert torch.equal(coarse_to_embedding(t, cb), embed_sum(t, cb, 2))
    with pytest.raises(DecoderError):
        coarse_to_embedding(torch.tensor([[K, 0]]), cb)


def test_coarse_reconstruction_monotone_in_n():
    cb = codebooks()
    lat = torch.randn(50, D)
    tok = rvq_encode(lat, cb).tokens
    errs = [((coarse_to_embedding(tok[:, :n], cb) - lat) ** 2).sum(1) for n in (1, 2, 3)]
    assert torch.all(errs[1] <= errs[0] + 1e-6) and torch.all(errs[2] <= errs[1] + 1e-6)


@pytest.mark.parametrize("chunk,n_ar", [(None, 2), (3, 2), (None, 1), (4, 3)])
def test_cache_matches_naive(chunk, n_ar):
    for seed in range(3):
        dec = make(seed=seed, chunk=chunk, n_ar=n_ar)
        E_r, E_m = inputs(seed + 10)
        cb = codebooks(seed)
        a = generate(dec, E_r, E_m, cb)
        b = generate_naive(dec, E_r, E_m, cb)
        assert torch.equal(a, b)
        assert a.shape[1] == n_ar and len(a) <= len(E_m) + 16


def test_greedy_deterministic_and_topk1():
    dec = make()
    E_r, E_m = inputs(2)
    cb = codebooks()
    g1 = generate(dec, E_r, E_m, cb, DecodeConfig(seed=1))
    g2 = generate(dec, E_r, E_m, cb, DecodeConfig(seed=99))
    k1 = generate(dec, E_r, E_m, cb, DecodeConfig(mode="top_k", k=1, seed=5))
    assert torch.equal(g1, g2) and torch.equal(g1, k1)
    s1 = generate(dec, E_r, E_m, cb, DecodeConfig(mode="top_k", k=4, seed=7))
    s2 = generate(dec, E_r, E_m, cb, DecodeConfig(mode="top_k", k=4, seed=7))
    assert torch.equal(s1, s2)
    assert torch.equal(s1, generate_naive(dec, E_r, E_m, cb, DecodeConfig(mode="top_k", k=4, seed=7)))


def test_max_frames_validation_and_cap():
    dec = make()
    E_r, E_m = inputs(0)
    with pytest.raises(DecoderError):
        generate(dec, E_r, E_m, codebooks(), DecodeConfig(max_frames=0))
    assert len(generate(dec, E_r, E_m, codebooks(), DecodeConfig(max_frames=3))) <= 3


def test_eos_stops_generation():
    dec = make()
    with torch.no_grad():
        dec.heads[0].bias[dec.eos_id] = 100.0
    E_r, E_m = inputs(0)
    assert len(generate(dec, E_r, E_m, codebooks())) == 0


def test_only_first_layer_emits_eos():
    logits = torch.zeros(3, K + 1)
    logits[:, K] = 10.0
    tok = choose(logits, DecodeConfig(), K, None)
    assert tok[0] == K and torch.all(tok[1:] < K)


def test_prefix_consistency_and_chain_rule():
    dec = make(seed=4)
    E_r, E_m = inputs(4)
    cb = codebooks()
    tokens = generate(dec, E_r, E_m, cb, DecodeConfig(max_frames=6))
    with torch.no_grad():
        tf = dec(E_r, E_m, tokens, cb)  # rows 0..len(tokens)
        total_tf = 0.0
        total_step = 0.0
        for t in range(len(tokens)):
            step = dec(E_r, E_m, tokens[:t], cb)[-1]
            torch.testing.assert_close(step, tf[t], rtol=1e-5, atol=1e-5)
            total_step += float(torch.log_softmax(step, -1).gather(1, tokens[t][:, None]).sum())
            total_tf += float(torch.log_softmax(tf[t], -1).gather(1, tokens[t][:, None]).sum())
    assert total_tf == pytest.approx(total_step, rel=1e-5)
