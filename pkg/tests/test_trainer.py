import json

import numpy as np
import pytest
import torch

from codectse import config, trainer
from codectse.codec import embed_sum, save_codec
from codectse.model import Features, TSEModel, count_params, ste_embedding

from conftest import random_codec, tiny_config


def test_lr_ramp():
    tc = config.TrainConfig(warmup_steps=500, lr0=1e-3)
    assert trainer.lr_at(0, [], tc) == 0.0
    assert trainer.lr_at(250, [], tc) == pytest.approx(5e-4)
    assert trainer.lr_at(500, [], tc) == pytest.approx(1e-3)
    assert trainer.lr_at(5000, [], tc) == pytest.approx(1e-3)


@pytest.mark.parametrize(
    "history,expected",
    [
        ([1.0, 1.1, 1.2, 1.3], 1),
        ([1.0, 1.1, 1.2], 0),
        ([1.0, 0.9, 0.8, 0.7], 0),
        ([1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6], 2),
        ([1.0, 1.1, 1.2, 0.5, 0.6, 0.7, 0.8], 1),
        ([1.0, 1.1, 1.2, 1.3, 0.9, 1.0], 1),
    ],
)
def test_halvings_table(history, expected):
    assert trainer.halvings(history, 3) == expected


def test_lr_never_increases_after_warmup():
    tc = config.TrainConfig(warmup_steps=10)
    r = np.random.default_rng(0)
    hist = list(r.uniform(0, 1, 30))
    lrs = [trainer.lr_at(10 + e, hist[:e], tc) for e in range(30)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# --------------------------------------------------------------- wiring


def tiny_model(mode="joint", seed=0, dtype=torch.float64):
    cfg = tiny_config(**{"train.mode": mode, "codec.codebook_size": 8, "codec.dim": 8})
    for sec in (cfg.adapter, cfg.decoder, cfg.refiner):
        sec.dim = 8
    c = random_codec(K=8, d=8, seed=seed)
    torch.manual_seed(seed)
    m = TSEModel(cfg, c).to(dtype)
    c.to(dtype)
    for p in m.refiner.head.parameters():
        torch.nn.init.normal_(p, std=0.1)
    return m


def fake_features(model, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randint(8, (10, 4), generator=g)
    return Features(
        ref_mel=torch.randn(6, 80, generator=g, dtype=dtype),
        mix_mel=torch.randn(10, 80, generator=g, dtype=dtype),
        target_tokens=tokens,
        target_fine=embed_sum(tokens, model.codebooks, 4),
        ref_tokens=torch.randint(8, (6, 4), generator=g),
        mix_tokens=torch.randint(8, (10, 4), generator=g),
    )


def grads(model, loss, params):
    g = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return [torch.zeros_like(p) if x is None else x for p, x in zip(params, g)]


def test_ste_one_hot_identity():
    cb = torch.randn(2, 5, 3, dtype=torch.float64)
    logits = torch.full((4, 2, 6), -1e3, dtype=torch.float64)
    idx = torch.randint(5, (4, 2))
    logits.scatter_(2, idx[..., None], 1e3)
    logits.requires_grad_(True)
    out = ste_embedding(logits, cb)
    soft = sum(torch.softmax(logits, -1)[:, l, :5] @ cb[l] for l in range(2))
    torch.testing.assert_close(out, soft, rtol=0, atol=1e-12)
    w = torch.randn_like(out)
    g1 = torch.autograd.grad((out * w).sum(), logits)[0]
    g2 = torch.autograd.grad((soft * w).sum(), logits)[0]
    torch.testing.assert_close(g1, g2, rtol=0, atol=0)


def test_ste_eos_maps_to_zero():
    cb = torch.randn(2, 5, 3)
    logits = torch.zeros(1, 2, 6)
    logits[0, 0, 5] = 50.0
    logits[0, 1, 2] = 50.0
    torch.testing.assert_close(ste_embedding(logits, cb)[0], cb[1, 2], atol=1e-5, rtol=0)


def test_refiner_grad_is_reg_grad():
    m = tiny_model("joint")
    f = fake_features(m)
    out = m.losses(f, "joint")
    params = list(m.refiner.parameters())
    for a, b in zip(grads(m, out["total"], params), grads(m, out["reg"], params)):
        torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-14)


def test_reg_reaches_decoder_only_in_joint_mode():
    m = tiny_model()
    f = fake_features(m)
    params = [p for n, p in m.decoder.named_parameters() if "heads" in n]
    joint = grads(m, m.losses(f, "joint")["reg"], params)
    split = grads(m, m.losses(f, "split")["reg"], params)
    assert sum(float(g.abs().sum()) for g in joint) > 0
    assert all(torch.all(g == 0) for g in split)


def test_split_isolation_and_shared_ce():
    m = tiny_model("split", seed=1)
    f = fake_features(m)
    out_j, out_s = m.losses(f, "joint"), m.losses(f, "split")
    assert torch.equal(out_j["ce"], out_s["ce"])
    params = list(m.refiner.parameters())
    before = grads(m, out_s["reg"], params)
    with torch.no_grad():
        for p in m.decoder.parameters():
            p.add_(torch.randn_like(p))
    after = grads(m, m.losses(f, "split")["reg"], params)
    for a, b in zip(before, after):
        assert torch.equal(a, b)


def test_check_ground_truth():
    m = tiny_model()
    f = fake_features(m)
    trainer.check_ground_truth(f, m.codec)
    f.target_fine = f.target_fine + 1e-3
    with pytest.raises(AssertionError):
        trainer.check_ground_truth(f, m.codec)


def test_unknown_mode():
    m = tiny_model()
    with pytest.raises(ValueError):
        m.losses(fake_features(m), "both")


# --------------------------------------------------------------- counting


def _count(cfg):
    c = cfg.codec
    codec = random_codec(K=c.codebook_size, L=c.n_layers, d=c.dim, hidden=8)
    return count_params(TSEModel(cfg, codec))


def test_paper_counts():
    counts = _count(config.preset("paper"))
    assert 30.6e6 <= counts["decoder"] <= 43.2e6
    assert 65.5e6 <= counts["total"] <= 92.4e6
    assert counts["total"] == sum(v for k, v in counts.items() if k != "total")


def test_decoder_blocks_linear_in_depth():
    cfg = config.preset("paper")
    m10 = TSEModel(cfg, random_codec(K=1024, L=8, d=128, hidden=8))
    cfg.decoder.layers = 20
    m20 = TSEModel(cfg, random_codec(K=1024, L=8, d=128, hidden=8))
    blocks = lambda m: sum(p.numel() for p in m.decoder.blocks.parameters())
    assert blocks(m20) / blocks(m10) == pytest.approx(2.0, rel=0.05)


# -------------------------------------------------------------- training


def _trainer(manifest, tmp_path=None, seed=0, **over):
    cfg = tiny_config(**{"train.seed": seed, "train.batch_size": 2, "train.train_pool": 4, "train.val_pool": 2,
                         "train.steps_per_epoch": 3, "train.warmup_steps": 5, **over})
    log = tmp_path / "log.jsonl" if tmp_path else None
    return trainer.Trainer(cfg, random_codec(), manifest, log_path=log)


def test_training_is_deterministic(manifest, tmp_path):
    a = _trainer(manifest, tmp_path)
    b = _trainer(manifest)
    a.fit(epochs=2)
    b.fit(epochs=2)
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_ms"} for r in h]
    assert strip(a.history) == strip(b.history)
    assert a.val_history == b.val_history
    recs = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(recs) == 6
    assert set(recs[0]) == {"step", "epoch", "ce", "reg", "total", "lr", "wall_ms"}


def test_codec_untouched_by_training(manifest):
    tr = _trainer(manifest)
    before = {k: v.clone() for k, v in tr.codec.state_dict().items()}
    tr.fit(epochs=1)
    for k, v in tr.codec.state_dict().items():
        assert torch.equal(before[k], v), k


def test_small_overfit_both_losses_drop(manifest):
    tr = _trainer(manifest, **{"train.mode": "split", "train.lr0": 3e-3, "train.batch_size": 4})
    pool = tr.pool

    def pool_losses():
        with torch.no_grad():
            tr.model.eval()
            outs = [tr.model.losses(f, "split") for f in pool]
        return np.mean([float(o["ce"]) for o in outs]), np.mean([float(o["reg"]) for o in outs])

    ce0, reg0 = pool_losses()
    tr.fit(epochs=20)
    ce1, reg1 = pool_losses()
    assert ce1 < ce0 and reg1 < reg0


def test_checkpoint_round_trip(manifest, tmp_path):
    tr = _trainer(manifest)
    tr.fit(epochs=1)
    codec_path = save_codec(tr.codec, tmp_path / "codec.zip")
    ck = trainer.save_checkpoint(tmp_path / "tse.zip", tr.model, codec_path, tr)
    model, header = trainer.load_checkpoint(ck)
    assert header["codec_path"] == "codec.zip" and int(header["step"]) == 3
    f = tr.pool[0]
    tr.model.eval()
    with torch.no_grad():
        a = tr.model.losses(f, "joint")
        b = model.losses(f, "joint")
    assert torch.equal(a["logits"], b["logits"]) and torch.equal(a["reg"], b["reg"])
    assert model.cfg == tr.model.cfg


def test_checkpoint_codec_errors(manifest, tmp_path):
    tr = _trainer(manifest)
    codec_path = save_codec(tr.codec, tmp_path / "codec.zip")
    ck = trainer.save_checkpoint(tmp_path / "tse.zip", tr.model, codec_path, tr)
    save_codec(random_codec(seed=5), codec_path)
    with pytest.raises(trainer.CheckpointError):
        trainer.load_checkpoint(ck)
    codec_path.unlink()
    with pytest.raises(FileNotFoundError):
        trainer.load_checkpoint(ck)
