import numpy as np
import pytest
import torch

from codectse import audio, codec, config, toycorpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_manifest_path(tmp_path_factory):
    return toycorpus.make_toy_corpus(tmp_path_factory.mktemp("toy"), speakers=4, utts=8, seed=1)


@pytest.fixture(scope="session")
def manifest(toy_manifest_path):
    return audio.load_manifest(toy_manifest_path)


@pytest.fixture(scope="session")
def trained_codec_path(manifest, tmp_path_factory):
    cfg = config.preset("desk")
    torch.manual_seed(cfg.codec.seed)
    c = codec.train_codec(manifest, cfg.codec, cfg.data)
    return codec.save_codec(c, tmp_path_factory.mktemp("codec") / "codec.zip")


@pytest.fixture(scope="session")
def trained_codec(trained_codec_path):
    return codec.load_codec(trained_codec_path)


def random_codec(K=16, L=4, d=16, n_mels=80, seed=0, hidden=32):
    """Untrained codec with random (zero-pinned) codebooks, for wiring tests."""
    torch.manual_seed(seed)
    c = codec.ToyCodec(n_mels=n_mels, dim=d, n_layers=L, codebook_size=K, hidden=hidden)
    cb = torch.randn(L, K, d) * 0.3
    cb[:, 0] = 0
    c.codebooks.copy_(cb)
    return c.freeze()


def tiny_config(**over) -> config.RunConfig:
    cfg = config.preset("desk")
    small = {
        "adapter.layers": 1,
        "adapter.dim": 32,
        "adapter.heads": 2,
        "decoder.layers": 2,
        "decoder.dim": 32,
        "decoder.heads": 2,
        "refiner.layers": 1,
        "refiner.dim": 32,
        "refiner.heads": 2,
        "codec.codebook_size": 16,
        "codec.dim": 16,
    }
    small.update(over)
    config.apply_overrides(cfg, small)
    return cfg.validate()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criterion -> result line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
