import numpy as np
import pytest

from narravoc import datagen, embed, vocab as vocab_mod

TINY_SPEC = dict(
    n_scenes=3,
    events_per_scene=6,
    postfix_pool=("with the left hand", "very carefully"),
    extension_prob=0.4,
    frame_noise=0.05,
    frames_per_clip=4,
    dim=32,
    seed=7,
)


@pytest.fixture(scope="session")
def tiny_world():
    return datagen.make_world(datagen.WorldSpec(**TINY_SPEC))


@pytest.fixture(scope="session")
def tiny_dataset():
    return datagen.make_dataset(datagen.WorldSpec(**TINY_SPEC), n_streams=16, len_range=(3, 5))


@pytest.fixture(scope="session")
def tiny_matrices(tiny_dataset):
    enc = embed.make_stub_encoder(TINY_SPEC["dim"])
    vocab = tiny_dataset.world.vocabulary
    return {k: embed.build_matrix(vocab, k, enc) for k in ("scene", "prefix", "postfix")}


@pytest.fixture(scope="session")
def index_dir(tmp_path_factory, tiny_dataset, tiny_matrices):
    """Directory with vocab.jsonl + the three NVEM matrices, as the CLI
    index/retrieve/upgrade subcommands expect."""
    d = tmp_path_factory.mktemp("index")
    vocab_mod.save(tiny_dataset.world.vocabulary, d / "vocab.jsonl")
    sha = embed.vocab_file_sha(d / "vocab.jsonl")
    for kind, m in tiny_matrices.items():
        embed.save_matrix(embed.EmbeddingMatrix(rows=m.rows, vocab_sha=sha), d / f"{kind}.nvem")
    return d


def random_unit_rows(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    m = rng.standard_normal((n, dim)).astype(np.float32)
    return m / np.linalg.norm(m, axis=1, keepdims=True)
