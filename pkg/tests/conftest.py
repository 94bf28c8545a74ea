import numpy as np
import pytest

from facesynth.mesh import AlignedCorpus, CorpusEntry
from facesynth.synthetic import SyntheticCorpusSpec, generate_corpus, make_template


@pytest.fixture(scope="session")
def small_template():
    """9x9 sphere-patch template: 81 vertices, 128 faces (BVH path)."""
    return make_template(grid=(9, 9))


@pytest.fixture(scope="session")
def mid_template():
    return make_template(grid=(17, 17))


@pytest.fixture(scope="session")
def tiny_corpus(small_template):
    """Deterministic 6-identity corpus on the small template, no expressions."""
    spec = SyntheticCorpusSpec(
        identities=6, expressions_per_identity=1, latent_dim=2, noise=0.02, seed=11, grid=(9, 9)
    )
    return generate_corpus(spec).corpus


@pytest.fixture(scope="session")
def expressive_corpus():
    """12 identities x 3 expressions on a 12x12 grid, with planted correlation."""
    spec = SyntheticCorpusSpec(
        identities=12, expressions_per_identity=3, latent_dim=2, noise=0.02, seed=7, grid=(12, 12)
    )
    return generate_corpus(spec).corpus


def random_corpus_matrices(rng, m, n):
    """Random (3m, n) geometry/color matrices with colors in [0, 1]."""
    g = rng.normal(0.0, 1.0, size=(3 * m, n))
    t = rng.uniform(0.1, 0.9, size=(3 * m, n))
    return g, t


def corpus_from_matrices(topology, geometry, colors, identities=None, expressions=None):
    n = geometry.shape[1]
    entries = []
    for j in range(n):
        entries.append(
            CorpusEntry(
                identity=identities[j] if identities else f"id{j:03d}",
                expression=expressions[j] if expressions else "neutral",
                geometry=geometry[:, j],
                colors=colors[:, j],
            )
        )
    return AlignedCorpus(topology=topology, entries=tuple(entries))
