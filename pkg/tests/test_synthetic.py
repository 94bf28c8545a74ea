import numpy as np
import pytest

from facesynth.corpus_io import append_entry, load_corpus, save_corpus
from facesynth.coupling import neutralize_corpus
from facesynth.errors import FormatError
from facesynth.mesh import NEUTRAL_EXPRESSION, CorpusEntry
from facesynth.morphable import build_model, project
from facesynth.synthetic import SyntheticCorpusSpec, generate_corpus, make_template


class TestTemplate:
    def test_shape_and_landmarks(self):
        topo, base = make_template(grid=(11, 13))
        assert topo.vertex_count == 11 * 13
        assert len(topo.faces) == 2 * 10 * 12
        assert len(np.unique(topo.landmark_indices)) == 43
        assert base.shape == (3 * topo.vertex_count,)

    def test_uv_fills_unit_square(self):
        topo, _ = make_template(grid=(9, 9))
        assert topo.uv.min() == 0.0 and topo.uv.max() == 1.0

    def test_grid_too_small(self):
        with pytest.raises(ValueError, match="at least"):
            make_template(grid=(4, 4))


class TestGenerator:
    def test_same_seed_is_byte_identical(self):
        spec = SyntheticCorpusSpec(identities=4, expressions_per_identity=2, seed=5, grid=(9, 9))
        a = generate_corpus(spec).corpus
        b = generate_corpus(spec).corpus
        assert len(a) == len(b) == 8
        for ea, eb in zip(a.entries, b.entries):
            assert ea.identity == eb.identity and ea.expression == eb.expression
            assert ea.geometry.tobytes() == eb.geometry.tobytes()
            assert ea.colors.tobytes() == eb.colors.tobytes()

    def test_different_seed_differs(self):
        a = generate_corpus(SyntheticCorpusSpec(identities=3, seed=1, grid=(9, 9))).corpus
        b = generate_corpus(SyntheticCorpusSpec(identities=3, seed=2, grid=(9, 9))).corpus
        assert not np.array_equal(a.entries[0].geometry, b.entries[0].geometry)

    def test_every_identity_has_neutral(self):
        spec = SyntheticCorpusSpec(identities=5, expressions_per_identity=3, seed=0, grid=(9, 9))
        corpus = generate_corpus(spec).corpus
        corpus.validate_neutral_coverage()
        assert len(corpus) == 15

    def test_single_expression_corpus_neutralizes_to_itself(self):
        spec = SyntheticCorpusSpec(identities=4, expressions_per_identity=1, seed=3, grid=(9, 9))
        corpus = generate_corpus(spec).corpus
        out = neutralize_corpus(corpus)
        for a, b in zip(corpus.entries, out.entries):
            assert np.array_equal(a.geometry, b.geometry)

    def test_planted_correlation(self):
        spec = SyntheticCorpusSpec(
            identities=40, expressions_per_identity=1, latent_dim=1, noise=0.0, seed=9, grid=(9, 9)
        )
        gen = generate_corpus(spec)
        model = build_model(gen.corpus, k_geometry=1, k_texture=1)
        tex = np.array([project(model, e.colors, "texture", k=1).values[0] for e in gen.corpus.entries])
        geo = np.array([project(model, e.geometry, "geometry", k=1).values[0] for e in gen.corpus.entries])
        r = np.corrcoef(tex, geo)[0, 1]
        assert abs(r) > 0.99

    def test_latents_returned_per_identity(self):
        spec = SyntheticCorpusSpec(identities=3, latent_dim=2, seed=0, grid=(9, 9))
        gen = generate_corpus(spec)
        assert set(gen.latents) == {"id0000", "id0001", "id0002"}
        assert all(z.shape == (2,) for z in gen.latents.values())

    def test_neutral_offset_is_zero(self):
        spec = SyntheticCorpusSpec(identities=2, expressions_per_identity=3, seed=0, grid=(9, 9))
        gen = generate_corpus(spec)
        assert np.allclose(gen.expression_offsets[NEUTRAL_EXPRESSION], 0.0)
        assert not np.allclose(gen.expression_offsets["smile"], 0.0)


class TestCorpusContainer:
    def test_roundtrip(self, tmp_path, expressive_corpus):
        save_corpus(tmp_path / "corpus", expressive_corpus)
        loaded = load_corpus(tmp_path / "corpus")
        assert loaded.topology.vertex_count == expressive_corpus.topology.vertex_count
        assert np.array_equal(loaded.topology.faces, expressive_corpus.topology.faces)
        assert np.array_equal(loaded.topology.landmark_indices, expressive_corpus.topology.landmark_indices)
        assert len(loaded) == len(expressive_corpus)
        for a, b in zip(loaded.entries, expressive_corpus.entries):
            assert a.identity == b.identity and a.expression == b.expression
            assert np.max(np.abs(a.geometry - b.geometry)) < 1e-9
            assert np.array_equal(a.geometry, b.geometry)  # f64 payload is exact
            assert np.array_equal(a.colors, b.colors)

    def test_append_creates_then_extends(self, tmp_path, tiny_corpus):
        first, second = tiny_corpus.entries[0], tiny_corpus.entries[1]
        target = tmp_path / "c"
        assert append_entry(target, tiny_corpus.topology, first) == 1
        assert append_entry(target, tiny_corpus.topology, second) == 2
        loaded = load_corpus(target)
        assert [e.identity for e in loaded.entries] == [first.identity, second.identity]
        assert np.array_equal(loaded.entries[1].colors, second.colors)

    def test_append_rejects_foreign_topology(self, tmp_path, tiny_corpus):
        other_topo, _ = make_template(grid=(10, 10))
        target = tmp_path / "c"
        append_entry(target, tiny_corpus.topology, tiny_corpus.entries[0])
        entry = CorpusEntry(
            identity="x",
            expression="neutral",
            geometry=np.zeros(3 * other_topo.vertex_count),
            colors=np.zeros(3 * other_topo.vertex_count),
        )
        with pytest.raises(FormatError, match="topology"):
            append_entry(target, other_topo, entry)

    def test_missing_pieces_detected(self, tmp_path, tiny_corpus):
        save_corpus(tmp_path / "c", tiny_corpus)
        (tmp_path / "c" / "entries.bin").unlink()
        with pytest.raises(FormatError, match="entries.bin"):
            load_corpus(tmp_path / "c")

    def test_truncated_entries_detected(self, tmp_path, tiny_corpus):
        save_corpus(tmp_path / "c", tiny_corpus)
        p = tmp_path / "c" / "entries.bin"
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 16])
        with pytest.raises(FormatError, match="truncated"):
            load_corpus(tmp_path / "c")
