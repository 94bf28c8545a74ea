import numpy as np
import pytest

from facesynth.coupling import (
    VARIANT_LEAST_SQUARES,
    VARIANT_MAX_LIKELIHOOD,
    VARIANT_NEAREST,
    VARIANT_RANDOM,
    VARIANTS,
    coupling_from_bytes,
    coupling_to_bytes,
    estimate_joint_coefficients,
    fit_coupling,
    least_squares_weights,
    load_coupling,
    ml_objective,
    neutralize_corpus,
    save_coupling,
    synthesize_geometry,
)
from facesynth.errors import CorpusError, FormatError
from facesynth.mesh import AlignedCorpus, CorpusEntry
from facesynth.morphable import build_model, project


@pytest.fixture(scope="module")
def fitted(expressive_corpus):
    model = build_model(expressive_corpus, k_geometry=6, k_texture=6)
    return expressive_corpus, model


class TestLeastSquaresWeights:
    def test_matches_pseudoinverse_oracle(self):
        rng = np.random.default_rng(0)
        a_t = rng.normal(0, 1, size=(4, 6))
        a_g = rng.normal(0, 1, size=(3, 6))
        w = least_squares_weights(a_t, a_g, ridge=0.0)
        oracle = np.linalg.pinv(a_t @ a_t.T) @ a_t @ a_g.T
        assert np.allclose(w, oracle, atol=1e-9)
        oracle2 = np.linalg.pinv(a_t.T) @ a_g.T  # same closed form, other route
        assert np.allclose(w, oracle2, atol=1e-9)

    def test_self_regression_is_identity_on_row_space(self):
        rng = np.random.default_rng(1)
        a_t = rng.normal(0, 1, size=(4, 6))
        w = least_squares_weights(a_t, a_t, ridge=0.0)
        assert np.allclose(w.T @ a_t, a_t, atol=1e-8)

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(2)
        a_t = rng.normal(0, 1, size=(4, 6))
        a_g = rng.normal(0, 1, size=(3, 6))
        w = least_squares_weights(a_t, a_g, ridge=0.0)
        residual = (w.T @ a_t - a_g) @ a_t.T
        bound = 1e-6 * np.linalg.norm(a_g) * np.linalg.norm(a_t)
        assert np.linalg.norm(residual) < bound

    def test_rank_deficient_needs_pinv(self):
        rng = np.random.default_rng(3)
        a_t = rng.normal(0, 1, size=(5, 3))  # rank <= 3 < 5
        a_g = rng.normal(0, 1, size=(2, 3))
        w = least_squares_weights(a_t, a_g, ridge=0.0)
        assert np.all(np.isfinite(w))
        # fitted values still reproduce the normal-equation solution
        residual = (w.T @ a_t - a_g) @ a_t.T
        assert np.linalg.norm(residual) < 1e-8

    def test_ridge_shrinks(self):
        rng = np.random.default_rng(4)
        a_t = rng.normal(0, 1, size=(3, 12))
        a_g = rng.normal(0, 1, size=(3, 12))
        w0 = least_squares_weights(a_t, a_g, ridge=0.0)
        w1 = least_squares_weights(a_t, a_g, ridge=100.0)
        assert np.linalg.norm(w1) < np.linalg.norm(w0)


class TestNeutralize:
    def test_all_entries_share_neutral_geometry(self, expressive_corpus):
        out = neutralize_corpus(expressive_corpus)
        assert len(out) == len(expressive_corpus)
        neutral = {
            e.identity: e.geometry for e in expressive_corpus.entries if e.expression == "neutral"
        }
        for before, after in zip(expressive_corpus.entries, out.entries):
            assert after.identity == before.identity
            assert after.expression == before.expression
            assert np.array_equal(after.colors, before.colors)
            assert np.array_equal(after.geometry, neutral[after.identity])

    def test_neutral_only_corpus_is_fixed_point(self, tiny_corpus):
        out = neutralize_corpus(tiny_corpus)
        for before, after in zip(tiny_corpus.entries, out.entries):
            assert np.array_equal(after.geometry, before.geometry)

    def test_missing_neutral_names_identity(self, expressive_corpus):
        entries = tuple(
            e for e in expressive_corpus.entries if not (e.identity == "id0003" and e.expression == "neutral")
        )
        broken = AlignedCorpus(topology=expressive_corpus.topology, entries=entries)
        with pytest.raises(CorpusError, match="id0003"):
            neutralize_corpus(broken)


class TestSynthesize:
    def test_nn_returns_exact_training_geometry(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_NEAREST)
        for j in (0, 5, 17):
            entry = corpus.entries[j]
            g = synthesize_geometry(coupling, entry.colors)
            assert np.allclose(g, entry.geometry, atol=1e-8)

    def test_nn_output_is_training_member(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_NEAREST)
        rng = np.random.default_rng(5)
        probe = np.clip(corpus.entries[0].colors + rng.normal(0, 0.1, corpus.entries[0].colors.shape), 0, 1)
        g = synthesize_geometry(coupling, probe)
        train_alphas = coupling.geometry_coefficients.T
        recon = [model.mean_geometry + model.geometry_basis[:, :6] @ a for a in train_alphas]
        assert any(np.allclose(g, r, atol=1e-9) for r in recon)

    def test_ls_mean_texture_gives_mean_geometry(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_LEAST_SQUARES)
        g = synthesize_geometry(coupling, model.mean_texture)
        assert np.allclose(g, model.mean_geometry, atol=1e-9)

    def test_random_is_seed_deterministic_and_finite(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_RANDOM)
        a = synthesize_geometry(coupling, seed=9)
        b = synthesize_geometry(coupling, seed=9)
        c = synthesize_geometry(coupling, seed=10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (3 * model.vertex_count,)
        assert np.all(np.isfinite(a))

    def test_all_variants_output_shape_and_finiteness(self, fitted):
        corpus, model = fitted
        probe = corpus.entries[3].colors
        for variant in VARIANTS:
            coupling = fit_coupling(corpus, model, variant)
            g = synthesize_geometry(coupling, probe, seed=1)
            assert g.shape == (3 * model.vertex_count,)
            assert np.all(np.isfinite(g))

    def test_non_random_variants_ignore_seed(self, fitted):
        corpus, model = fitted
        probe = corpus.entries[2].colors
        for variant in (VARIANT_NEAREST, VARIANT_LEAST_SQUARES, VARIANT_MAX_LIKELIHOOD):
            coupling = fit_coupling(corpus, model, variant)
            a = synthesize_geometry(coupling, probe, seed=1)
            b = synthesize_geometry(coupling, probe, seed=999)
            assert np.array_equal(a, b)

    def test_texture_image_input_needs_topology(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_LEAST_SQUARES)
        img = np.full((8, 8, 3), 0.5)
        with pytest.raises(ValueError, match="topology"):
            synthesize_geometry(coupling, img)
        g = synthesize_geometry(coupling, img, topology=corpus.topology)
        assert np.all(np.isfinite(g))

    def test_ls_training_residual_beats_random_expectation(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_LEAST_SQUARES)
        a_t = coupling.model.texture_basis[:, :6].T @ (corpus.color_matrix() - model.mean_texture[:, None])
        a_g = coupling.model.geometry_basis[:, :6].T @ (corpus.geometry_matrix() - model.mean_geometry[:, None])
        ls_residual = np.mean(np.sum((coupling.weights.T @ a_t - a_g) ** 2, axis=0))
        sigma2 = model.geometry_singular_values[:6] ** 2 / model.sample_count
        random_expected = np.sum(sigma2) + np.mean(np.sum(a_g**2, axis=0))
        assert ls_residual <= random_expected


class TestMaxLikelihood:
    def test_prior_off_limit_matches_lstsq_oracle(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_MAX_LIKELIHOOD, noise_scale=1.0)
        joint = coupling.joint
        k = coupling.k_joint
        t = corpus.entries[4].colors
        beta = estimate_joint_coefficients(joint, coupling.joint_variances, 1.0, t, drop_prior=True)
        target = (t - joint.mean_texture) / joint.texture_scale
        oracle, *_ = np.linalg.lstsq(joint.texture_block[:, :k], target, rcond=None)
        assert np.allclose(beta, oracle, atol=1e-8 * max(1.0, np.linalg.norm(oracle)))

    def test_objective_gradient_vanishes_at_minimizer(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_MAX_LIKELIHOOD)
        t = corpus.entries[7].colors
        beta = estimate_joint_coefficients(coupling.joint, coupling.joint_variances, coupling.noise_scale, t)
        obj = ml_objective(coupling.joint, coupling.joint_variances, coupling.noise_scale, t, beta)
        h = 1e-6
        grad = np.zeros_like(beta)
        for i in range(len(beta)):
            up = beta.copy()
            up[i] += h
            dn = beta.copy()
            dn[i] -= h
            grad[i] = (
                ml_objective(coupling.joint, coupling.joint_variances, coupling.noise_scale, t, up)
                - ml_objective(coupling.joint, coupling.joint_variances, coupling.noise_scale, t, dn)
            ) / (2 * h)
        assert np.linalg.norm(grad) < 1e-6 * (1.0 + abs(obj))

    def test_minimizer_beats_perturbations(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_MAX_LIKELIHOOD)
        t = corpus.entries[11].colors
        beta = estimate_joint_coefficients(coupling.joint, coupling.joint_variances, coupling.noise_scale, t)
        base = ml_objective(coupling.joint, coupling.joint_variances, coupling.noise_scale, t, beta)
        rng = np.random.default_rng(6)
        for _ in range(100):
            perturbed = beta + rng.normal(0, 0.05, beta.shape)
            assert ml_objective(coupling.joint, coupling.joint_variances, coupling.noise_scale, t, perturbed) >= base

    def test_zero_beta_at_mean_texture_is_zero_objective(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_MAX_LIKELIHOOD)
        joint = coupling.joint
        obj = ml_objective(joint, coupling.joint_variances, 1.0, joint.mean_texture, np.zeros(coupling.k_joint))
        assert obj == 0.0

    def test_huge_noise_scale_collapses_to_mean(self, fitted):
        corpus, model = fitted
        strong = fit_coupling(corpus, model, VARIANT_MAX_LIKELIHOOD, noise_scale=1e9)
        weak = fit_coupling(corpus, model, VARIANT_MAX_LIKELIHOOD, noise_scale=1.0)
        t = corpus.entries[9].colors
        beta_strong = estimate_joint_coefficients(strong.joint, strong.joint_variances, 1e9, t)
        beta_weak = estimate_joint_coefficients(weak.joint, weak.joint_variances, 1.0, t)
        assert np.linalg.norm(beta_strong) <= 1e-4 * np.linalg.norm(beta_weak)
        g = synthesize_geometry(strong, t)
        mean_g = strong.joint.mean_geometry
        assert np.linalg.norm(g - mean_g) <= 1e-4 * np.linalg.norm(mean_g)

    def test_objective_rejects_bad_noise(self, fitted):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, VARIANT_MAX_LIKELIHOOD)
        from facesynth.errors import NumericalError

        with pytest.raises(NumericalError, match="positive"):
            ml_objective(coupling.joint, coupling.joint_variances, 0.0, corpus.entries[0].colors, np.zeros(coupling.k_joint))


class TestSerialization:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_roundtrip(self, fitted, variant, tmp_path):
        corpus, model = fitted
        coupling = fit_coupling(corpus, model, variant)
        path = tmp_path / f"{variant}.mmcp"
        save_coupling(path, coupling)
        loaded = load_coupling(path)
        assert loaded.variant == variant
        assert coupling_to_bytes(loaded) == coupling_to_bytes(coupling)
        probe = corpus.entries[1].colors
        a = synthesize_geometry(coupling, probe, seed=3)
        b = synthesize_geometry(loaded, probe, seed=3)
        assert np.array_equal(a, b)

    def test_bad_magic(self, fitted):
        corpus, model = fitted
        data = bytearray(coupling_to_bytes(fit_coupling(corpus, model, VARIANT_RANDOM)))
        data[:4] = b"NOPE"
        with pytest.raises(FormatError, match="magic"):
            coupling_from_bytes(bytes(data))

    def test_truncation(self, fitted):
        corpus, model = fitted
        data = coupling_to_bytes(fit_coupling(corpus, model, VARIANT_LEAST_SQUARES))
        with pytest.raises(FormatError):
            coupling_from_bytes(data[: len(data) // 2])


def test_fit_rejects_unknown_variant(fitted):
    corpus, model = fitted
    with pytest.raises(ValueError, match="variant"):
        fit_coupling(corpus, model, "kriging")


def test_fit_rejects_empty_corpus(fitted):
    corpus, model = fitted
    empty = AlignedCorpus(topology=corpus.topology, entries=())
    with pytest.raises(ValueError, match="empty"):
        fit_coupling(empty, model, VARIANT_RANDOM)
