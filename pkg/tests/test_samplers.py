import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_conditional, random_spd
from preddiff.samplers import (
    ConditionalSampler,
    DatasetTooSmall,
    GaussianPatchModel,
    LocationGrid,
    MarginalSampler,
    ReferenceDataset,
    SamplingConfig,
    SingularCovariance,
    cell_of,
    conditional_distribution,
    fit_gaussian,
    fit_location_grid,
    load_sampler,
    sample_conditional,
    sample_marginal,
    save_sampler,
)
from preddiff.tensor import ImageTensor, PatchGeometry, WindowIndex, enumerate_windows


def _model(mean, cov, epsilon=0.0):
    mean = np.asarray(mean, dtype=np.float64)
    return GaussianPatchModel((len(mean),), mean, np.asarray(cov, dtype=np.float64), epsilon)


def test_sampling_config_defaults():
    cfg = SamplingConfig()
    assert (cfg.num_samples, cfg.clip_to_range) == (10, True)
    with pytest.raises(ValueError):
        SamplingConfig(num_samples=0)


def test_bivariate_conditioning_closed_form():
    model = _model([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
    mean, cov = conditional_distribution(model, [True, False], [np.nan, 2.0])
    assert mean[0] == pytest.approx(1.0)
    assert cov[0, 0] == pytest.approx(0.75)


def test_diagonal_covariance_gives_independence():
    model = _model([1.0, 2.0, 3.0], np.diag([1.0, 2.0, 3.0]))
    mean, cov = conditional_distribution(model, [False, True, True], [10.0])
    assert mean.tolist() == [2.0, 3.0]
    assert np.array_equal(cov, np.diag([2.0, 3.0]))


def test_observed_values_may_be_full_patch_or_outer_only():
    rng = np.random.default_rng(0)
    model = _model(rng.standard_normal(4), random_spd(rng, 4))
    mask = np.array([False, True, False, True])
    x = rng.standard_normal(4)
    a = conditional_distribution(model, mask, x)[0]
    b = conditional_distribution(model, mask, x[~mask])[0]
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        conditional_distribution(model, mask, x[:3])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_conditional_matches_dense_inverse(p, seed):
    rng = np.random.default_rng(seed)
    cov = random_spd(rng, p)
    mu = rng.standard_normal(p)
    mask = rng.random(p) < 0.5
    if mask.all() or not mask.any():
        mask[0] = not mask[0]
    x = rng.standard_normal(p)
    mean, cond = conditional_distribution(_model(mu, cov), mask, x)
    ref_mean, ref_cov = dense_conditional(mu, cov, mask, x)
    assert np.allclose(mean, ref_mean, rtol=1e-8, atol=1e-8 * np.abs(ref_mean).max())
    assert np.allclose(cond, ref_cov, rtol=1e-8, atol=1e-8 * np.abs(ref_cov).max())
    assert np.linalg.eigvalsh(cond).min() >= -1e-9


def test_all_masks_of_six_dim_model():
    rng = np.random.default_rng(5)
    cov, mu, x = random_spd(rng, 6), rng.standard_normal(6), rng.standard_normal(6)
    model = _model(mu, cov)
    for bits in itertools.product([False, True], repeat=6):
        mask = np.array(bits)
        if mask.all() or not mask.any():
            continue
        mean, cond = conditional_distribution(model, mask, x)
        ref_mean, ref_cov = dense_conditional(mu, cov, mask, x)
        assert np.allclose(mean, ref_mean, rtol=1e-8, atol=1e-10)
        assert np.allclose(cond, ref_cov, rtol=1e-8, atol=1e-10)


def test_epsilon_enters_every_factorization():
    model = _model([0.0, 0.0], np.zeros((2, 2)), epsilon=0.25)
    mean, cov = conditional_distribution(model, [True, False], [3.0])
    assert mean[0] == 0.0 and cov[0, 0] == pytest.approx(0.25)


def test_empty_mask_is_rejected():
    with pytest.raises(ValueError, match="selects nothing"):
        _model([0.0, 0.0], np.eye(2)).conditional([False, False])


def test_singular_outer_covariance():
    with pytest.raises(SingularCovariance):
        _model([0.0, 0.0, 0.0], np.zeros((3, 3))).conditional([True, False, False])


def test_model_validates_moments():
    with pytest.raises(ValueError, match="symmetric"):
        _model([0.0, 0.0], [[1.0, 0.2], [0.1, 1.0]])
    with pytest.raises(ValueError, match="patch shape"):
        GaussianPatchModel((3,), np.zeros(2), np.eye(2), 0.0)


# fitting -----------------------------------------------------------------------


def test_constant_zero_data_gives_zero_mean_and_epsilon_covariance():
    data = ReferenceDataset(np.zeros((5, 6, 6)))
    model = fit_gaussian(data, 3, epsilon=1e-3)
    assert np.array_equal(model.mean, np.zeros(9))
    assert np.array_equal(model.regularized, 1e-3 * np.eye(9))


def test_default_epsilon_has_a_floor_for_degenerate_data():
    model = fit_gaussian(ReferenceDataset(np.zeros((5, 6, 6))), 3)
    assert model.epsilon == 1e-10


def test_default_epsilon_scales_with_variance():
    data = ReferenceDataset(np.random.default_rng(0).random((20, 8, 8)))
    model = fit_gaussian(data, 3)
    assert model.epsilon == pytest.approx(1e-5 * np.mean(np.diag(model.covariance)))


def test_unit_noise_covariance_diagonal_near_one():
    rng = np.random.default_rng(11)
    data = ReferenceDataset(rng.standard_normal((200, 16, 16)), value_range=(-np.inf, np.inf))
    model = fit_gaussian(data, 4, max_patches=20000, rng_seed=1)
    assert np.all(np.abs(np.diag(model.covariance) - 1.0) < 0.05)


def test_patch_of_fourteen_has_196_dims():
    data = ReferenceDataset(np.random.default_rng(0).random((3, 16, 16)))
    model = fit_gaussian(data, 14)
    assert model.size == 196 and model.covariance.shape == (196, 196)


def test_fit_uses_every_patch_when_under_budget_and_matches_numpy():
    imgs = np.random.default_rng(2).random((3, 5, 5))
    model = fit_gaussian(ReferenceDataset(imgs), 2, epsilon=0.0)
    patches = np.array([imgs[n, r : r + 2, c : c + 2].ravel() for n in range(3) for r in range(4) for c in range(4)])
    assert model.fitted_from == len(patches)
    assert np.allclose(model.mean, patches.mean(0), atol=1e-14)
    assert np.allclose(model.covariance, np.cov(patches, rowvar=False), atol=1e-14)


def test_colour_patches_carry_channels():
    data = ReferenceDataset(np.random.default_rng(0).random((4, 6, 6, 3)), spatial_ndim=2)
    assert fit_gaussian(data, 3).patch_shape == (3, 3, 3)
    assert fit_gaussian(data, 3, spans_channels=False).patch_shape == (3, 3)


def test_dataset_too_small():
    with pytest.raises(DatasetTooSmall):
        fit_gaussian(ReferenceDataset(np.zeros((2, 3, 3))), 4)
    with pytest.raises(DatasetTooSmall):
        ReferenceDataset(np.zeros((0, 3, 3)))


def test_fit_is_reproducible():
    data = ReferenceDataset(np.random.default_rng(3).random((50, 10, 10)))
    a = fit_gaussian(data, 3, max_patches=500, rng_seed=9)
    b = fit_gaussian(data, 3, max_patches=500, rng_seed=9)
    assert np.array_equal(a.covariance, b.covariance)


# conditional sampling ----------------------------------------------------------


def _smooth_dataset(n=200, size=8, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.random((n, 1, 1))
    return ReferenceDataset(np.clip(base + 0.05 * rng.standard_normal((n, size, size)), 0, 1))


def test_conditional_sampler_returns_s_vectors_of_window_size():
    data = _smooth_dataset()
    model = fit_gaussian(data, 4)
    g = PatchGeometry.cubic(2, 4, 2)
    window = enumerate_windows((8, 8), g)[10]
    draws = sample_conditional(model, window, data.tensor(0), SamplingConfig(), g)
    assert draws.shape == (10, 4)


def test_near_zero_covariance_samples_sit_on_the_mean():
    eps = 1e-8
    model = GaussianPatchModel((3,), np.full(3, 0.5), np.zeros((3, 3)), eps)
    g = PatchGeometry((1,), (3,))
    image = ImageTensor(np.array([0.2, 0.9, 0.4]))
    w = WindowIndex((1,), (0,))
    draws = sample_conditional(model, w, image, SamplingConfig(50, 1), g)
    mean, _ = conditional_distribution(model, w.inner_mask(g), image.data)
    assert np.all(np.abs(draws - mean) <= 3 * np.sqrt(eps))


def test_monte_carlo_moments_match_conditional():
    rng = np.random.default_rng(4)
    cov = random_spd(rng, 4) * 0.01
    model = GaussianPatchModel((4,), np.full(4, 0.5), cov, 0.0)
    g = PatchGeometry((2,), (4,))
    image = ImageTensor(np.array([0.3, 0.5, 0.6, 0.7]), value_range=(-np.inf, np.inf))
    w = WindowIndex((1,), (0,))
    draws = sample_conditional(model, w, image, SamplingConfig(10000, 3, clip_to_range=False), g)
    mean, cond = conditional_distribution(model, w.inner_mask(g), image.data)
    stderr = np.sqrt(np.diag(cond) / len(draws))
    assert np.all(np.abs(draws.mean(0) - mean) < 3 * stderr)
    assert np.allclose(np.cov(draws, rowvar=False), cond, rtol=0.1, atol=1e-5)


def test_conditional_draws_are_clipped_and_reproducible():
    model = GaussianPatchModel((2,), np.array([0.5, 0.5]), np.eye(2) * 4.0, 0.0)
    g = PatchGeometry((1,), (2,))
    image = ImageTensor(np.array([0.5, 0.5]))
    w = WindowIndex((0,), (0,))
    a = sample_conditional(model, w, image, SamplingConfig(200, 5), g)
    b = sample_conditional(model, w, image, SamplingConfig(200, 5), g)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, b)


def test_conditional_sampler_rejects_mismatched_patch():
    model = fit_gaussian(_smooth_dataset(), 3)
    g = PatchGeometry.cubic(2, 4, 2)
    w = enumerate_windows((8, 8), g)[0]
    with pytest.raises(Exception, match="fitted on patches"):
        ConditionalSampler(model).draw(_smooth_dataset().tensor(0), w, g, 3, np.random.default_rng(0))


# marginal sampling -------------------------------------------------------------


def test_single_image_dataset_always_returns_its_window():
    img = np.random.default_rng(0).random((6, 6))
    data = ReferenceDataset(img[None])
    g = PatchGeometry.cubic(2, 2, 2)
    w = WindowIndex((3, 1), (3, 1))
    draws = sample_marginal(data, w, SamplingConfig(), g)
    assert np.all(draws == img[3:5, 1:3].ravel())


def test_two_constant_images_average_one_half():
    data = ReferenceDataset(np.stack([np.zeros((4, 4)), np.ones((4, 4))]))
    g = PatchGeometry.cubic(1, 1, 2)
    draws = sample_marginal(data, WindowIndex((2, 2), (2, 2)), SamplingConfig(4000, 12), g)
    assert abs(draws.mean() - 0.5) < 0.05


def test_marginal_window_length_and_verbatim_values():
    imgs = np.random.default_rng(1).random((7, 10, 10))
    data = ReferenceDataset(imgs)
    g = PatchGeometry.cubic(3, 3, 2)
    draws = sample_marginal(data, WindowIndex((5, 5), (5, 5)), SamplingConfig(30, 2), g)
    assert draws.shape == (30, 9)
    windows = {tuple(imgs[i, 5:8, 5:8].ravel()) for i in range(7)}
    assert all(tuple(d) in windows for d in draws)


def test_marginal_colour_windows_carry_channels():
    imgs = np.random.default_rng(1).random((3, 5, 5, 3))
    data = ReferenceDataset(imgs, spatial_ndim=2)
    g = PatchGeometry.cubic(2, 2, 2)
    draws = MarginalSampler(data).draw(data.tensor(0), WindowIndex((1, 1), (1, 1)), g, 4, np.random.default_rng(0))
    assert draws.shape == (4, 12)


def test_exhaustive_marginal_returns_every_image_once():
    imgs = np.arange(5.0)[:, None, None] * np.ones((5, 3, 3)) / 5
    data = ReferenceDataset(imgs)
    draws = MarginalSampler(data, exhaustive=True).draw(
        data.tensor(0), WindowIndex((0, 0), (0, 0)), PatchGeometry.cubic(1, 1, 2), 2, np.random.default_rng(0)
    )
    assert sorted(draws.ravel().tolist()) == (np.arange(5) / 5).tolist()


def test_marginal_shape_mismatch():
    data = ReferenceDataset(np.zeros((2, 4, 4)))
    with pytest.raises(Exception, match="reference images have shape"):
        MarginalSampler(data).draw(ImageTensor(np.zeros((5, 5))), WindowIndex((0, 0), (0, 0)),
                                   PatchGeometry.cubic(1, 1, 2), 1, np.random.default_rng(0))


# location grid -----------------------------------------------------------------


def test_cell_of_maps_every_position_to_one_cell():
    assert cell_of((0, 19), (20, 20), (4, 4)) == (0, 3)
    cells = {cell_of((r, c), (7, 5), (3, 2)) for r in range(7) for c in range(5)}
    assert cells == {(a, b) for a in range(3) for b in range(2)}


def test_grid_of_twenty_cubed_has_8000_cells():
    model = GaussianPatchModel((1,), np.zeros(1), np.eye(1), 0.0)
    assert LocationGrid((20, 20, 20), (40, 40, 40), model).num_cells == 8000


def test_single_cell_grid_matches_global_fit(tmp_path):
    data = _smooth_dataset()
    grid = fit_location_grid(data, 3, 1, rng_seed=4)
    glob = fit_gaussian(data, 3, rng_seed=4)
    assert np.array_equal(grid.model_for((2, 2)).covariance, glob.covariance)
    save_sampler(tmp_path / "a", grid, seed=4)
    save_sampler(tmp_path / "b", glob, seed=4)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_top_and_bottom_cells_learn_their_halves():
    imgs = np.zeros((60, 8, 8))
    imgs[:, 4:] = 1.0
    imgs = np.clip(imgs + 0.01 * np.random.default_rng(0).standard_normal(imgs.shape), 0, 1)
    grid = fit_location_grid(ReferenceDataset(imgs), 1, (2, 1))
    top, bottom = grid.model_for((0, 0)), grid.model_for((7, 3))
    assert top is not grid.global_model and bottom is not grid.global_model
    assert np.all(np.abs(top.mean) < 0.05)
    assert np.all(np.abs(bottom.mean - 1) < 0.05)


def test_sparse_cells_fall_back_to_global_model():
    data = ReferenceDataset(np.random.default_rng(0).random((2, 6, 6)))
    grid = fit_location_grid(data, 3, (4, 4))
    assert grid.cells == {}
    assert grid.model_for((1, 1)) is grid.global_model


def test_sampler_file_round_trip(tmp_path):
    data = _smooth_dataset()
    grid = fit_location_grid(data, 2, (2, 2))
    save_sampler(tmp_path / "s", grid, seed=3, reference_images=len(data))
    back, header = load_sampler(tmp_path / "s")
    assert header["grid_dims"] == [2, 2] and header["reference_images"] == 200 and header["seed"] == 3
    assert sorted(back.cells) == sorted(grid.cells)
    for c, m in grid.cells.items():
        assert back.cells[c].mean.tobytes() == m.mean.tobytes()
        assert back.cells[c].covariance.tobytes() == m.covariance.tobytes()
    save_sampler(tmp_path / "t", back, seed=3, reference_images=len(data))
    assert (tmp_path / "s").read_bytes() == (tmp_path / "t").read_bytes()
