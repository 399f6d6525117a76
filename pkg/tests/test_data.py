import numpy as np
import pytest

from gppriv.data import (
    Dataset,
    PreprocRecipe,
    SplitSpec,
    apply,
    fit_pca,
    fit_pipeline,
    fit_standardizer,
    load_csv,
    parse_noise_law,
    save_csv,
    split,
    split_indices,
    synth_lupi,
)
from gppriv.exceptions import InputError


def dataset(n=30, d=4, dstar=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, d)) * [1, 5, 0.1, 2][:d] + 3, rng.integers(0, 2, n),
                   rng.normal(size=(n, dstar)))


# -- Dataset ------------------------------------------------------------------------

def test_dataset_validates_shapes_and_labels():
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 2)), [0, 1])
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 2)), [0, 1, 2])
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 2)), [0, 1, 1], np.zeros((2, 1)))
    with pytest.raises(InputError):
        Dataset(np.array([[np.nan, 1.0]]), [1])


def test_subset_keeps_alignment():
    d = dataset()
    s = d.subset([3, 1])
    np.testing.assert_array_equal(s.X, d.X[[3, 1]])
    np.testing.assert_array_equal(s.Xstar, d.Xstar[[3, 1]])
    np.testing.assert_array_equal(s.y, d.y[[3, 1]])


# -- CSV ------------------------------------------------------------------------------

def test_csv_roundtrip_is_exact(tmp_path):
    d = dataset()
    p = tmp_path / "d.csv"
    save_csv(d, p)
    e = load_csv(p)
    np.testing.assert_array_equal(e.X, d.X)
    np.testing.assert_array_equal(e.Xstar, d.Xstar)
    np.testing.assert_array_equal(e.y, d.y)
    assert e.priv_names == ["priv_0", "priv_1"]


def test_csv_minus_one_labels_and_no_privileged(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label,b\n1.0,-1,2\n3,1,4\n")
    d = load_csv(p)
    np.testing.assert_array_equal(d.y, [0, 1])
    np.testing.assert_array_equal(d.X, [[1, 2], [3, 4]])
    assert d.Xstar is None and d.feature_names == ["a", "b"]


@pytest.mark.parametrize("body,match", [
    ("a,label\n1,2\n", "label must be 0 or 1"),
    ("a,label\nx,1\n", "non-numeric"),
    ("a,label\n1\n", "expected 2 fields"),
    ("a,b\n1,2\n", "missing label column"),
    ("", "empty file"),
])
def test_csv_errors_name_the_location(tmp_path, body, match):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(InputError, match=match):
        load_csv(p)


def test_csv_header_only_without_labels(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b,priv_0\n")
    d = load_csv(p, require_label=False)
    assert d.n == 0 and d.d == 2 and d.d_star == 1


# -- standardization and PCA ----------------------------------------------------------

def test_standardized_training_split_has_zero_mean_unit_std():
    tr = dataset()
    out = apply(fit_standardizer(tr), tr)
    for M in (out.X, out.Xstar):
        np.testing.assert_allclose(M.mean(axis=0), 0, atol=1e-10)
        np.testing.assert_allclose(M.std(axis=0), 1, atol=1e-10)


def test_test_split_uses_training_statistics():
    d = dataset(60)
    tr, _, te = split(d, SplitSpec(40, 0, 1))
    rec = fit_standardizer(tr)
    out = apply(rec, te)
    step = rec.x_steps[0]
    np.testing.assert_allclose(out.X, (te.X - tr.X.mean(0)) / tr.X.std(0), atol=1e-12)
    assert step.mean.shape == (4,)


def test_standardizing_twice_is_identity():
    tr = dataset()
    once = apply(fit_standardizer(tr), tr)
    twice = apply(fit_standardizer(once), once)
    np.testing.assert_allclose(twice.X, once.X, atol=1e-10)


def test_zero_variance_feature_dropped_with_warning():
    X = np.c_[np.arange(5.0), np.full(5, 2.0)]
    tr = Dataset(X, [0, 1, 0, 1, 1])
    with pytest.warns(UserWarning, match="zero-variance"):
        rec = fit_standardizer(tr)
    assert rec.warnings and apply(rec, tr).d == 1


def test_pca_full_rank_is_rotation():
    tr = Dataset(np.random.default_rng(2).normal(size=(20, 5)), np.zeros(20, int))
    Z = apply(fit_pca(tr, 5), tr).X
    D = lambda A: np.sum((A[:, None] - A[None]) ** 2, -1)  # noqa: E731
    np.testing.assert_allclose(D(Z), D(tr.X), atol=1e-8)


def test_pca_rank_one_explains_everything():
    t = np.linspace(-1, 1, 10)[:, None]
    tr = Dataset(t @ np.array([[1.0, 2.0, -1.0]]), np.zeros(10, int))
    step = fit_pca(tr, 1).x_steps[0]
    assert step.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-10)


def test_pca_reconstruction_with_all_components():
    X = np.random.default_rng(3).normal(size=(20, 5))
    step = fit_pca(Dataset(X, np.zeros(20, int)), 5).x_steps[0]
    np.testing.assert_allclose(step.inverse(step.apply(X)), X, atol=1e-8)


def test_pca_k_validated():
    with pytest.raises(InputError):
        fit_pca(dataset(), 0)
    with pytest.raises(InputError):
        fit_pca(dataset(n=3), 3)


def test_pipeline_order_and_skips_small_domains():
    tr = dataset(30, 4, 2)
    rec = fit_pipeline(tr, pca_k=3)
    assert rec.order == {"x": ["standardize", "pca", "standardize"], "xstar": ["standardize"]}
    out = apply(rec, tr)
    assert out.d == 3 and out.d_star == 2
    np.testing.assert_allclose(out.X.std(0), 1, atol=1e-10)


def test_recipe_serialization_roundtrip():
    tr = dataset()
    rec = fit_pipeline(tr, pca_k=2)
    back = PreprocRecipe.from_dict(rec.to_dict())
    assert back.recipe_id == rec.recipe_id
    np.testing.assert_allclose(apply(back, tr).X, apply(rec, tr).X)


def test_recipe_rejects_wrong_width():
    rec = fit_standardizer(dataset())
    with pytest.raises(InputError):
        apply(rec, Dataset(np.zeros((2, 3)), [0, 1]))


# -- splits ------------------------------------------------------------------------

def test_split_is_seeded_partition():
    a = split_indices(50, SplitSpec(20, 10, 7))
    b = split_indices(50, SplitSpec(20, 10, 7))
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    assert sorted(np.concatenate(a).tolist()) == list(range(50))
    assert [len(p) for p in a] == [20, 10, 20]
    c = split_indices(50, SplitSpec(20, 10, 8))
    assert not np.array_equal(a[0], c[0])


def test_split_too_large():
    with pytest.raises(InputError):
        split_indices(10, SplitSpec(8, 3))


# -- synthetic data ------------------------------------------------------------------

def test_noise_laws():
    rng = np.random.default_rng(0)
    assert set(parse_noise_law("bimodal:0.1,5")(rng, 100)) == {0.1, 5.0}
    assert np.all(parse_noise_law(0.3)(rng, 4) == 0.3)
    u = parse_noise_law("uniform:1,2")(rng, 100)
    assert u.min() >= 1 and u.max() <= 2
    with pytest.raises(InputError):
        parse_noise_law("gauss:1")


def test_synth_is_seeded():
    a, b = synth_lupi(50, seed=4), synth_lupi(50, seed=4)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)


def test_synth_high_noise_flips_more_labels():
    d, lat = synth_lupi(4000, d=3, noise_law="bimodal:0.1,5.0", seed=1, return_latent=True)
    flipped = d.y != lat["clean"]
    hi, lo = lat["s"] == 5.0, lat["s"] == 0.1
    assert flipped[hi].mean() > flipped[lo].mean()
    # the privileged feature separates the two noise groups
    assert d.Xstar[hi, 0].min() > d.Xstar[lo, 0].max()
