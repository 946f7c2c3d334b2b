import numpy as np
import pytest

from raedsi.artifacts import (MissingArtifactError, load_pca, load_rae, read_ensemble_csv, read_latent_csv,
                              read_observations, save_pca, save_rae, write_ensemble_csv, write_latent_csv,
                              write_observations)
from raedsi.core import ObservationSet, SchemaError, make_rng
from raedsi.pcaht import fit_pca_ht
from raedsi.rae import init_weights, normalization_bounds


def test_ensemble_round_trip_is_exact(tmp_path, small_ensemble):
    write_ensemble_csv(tmp_path / "e.csv", small_ensemble)
    back = read_ensemble_csv(tmp_path / "e.csv")
    assert back.schema == small_ensemble.schema
    np.testing.assert_array_equal(back.values, small_ensemble.values)
    write_ensemble_csv(tmp_path / "f.csv", back)
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "f.csv").read_bytes()


def test_ensemble_csv_rejects_ragged(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("quantity,time,member_0\nA,1,2.0\nA,2\n")
    with pytest.raises(SchemaError):
        read_ensemble_csv(p)


def test_observations_round_trip(tmp_path):
    obs = ObservationSet([(0, 1), (2, 3)], [1.5, 0.1 + 0.2], [0.3, 1e-7])
    write_observations(tmp_path / "o.json", obs)
    back = read_observations(tmp_path / "o.json")
    np.testing.assert_array_equal(back.entries, obs.entries)
    np.testing.assert_array_equal(back.values, obs.values)
    np.testing.assert_array_equal(back.error_std, obs.error_std)


def test_latent_round_trip(tmp_path):
    xi = make_rng(1).normal(size=(7, 4))
    write_latent_csv(tmp_path / "l.csv", xi)
    np.testing.assert_array_equal(read_latent_csv(tmp_path / "l.csv"), xi)


@pytest.mark.parametrize("histogram", [True, False])
def test_pca_round_trip_decodes_identically(tmp_path, small_ensemble, histogram):
    param = fit_pca_ht(small_ensemble, n_latent=5, histogram=histogram)
    save_pca(tmp_path / "basis", param)
    back = load_pca(tmp_path / "basis")
    assert back.tag == param.tag and back.n_latent == 5
    xi = make_rng(2).normal(size=(6, 5))
    np.testing.assert_array_equal(back.decode(xi), param.decode(xi))
    np.testing.assert_array_equal(back.encode(small_ensemble), param.encode(small_ensemble))


def test_rae_round_trip(tmp_path, small_schema, small_ensemble):
    w = init_weights(3, small_schema.n_t, 5, 2, make_rng(3))
    w.norm_min, w.norm_max = normalization_bounds(small_ensemble.values)
    save_rae(tmp_path / "rae", w, {"epochs": 3}, small_schema)
    back, schema = load_rae(tmp_path / "rae")
    assert schema == small_schema
    assert back.names() == w.names()
    np.testing.assert_array_equal(back.flat(), w.flat())
    np.testing.assert_array_equal(back.norm_min, w.norm_min)


def test_rae_version_checked(tmp_path, small_schema):
    w = init_weights(3, small_schema.n_t, 4, 2, make_rng(3))
    w.norm_min, w.norm_max = np.zeros(3), np.ones(3)
    save_rae(tmp_path / "rae", w)
    p = tmp_path / "rae.json"
    p.write_text(p.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(SchemaError, match="version"):
        load_rae(tmp_path / "rae")


def test_missing_files(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_ensemble_csv(tmp_path / "nope.csv")
    with pytest.raises(MissingArtifactError):
        load_rae(tmp_path / "nope")
