import numpy as np
import pytest
from scipy.stats import spearmanr

from prognosisex import data as D
from prognosisex.pgm import ImageFormatError, from_uint8, read_pgm, to_uint8, write_pgm


@pytest.fixture(scope="module")
def cases():
    return D.generate_dataset(0, D.SyntheticConfig(n_cases=120))


def test_generation_is_deterministic(cases):
    again = D.generate_dataset(0, D.SyntheticConfig(n_cases=120))
    for a, b in zip(cases, again):
        np.testing.assert_array_equal(a.slices, b.slices)
    other = D.generate_case(1, cases[0].label, case_id=cases[0].case_id)
    assert not np.array_equal(other.slices, cases[0].slices)


def test_labels_follow_rule_and_prior(cases):
    cfg = D.SyntheticConfig(n_cases=120)
    assert all(D.planted_rule(c.factors, cfg) == c.label for c in cases)
    assert sum(c.label for c in cases) == round(120 * cfg.prior_class1)


def test_slices_are_in_range(cases):
    x = cases[0].slices
    assert x.shape == (4, 16, 16) and x.dtype == np.float32
    assert x.min() >= -1 and x.max() <= 1


def test_bad_label_rejected():
    with pytest.raises(D.DataError):
        D.generate_case(0, 2)


def test_factor_ranges_validate():
    with pytest.raises(D.DataError):
        D.FactorRanges(opacity=(0.5, 1.2)).validate()


def test_measured_factors_track_ground_truth(cases):
    truth = np.concatenate([c.factors for c in cases])
    est = np.array([D.measure_factors(s).as_array() for c in cases for s in c.slices])
    for k, name in enumerate(D.FACTOR_NAMES):
        rho = spearmanr(truth[:, k], est[:, k])[0]
        assert rho >= 0.8, (name, rho)


def test_measure_blank_image_is_degenerate():
    f = D.measure_factors(np.full((16, 16), -1.0))
    assert f.degenerate and f.lung_area == 0.0


def test_pgm_round_trip(tmp_path):
    img = np.array([[-1.0, 0.0], [0.5, 1.0]])
    g = to_uint8(img)
    np.testing.assert_array_equal(g, [[0, 128], [191, 255]])
    write_pgm(tmp_path / "a.pgm", g)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), g)
    assert np.abs(from_uint8(g) - img).max() <= 1 / 127.5


def test_pgm_rejects_colour_and_wide(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ImageFormatError):
        read_pgm(tmp_path / "c.ppm")
    (tmp_path / "w.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ImageFormatError):
        read_pgm(tmp_path / "w.pgm")
    with pytest.raises(ImageFormatError):
        write_pgm(tmp_path / "f.pgm", np.zeros((2, 2)))


def test_write_read_dataset(cases, tmp_path):
    manifest = D.write_dataset(cases[:5], tmp_path, {c.case_id: "train" for c in cases[:5]})
    back = D.read_manifest(tmp_path / "manifest.csv")
    assert back.case_ids() == manifest.case_ids()
    assert len(back.rows) == 20
    loaded = D.load_case(back, cases[2].case_id)
    assert np.abs(loaded.slices - cases[2].slices).max() <= 1 / 127.5 + 1e-6
    assert loaded.label == cases[2].label
    np.testing.assert_array_equal(loaded.factors, cases[2].factors)


def test_split_is_stratified_and_disjoint(cases, tmp_path):
    manifest = D.write_dataset(cases, tmp_path)
    train, val, test = D.split_dataset(manifest, 0.2, seed=0, val_fraction=0.2)
    ids = [set(p.case_ids()) for p in (train, val, test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == 120 and len(ids[2]) == 24
    labels = manifest.labels()
    assert sum(labels[c] for c in ids[2]) == round(24 * 0.45)
    again = D.split_dataset(manifest, 0.2, seed=0, val_fraction=0.2)
    assert [p.case_ids() for p in again] == [p.case_ids() for p in (train, val, test)]


def test_split_too_small(tmp_path):
    manifest = D.write_dataset(D.generate_dataset(0, D.SyntheticConfig(n_cases=2)), tmp_path)
    with pytest.raises(D.DataError):
        D.split_dataset(manifest)


def test_load_external(tmp_path, cases):
    root = tmp_path / "ext"
    for c in cases[:2]:
        (root / c.case_id).mkdir(parents=True)
        for k, s in enumerate(c.slices):
            write_pgm(root / c.case_id / f"{k}.pgm", to_uint8(s))
    labels = tmp_path / "labels.csv"
    labels.write_text("case_id,label\n" + "".join(f"{c.case_id},{c.label}\n" for c in cases[:2]))
    m = D.load_external(root, labels)
    assert m.case_ids() == [cases[0].case_id, cases[1].case_id]
    assert D.load_case(m, cases[0].case_id).factors is None

    labels.write_text(f"case_id,label\n{cases[0].case_id},7\n")
    with pytest.raises(D.DataError, match="unknown label"):
        D.load_external(root, labels)
    labels.write_text("case_id,label\nnobody,1\n")
    with pytest.raises(D.DataError, match="missing"):
        D.load_external(root, labels)
    (root / cases[0].case_id / "0.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    labels.write_text(f"case_id,label\n{cases[0].case_id},1\n")
    with pytest.raises(D.DataError, match="colour"):
        D.load_external(root, labels)
