import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbmm.exceptions import EmptyRegionError, ParseError
from qbmm.region_data import (
    ModelSpec, default_basis_ranks, load_region, load_regions, region_from_arrays, write_region,
)

from conftest import write_tsv

HEADER = ["Meth_Counts", "Total_Counts", "Position", "ID", "Z1"]


def test_single_row(tmp_path):
    p = write_tsv(tmp_path / "r.tsv", HEADER, [[5, 10, 101, "s1", 1]])
    reg = load_region(p)
    report = reg.report
    assert reg.n_samples == 1 and reg.n_obs == 1
    assert reg.flat_meth.tolist() == [5] and reg.flat_total.tolist() == [10]
    assert reg.flat_positions.tolist() == [101] and reg.covariates.tolist() == [[1.0]]
    assert report.rows_kept == 1


def test_zero_depth_dropped_and_reported(tmp_path):
    rows = [[5, 10, 101, "s1", 1], [0, 0, 102, "s1", 1]]
    reg = load_region(write_tsv(tmp_path / "r.tsv", HEADER, rows))
    report = reg.report
    assert reg.n_obs == 1
    assert report.zero_depth_rows == [3]


@pytest.mark.parametrize("row,needle", [
    ([11, 10, 101, "s1", 1], "exceeds"),
    ([2.5, 10, 101, "s1", 1], "not an integer"),
    ([-1, 10, 101, "s1", 1], "negative"),
    (["x", 10, 101, "s1", 1], "not an integer"),
])
def test_malformed_row_names_line(tmp_path, row, needle):
    rows = [[5, 10, 100, "s1", 1], row]
    with pytest.raises(ParseError) as ei:
        load_region(write_tsv(tmp_path / "r.tsv", HEADER, rows))
    assert ei.value.line == 3
    assert needle in str(ei.value)


def test_empty_region(tmp_path):
    with pytest.raises(EmptyRegionError):
        load_region(write_tsv(tmp_path / "r.tsv", HEADER, [[0, 0, 101, "s1", 1]]))


def test_missing_covariate_drops_sample(tmp_path):
    rows = [[5, 10, 101, "s1", 1], [3, 8, 101, "s2", "NA"]]
    reg = load_region(write_tsv(tmp_path / "r.tsv", HEADER, rows))
    report = reg.report
    assert reg.sample_ids == ("s1",)
    assert "s2" in report.dropped_samples


def test_inconsistent_covariates_rejected(tmp_path):
    rows = [[5, 10, 101, "s1", 1], [3, 8, 102, "s1", 0]]
    with pytest.raises(ParseError):
        load_region(write_tsv(tmp_path / "r.tsv", HEADER, rows))


def test_missing_header_column(tmp_path):
    with pytest.raises(ParseError):
        load_region(write_tsv(tmp_path / "r.tsv", ["Meth_Counts", "Position", "ID"], [[1, 2, "a"]]))


def test_multi_region_file(tmp_path):
    h = ["Region"] + HEADER
    rows = [["a", 5, 10, 101, "s1", 1], ["b", 1, 4, 7, "s1", 1], ["a", 2, 3, 102, "s1", 1]]
    regions = load_regions(write_tsv(tmp_path / "r.tsv", h, rows))
    assert sorted(regions) == ["a", "b"]
    assert regions["a"].n_obs == 2 and regions["b"].n_obs == 1


def test_default_ranks():
    class R:
        def __init__(self, n, k):
            self.distinct_positions = np.arange(n)
            self.n_covariates = k

    assert default_basis_ranks(R(123, 3), "simulation") == [5, 5, 5, 5]
    assert default_basis_ranks(R(100, 2), "real_data") == [10, 5, 5]
    assert default_basis_ranks(R(20, 1), "real_data") == [3, 3]


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(basis_ranks=(2, 5))
    with pytest.raises(Exception):
        ModelSpec(error_rates=(0.5, 0.5))
    with pytest.raises(ValueError):
        ModelSpec(tol=0.0)


@st.composite
def arrays(draw):
    n = draw(st.integers(1, 4))
    k = draw(st.integers(0, 2))
    sidx, pos, tot, meth = [], [], [], []
    for i in range(n):
        m = draw(st.integers(1, 6))
        ps = draw(st.lists(st.integers(0, 500), min_size=m, max_size=m, unique=True))
        for p in ps:
            x = draw(st.integers(1, 60))
            sidx.append(i)
            pos.append(p)
            tot.append(x)
            meth.append(draw(st.integers(0, x)))
    z = draw(st.lists(st.lists(st.sampled_from([0.0, 1.0, 0.25, 3.5]), min_size=k, max_size=k),
                      min_size=n, max_size=n))
    return sidx, pos, tot, meth, np.array(z, dtype=float).reshape(n, k)


@settings(max_examples=40, deadline=None)
@given(arrays())
def test_round_trip(tmp_path_factory, data):
    reg = region_from_arrays(*data)
    path = tmp_path_factory.mktemp("rt") / "r.tsv"
    write_region(reg, path)
    back = load_region(path)
    assert reg.same_as(back)


@settings(max_examples=40, deadline=None)
@given(arrays())
def test_kept_pairs_subset(tmp_path_factory, data):
    sidx, pos, tot, meth, z = data
    tot = [0 if k % 3 == 0 else x for k, x in enumerate(tot)]
    meth = [min(y, x) for y, x in zip(meth, tot)]
    path = tmp_path_factory.mktemp("sub") / "r.tsv"
    header = HEADER[:4] + [f"Z{p + 1}" for p in range(z.shape[1])]
    rows = [[y, x, p, f"s{i + 1}", *z[i]] for i, p, x, y in zip(sidx, pos, tot, meth)]
    write_tsv(path, header, rows)
    if all(x == 0 for x in tot):
        with pytest.raises(EmptyRegionError):
            load_region(path)
        return
    try:
        reg = load_region(path)
    except EmptyRegionError:
        return
    src = {(f"s{i + 1}", p) for i, p, x in zip(sidx, pos, tot) if x > 0}
    kept = {(reg.sample_ids[i], p) for i, p in zip(reg.sample_index, reg.flat_positions)}
    assert kept <= src
    assert np.all(reg.flat_total > 0)
