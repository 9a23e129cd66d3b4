import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwiseg import dti
from dwiseg.errors import ContextError, DataError, SelectionError, ValidationError
from dwiseg.features import (KINDS, RepresentationSpec, SliceDataset, build_representation,
                             center_channels, context_stack, extract_slices, read_sidecar,
                             rescale, write_sidecar)
from dwiseg.phantom import brain_phantom, make_phantom
from dwiseg.volume import LabelVolume, Volume, multishell_table


@pytest.fixture(scope="module")
def small():
    table = multishell_table((1000.0, 2000.0), 40, 4)
    ph = make_phantom(brain_phantom(5, 16, 5.0, 20.0), table)
    return ph, table


@given(st.sampled_from(KINDS), st.integers(6, 90))
def test_channel_count_formula(kind, n):
    spec = RepresentationSpec(kind, n)
    expected = {"B0_ONLY": 1, "B0_FA": 2, "B0_TENSOR": 7, "B0_DWI": 1 + n}[kind]
    assert spec.channel_count == expected


def test_parse():
    assert RepresentationSpec.parse("b0_tensor:12") == RepresentationSpec("B0_TENSOR", 12)
    assert RepresentationSpec.parse("B0_ONLY").name == "B0_ONLY"
    assert RepresentationSpec.parse("B0_TENSOR:all").shell_b is None
    assert RepresentationSpec.parse("B0_TENSOR:all").name == "B0_TENSOR:all"
    with pytest.raises(ValidationError):
        RepresentationSpec.parse("B0_DWI:all")
    with pytest.raises(ValidationError):
        RepresentationSpec.parse("T1")


def test_b0_only(small):
    ph, table = small
    rep, spec = build_representation(ph.dwi, table, RepresentationSpec("B0_ONLY"))
    assert rep.channels == 1
    b0 = ph.dwi.data[..., table.b0_indices()].astype(np.float64).mean(-1)
    lo, hi = np.percentile(b0, [0.5, 99.5])
    np.testing.assert_allclose(rep.data[..., 0], np.clip((b0 - lo) / (hi - lo), 0, 1), atol=1e-6)
    assert spec.normalization[0] == pytest.approx((lo, hi))


def test_tensor_channels_match_fit(small):
    ph, table = small
    rep, spec = build_representation(ph.dwi, table, RepresentationSpec("B0_TENSOR", 30))
    assert rep.channels == 7
    keep = sorted(table.b0_indices().tolist() + dti.select_directions(table, 1000.0, 30))
    fit = dti.fit_tensor(ph.dwi.select_channels(keep), table.subset(keep))
    for c in range(6):
        lo, hi = spec.normalization[c + 1]
        np.testing.assert_allclose(rep.data[..., c + 1], rescale(fit.components[..., c], lo, hi),
                                   atol=1e-6)


def test_dwi_channels_ascending(small):
    ph, table = small
    rep, _ = build_representation(ph.dwi, table, RepresentationSpec("B0_DWI", 30))
    assert rep.channels == 31
    dirs = dti.select_directions(table, 1000.0, 30)
    assert dirs == sorted(dirs)
    raw = ph.dwi.data[..., dirs[0]].astype(np.float64)
    lo, hi = np.percentile(raw, [0.5, 99.5])
    np.testing.assert_allclose(rep.data[..., 1], np.clip((raw - lo) / (hi - lo), 0, 1), atol=1e-6)


def test_fa_and_multishell(small):
    ph, table = small
    rep, _ = build_representation(ph.dwi, table, RepresentationSpec("B0_FA", 20))
    assert rep.channels == 2 and 0 <= rep.data.min() and rep.data.max() <= 1
    rep, _ = build_representation(ph.dwi, table, RepresentationSpec.parse("B0_TENSOR:all"))
    assert rep.channels == 7


def test_too_many_directions(small):
    ph, table = small
    with pytest.raises(SelectionError):
        build_representation(ph.dwi, table, RepresentationSpec("B0_TENSOR", 41))


def test_non_finite_rejected(small):
    ph, table = small
    data = np.array(ph.dwi.data)
    data[0, 0, 0, 0] = np.nan
    spec = RepresentationSpec("B0_ONLY", normalization=((0.0, 1.0),))
    with pytest.raises(DataError):
        build_representation(Volume(data, ph.dwi.affine), table, spec)


def test_normalisation_reuse_is_idempotent(small):
    ph, table = small
    rep, spec = build_representation(ph.dwi, table, RepresentationSpec("B0_TENSOR", 30))
    again, spec2 = build_representation(ph.dwi, table, spec)
    assert np.array_equal(again.data, rep.data) and spec2 == spec
    # rescaling already-normalised data with the recorded bounds is a fixed point
    for c, (lo, hi) in enumerate(spec.normalization):
        once = rescale(rep.data[..., c].astype(np.float64), 0.0, 1.0)
        np.testing.assert_array_equal(once, rep.data[..., c])
        assert np.all(rescale(rescale(np.linspace(lo - 1, hi + 1, 50), lo, hi), 0.0, 1.0)
                      == rescale(np.linspace(lo - 1, hi + 1, 50), lo, hi))


def test_sidecar(tmp_path, small):
    ph, table = small
    _, spec = build_representation(ph.dwi, table, RepresentationSpec("B0_DWI", 8))
    write_sidecar(tmp_path / "r.json", spec, table)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["channels"][0] == "b0_mean" and len(doc["channels"]) == 9
    assert read_sidecar(tmp_path / "r.json") == spec


# --- slicing ---

def volume_and_labels(shape=(6, 7, 8), c=3, seed=0):
    rng = np.random.default_rng(seed)
    rep = Volume(rng.random(shape + (c,)).astype(np.float32))
    lab = LabelVolume(rng.integers(0, 3, shape))
    return rep, lab, rng.random(shape)


@pytest.mark.parametrize("view", ["axial", "coronal", "sagittal"])
def test_extract_counts_and_reassembly(view):
    rep, lab, w = volume_and_labels()
    k = 2
    samples = extract_slices(rep, lab, w, view, k)
    axis = {"sagittal": 0, "coronal": 1, "axial": 2}[view]
    assert len(samples) == rep.dims[axis]
    assert samples[0].input.shape[0] == 3 * (2 * k + 1)
    assert np.array_equal(center_channels(samples, 3, k), rep.data)
    for s in samples:
        assert np.array_equal(s.label, np.take(lab.labels, s.index, axis=axis))


def test_64_cube_counts():
    rep = Volume(np.zeros((64, 64, 64, 2), np.float32))
    lab = LabelVolume(np.zeros((64, 64, 64), int))
    s = extract_slices(rep, lab, np.ones((64, 64, 64)), "axial", 3)
    assert len(s) == 64 and s[0].input.shape == (14, 64, 64)


def test_context_order_and_edge_replication():
    rep, lab, w = volume_and_labels()
    k = 3
    stack = context_stack(rep.data, "axial", k)
    # slice 0: offsets -3..-1 all equal slice 0; channel c occupies rows c*7 .. c*7+6
    for c in range(3):
        block = stack[0, c * 7:(c + 1) * 7]
        for j in range(4):
            assert np.array_equal(block[j], rep.data[:, :, 0, c])
        assert np.array_equal(block[5], rep.data[:, :, 2, c])
    mid = stack[4, 7:14]
    for j, off in enumerate(range(-3, 4)):
        assert np.array_equal(mid[j], rep.data[:, :, 4 + off, 1])


def test_context_error():
    rep, lab, w = volume_and_labels((4, 4, 4))
    with pytest.raises(ContextError):
        extract_slices(rep, lab, w, "axial", 4)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["axial", "coronal", "sagittal"]), st.integers(0, 3), st.integers(0, 99))
def test_dataset_matches_stack(view, k, seed):
    rep, lab, w = volume_and_labels((5, 6, 7), 2, seed)
    ds = SliceDataset([(rep.data, lab.labels, w)], view, k)
    stack = context_stack(rep.data, view, k)
    pos = list(range(len(ds)))[::-1]
    x, y, _ = ds.batch(pos)
    assert np.array_equal(x, stack[pos])
    assert ds.channels == stack.shape[1]
