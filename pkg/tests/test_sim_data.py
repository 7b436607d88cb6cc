from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from fedincr.engine import LabelMap, Variant
from fedincr.errors import PackingError, PretrainError, ShapeError
from fedincr.nn import ArchDescriptor
from fedincr.roi import dsc
from fedincr.sim.annotators import AnnotatorModel, boundary_pixels, make_annotator, oracle_refine
from fedincr.sim.phantoms import PROFILES, PhantomSpec, generate_phantom
from fedincr.sim.pretrain import pretrain, self_dsc

from conftest import phantoms
from oracles import disk


def test_phantom_deterministic():
    a = generate_phantom(PhantomSpec(), 11)
    b = generate_phantom(PhantomSpec(), 11)
    assert a[0].voxels.tobytes() == b[0].voxels.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()


def test_profiles_share_geometry():
    sa, ga = generate_phantom(PhantomSpec(profile="profile-A"), 12)
    sb, gb = generate_phantom(PhantomSpec(profile="profile-B"), 12)
    np.testing.assert_array_equal(ga.labels, gb.labels)
    assert not np.array_equal(sa.voxels, sb.voxels)
    assert sb.contrast_tag == "profile-B"


def test_noise_free_intensities_exact():
    prof = {"outside": 0.0, "tissue": 0.2, "regions": [0.8, 0.4, 0.6, 1.0]}
    stack, gold = generate_phantom(PhantomSpec(noise_sigma=0.0, intensities=prof), 13)
    assert (stack.voxels[gold.labels == 1] == np.float32(0.8)).all()
    assert (stack.voxels[gold.labels == 2] == np.float32(0.4)).all()


@pytest.mark.parametrize("variant", list(Variant))
def test_phantom_invariants(variant):
    spec = PhantomSpec(variant=variant, n_slices=7)
    stack, gold = generate_phantom(spec, 14)
    assert stack.voxels.shape[0] == 7 and gold.segmented_slices == set(range(7))
    width = 128 if variant is Variant.BOTH_LIMBS else 64
    assert stack.voxels.shape[1:] == (64, width)
    for s in range(7):
        lab = gold.labels[s]
        assert set(np.unique(lab)) == {0, 1, 2, 3, 4}
        # regions are separated: no two different classes touch (4-neighbourhood)
        for k in range(1, 5):
            grown = ndimage.binary_dilation(lab == k)
            assert not ((lab > 0) & (lab != k) & grown).any()


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(n_slices=3), 0)
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(n_regions=7), 0)


def test_infeasible_packing():
    with pytest.raises(PackingError):
        generate_phantom(PhantomSpec(size=(16, 16), n_regions=4, intensities=PROFILES["profile-A"]), 0)


def _disk_gold(r):
    g = np.zeros((1, 40, 40), np.uint8)
    g[0][disk((40, 40), 20, 20, r)] = 1
    return LabelMap(g, frozenset({0}))


def test_oracle_refine_modes():
    stack, gold = generate_phantom(PhantomSpec(), 15)
    auto = LabelMap(np.zeros_like(gold.labels), frozenset({1, 2, 3}))
    out = oracle_refine(auto, gold, AnnotatorModel("oracle"))
    np.testing.assert_array_equal(out.labels[[1, 2, 3]], gold.labels[[1, 2, 3]])
    assert out.segmented_slices == {1, 2, 3}
    assert (out.labels[0] == 0).all()  # untouched outside the session's slices
    noisy0 = oracle_refine(auto, gold, AnnotatorModel("noisy-oracle", 0.0, 3))
    np.testing.assert_array_equal(noisy0.labels, out.labels)
    assert make_annotator(gold)(auto, stack).labels.tobytes() == out.labels.tobytes()
    with pytest.raises(ShapeError):
        oracle_refine(LabelMap(np.zeros((1, 4, 4)), frozenset({0})), gold)


@pytest.mark.parametrize("r", [8, 10, 14])
@pytest.mark.parametrize("sigma", [0.5, 1.0])
def test_noisy_oracle_stays_close(r, sigma):
    gold = _disk_gold(r)
    auto = LabelMap(np.zeros_like(gold.labels), frozenset({0}))
    for seed in range(20):
        out = oracle_refine(auto, gold, AnnotatorModel("noisy-oracle", sigma, seed))
        assert dsc(out.labels[0] == 1, gold.labels[0] == 1) >= 0.9
        # only boundary pixels may change
        changed = out.labels[0] != gold.labels[0]
        assert not (changed & ~boundary_pixels(gold.labels[0])).any()
    a = oracle_refine(auto, gold, AnnotatorModel("noisy-oracle", sigma, 1))
    b = oracle_refine(auto, gold, AnnotatorModel("noisy-oracle", sigma, 1))
    np.testing.assert_array_equal(a.labels, b.labels)


def test_annotator_validation():
    with pytest.raises(ValueError):
        AnnotatorModel("human")
    with pytest.raises(ValueError):
        AnnotatorModel("noisy-oracle", -1.0)


def test_pretrain_reaches_target(pretrained):
    assert pretrained.version == 0 and pretrained.parent_version is None
    assert self_dsc(pretrained, phantoms("profile-A", range(1000, 1020))) >= 0.85


def test_pretrain_single_phantom_overfits():
    data = phantoms("profile-A", [77])
    pkg, score = pretrain(ArchDescriptor(), data, epochs=200, seed=0, target=0.95)
    assert score >= 0.95


def test_pretrain_zero_epochs_and_no_data():
    with pytest.raises(PretrainError):
        pretrain(ArchDescriptor(), phantoms("profile-A", [1]), epochs=0)
    with pytest.raises(PretrainError):
        pretrain(ArchDescriptor(), [], epochs=5)


def test_pretrain_below_floor():
    with pytest.raises(PretrainError):
        pretrain(ArchDescriptor(), phantoms("profile-A", [1, 2]), epochs=1, lr=1e-6)
