from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchforge.archspec import (
    ArchError,
    ArchSpec,
    InsufficientInputError,
    LayerSpec,
    PRESETS,
    RFProfile,
    ResolutionMismatchError,
    brute_force_rf,
    cell_assignment,
    compute_rf_profile,
    feature_size,
    load_arch,
    output_size,
    parse_arch,
    preset,
    random_chain,
    rf_center,
)
from patchforge.puzzle import GridSpec


def conv(k, s=1, p=0, name="c"):
    return LayerSpec(name, "conv", k, s, p, 1)


class TestProfile:
    def test_single_conv(self):
        assert compute_rf_profile([conv(3, 1, 1)]) == RFProfile(3, 1, 1)

    @pytest.mark.parametrize("name,rf,stride", [("alexnet", 195, 32), ("vgg16", 212, 32), ("resnet101", 1027, 32)])
    def test_table1_presets(self, name, rf, stride):
        prof = compute_rf_profile(preset(name))
        assert (prof.rf, prof.effective_stride) == (rf, stride)

    def test_tinyfcn(self):
        arch = preset("tinyfcn")
        assert len(arch.layers) == 10
        assert compute_rf_profile(arch) == RFProfile(187, 32, 93)

    def test_empty_is_rejected(self):
        with pytest.raises(ArchError):
            compute_rf_profile([])

    def test_stride_is_product(self):
        arch = preset("vgg16")
        assert compute_rf_profile(arch).effective_stride == np.prod([l.stride for l in arch.layers])

    @given(st.lists(st.tuples(st.integers(1, 7), st.integers(1, 3), st.integers(0, 3)), min_size=1, max_size=6),
           st.integers(0, 6), st.integers(1, 7))
    def test_stride_one_layer_keeps_s0(self, spec, where, k):
        layers = [conv(a, b, c) for a, b, c in spec]
        extra = layers[:where] + [conv(k, 1, 0)] + layers[where:]
        assert compute_rf_profile(extra).effective_stride == compute_rf_profile(layers).effective_stride


class TestCenter:
    def test_direct_substitution(self):
        assert rf_center(RFProfile(7, 4, 0), 0, 0) == (3, 3)

    def test_tinyfcn(self):
        prof = RFProfile(187, 32, 93)
        assert rf_center(prof, 0, 0) == (0, 0)
        assert rf_center(prof, 1, 0) == (32, 0)

    def test_even_rf_is_exact(self):
        h, _ = rf_center(RFProfile(4, 2, 0), 0, 0)
        assert h == Fraction(3, 2)

    @given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 100), st.integers(0, 50), st.integers(0, 50))
    def test_affine_in_index(self, r, s, p, i, j):
        prof = RFProfile(r, s, p)
        h0, v0 = rf_center(prof, i, j)
        h1, v1 = rf_center(prof, i + 1, j)
        assert (h1 - h0, v1 - v0) == (s, 0)


class TestBruteForce:
    def test_two_strided_convs(self):
        assert brute_force_rf([conv(3, 2), conv(3, 2)], 41).rf == 7

    def test_single_conv(self):
        assert brute_force_rf([conv(5)], 21).rf == 5

    def test_too_small(self):
        with pytest.raises(InsufficientInputError):
            brute_force_rf([conv(5)], 5)

    @pytest.mark.parametrize("name", ["alexnet", "vgg16", "tinyfcn"])
    def test_presets(self, name):
        arch = preset(name)
        prof = compute_rf_profile(arch)
        bf = brute_force_rf(arch, 2 * prof.rf + 4 * prof.effective_stride + 1)
        assert bf.rf == prof.rf
        for o, c in bf.centers.items():
            assert c == rf_center(prof, o, 0)[0]

    def test_random_chains(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            layers = random_chain(rng)
            prof = compute_rf_profile(layers)
            bf = brute_force_rf(layers, 2 * prof.rf + 4 * prof.effective_stride + 8)
            assert bf.rf == prof.rf
            assert bf.centers, layers
            for o, c in bf.centers.items():
                assert c == rf_center(prof, o, o)[1]


class TestCellAssignment:
    def test_tinyfcn_576(self):
        a = cell_assignment(preset_profile("tinyfcn"), (576, 576), GridSpec(3))
        assert a.shape == (18, 18)
        assert np.bincount(a.ravel()).tolist() == [36] * 9
        # 6x6 blocks
        assert (a[:6, :6] == 0).all() and (a[12:, 12:] == 8).all()

    def test_tinyfcn_960_g5(self):
        a = cell_assignment(preset_profile("tinyfcn"), (960, 960), GridSpec(5))
        assert a.shape == (30, 30)
        assert np.bincount(a.ravel()).tolist() == [36] * 25

    def test_non_overlapping(self):
        a = cell_assignment(RFProfile(8, 8, 0), (40, 40), GridSpec(5))
        assert np.bincount(a.ravel()).tolist() == [1] * 25
        assert a.ravel().tolist() == list(range(25))

    def test_mismatch_names_cell(self):
        # centers 30, 40, 50 of a 90 px input all land in the middle cell row
        with pytest.raises(ResolutionMismatchError, match="cell 0"):
            cell_assignment(RFProfile(61, 10, 0), (90, 90), GridSpec(3))

    def test_too_few_features(self):
        with pytest.raises(ResolutionMismatchError):
            cell_assignment(preset_profile("tinyfcn"), (64, 64), GridSpec(3))

    @given(st.integers(1, 64), st.sampled_from([1, 2, 4, 8, 16, 32]), st.integers(0, 40), st.integers(48, 400))
    @settings(max_examples=60)
    def test_partition(self, r, s, p, size):
        prof = RFProfile(r, s, p)
        grid = GridSpec(3)
        try:
            a = cell_assignment(prof, (size, size), grid)
        except ResolutionMismatchError:
            return
        hf = feature_size(prof, size)
        assert a.shape == (hf, hf)
        assert set(np.unique(a)) == set(range(9))


def preset_profile(name):
    return compute_rf_profile(preset(name))


class TestArchFiles:
    def test_parse_with_blocks(self):
        text = """
        # toy
        input 1
        a conv 3 1 1 4
        block
        b conv 3 2 1 4
        block
        c pool 2 2 0
        block
        d conv 3 2 1 8
        block
        e conv 1 2 0 8
        """
        arch = parse_arch(text)
        assert arch.block_boundaries == (0, 1, 2, 3, 4)
        assert arch.input_channels == 1
        assert arch.channels() == [4, 4, 4, 8, 8]
        assert parse_arch(arch.to_text()) == arch

    def test_block_must_start_strided(self):
        with pytest.raises(ArchError, match="stride 1"):
            ArchSpec((conv(3), conv(3), conv(3), conv(3), conv(3)), (0, 1, 2, 3, 4))

    def test_bad_line(self):
        with pytest.raises(ArchError, match="line 1"):
            parse_arch("a conv 3 1\n")

    def test_pool_has_no_channels(self):
        with pytest.raises(ArchError):
            LayerSpec("p", "pool", 2, 2, 0, 8)

    @pytest.mark.parametrize("name", PRESETS)
    def test_presets_roundtrip(self, name):
        arch = preset(name)
        assert parse_arch(arch.to_text(), name) == arch
        assert load_arch(f"presets/{name}.arch") == arch

    def test_output_size_matches_feature_size(self):
        arch = preset("tinyfcn")
        prof = compute_rf_profile(arch)
        for size in (96, 192, 576, 960, 100, 130):
            assert output_size(arch, size) == feature_size(prof, size)
