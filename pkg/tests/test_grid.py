"""Token grid, layered mask, and sentinel substitution tests."""

import numpy as np
import pytest

from maskcodec.grid import (
    LayeredMask,
    MaskedGrid,
    TokenGrid,
    apply_mask,
    load_token_grid,
    masked_positions,
    save_token_grid,
)


def small_grid():
    tokens = np.array([[0, 5, 15], [3, 3, 3], [15, 0, 1], [7, 8, 9]])
    return TokenGrid(tokens=tokens, vocab_size=16)


class TestTokenGrid:
    def test_shape_properties(self):
        g = small_grid()
        assert g.num_frames == 4
        assert g.num_codebooks == 3
        assert g.frame_rate_hz == 50.0

    def test_tokens_are_frozen(self):
        g = small_grid()
        with pytest.raises(ValueError):
            g.tokens[0, 0] = 1

    def test_rejects_out_of_range_ids(self):
        with pytest.raises(ValueError):
            TokenGrid(tokens=np.array([[16]]), vocab_size=16)
        with pytest.raises(ValueError):
            TokenGrid(tokens=np.array([[-1]]), vocab_size=16)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            TokenGrid(tokens=np.zeros(4, dtype=np.int64), vocab_size=4)
        with pytest.raises(ValueError):
            TokenGrid(tokens=np.zeros((0, 3), dtype=np.int64), vocab_size=4)

    def test_rejects_bad_scalars(self):
        with pytest.raises(ValueError):
            TokenGrid(tokens=np.zeros((2, 2), dtype=np.int64), vocab_size=0)
        with pytest.raises(ValueError):
            TokenGrid(tokens=np.zeros((2, 2), dtype=np.int64), vocab_size=4, frame_rate_hz=0.0)


class TestLayeredMask:
    def test_layered_rule_enforced(self):
        # below target must be all ones
        keep = np.array([[0, 1, 0], [1, 1, 0]])
        with pytest.raises(ValueError):
            LayeredMask(keep=keep, target_layer=1)
        # above target must be all zeros
        keep = np.array([[1, 1, 1], [1, 0, 0]])
        with pytest.raises(ValueError):
            LayeredMask(keep=keep, target_layer=1)

    def test_valid_mask_accepted(self):
        keep = np.array([[1, 1, 0], [1, 0, 0], [1, 1, 0]])
        m = LayeredMask(keep=keep, target_layer=1)
        assert m.shape == (3, 3)

    def test_from_keep_row_layout(self):
        m = LayeredMask.from_keep_row([1, 0, 1], target_layer=1, num_codebooks=3)
        expected = np.array([[1, 1, 0], [1, 0, 0], [1, 1, 0]])
        np.testing.assert_array_equal(m.keep, expected)
        assert m.target_layer == 1

    def test_from_keep_row_edge_layers(self):
        lo = LayeredMask.from_keep_row([0, 0], target_layer=0, num_codebooks=2)
        np.testing.assert_array_equal(lo.keep, [[0, 0], [0, 0]])
        hi = LayeredMask.from_keep_row([1, 1], target_layer=1, num_codebooks=2)
        np.testing.assert_array_equal(hi.keep, [[1, 1], [1, 1]])

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            LayeredMask(keep=np.array([[2]]), target_layer=0)

    def test_rejects_out_of_range_layer(self):
        with pytest.raises(ValueError):
            LayeredMask(keep=np.ones((2, 2), dtype=np.int64), target_layer=2)


class TestApplyMask:
    def test_sentinel_substitution(self):
        g = small_grid()
        m = LayeredMask.from_keep_row([1, 0, 1, 0], target_layer=1, num_codebooks=3)
        masked = apply_mask(g, m)
        # layer 0 untouched, layer 2 all sentinel, layer 1 per keep_row
        np.testing.assert_array_equal(masked.tokens[:, 0], g.tokens[:, 0])
        assert (masked.tokens[:, 2] == 16).all()
        np.testing.assert_array_equal(masked.tokens[:, 1], [5, 16, 0, 16])

    def test_source_grid_untouched(self):
        g = small_grid()
        before = g.tokens.copy()
        m = LayeredMask.from_keep_row([0, 0, 0, 0], target_layer=0, num_codebooks=3)
        apply_mask(g, m)
        np.testing.assert_array_equal(g.tokens, before)

    def test_shape_mismatch_rejected(self):
        g = small_grid()
        m = LayeredMask.from_keep_row([1, 0], target_layer=0, num_codebooks=3)
        with pytest.raises(ValueError):
            apply_mask(g, m)

    def test_masked_grid_validates_sentinels(self):
        m = LayeredMask.from_keep_row([0, 1], target_layer=0, num_codebooks=1)
        # a hidden slot holding a real token id is rejected
        with pytest.raises(ValueError):
            MaskedGrid(tokens=np.array([[3], [3]]), mask=m, vocab_size=16)
        # the sentinel in a visible slot is rejected too
        with pytest.raises(ValueError):
            MaskedGrid(tokens=np.array([[16], [16]]), mask=m, vocab_size=16)
        MaskedGrid(tokens=np.array([[16], [3]]), mask=m, vocab_size=16)


class TestMaskedPositions:
    def test_target_layer_only_ascending(self):
        m = LayeredMask.from_keep_row([0, 1, 0, 0], target_layer=1, num_codebooks=3)
        assert masked_positions(m) == [(0, 1), (2, 1), (3, 1)]

    def test_fully_kept_layer_is_empty(self):
        m = LayeredMask.from_keep_row([1, 1], target_layer=2, num_codebooks=3)
        assert masked_positions(m) == []


class TestGridFile:
    def test_roundtrip(self, tmp_path):
        g = small_grid()
        p = tmp_path / "grid.json"
        save_token_grid(p, g)
        g2 = load_token_grid(p)
        np.testing.assert_array_equal(g2.tokens, g.tokens)
        assert g2.vocab_size == g.vocab_size
        assert g2.frame_rate_hz == g.frame_rate_hz

    def test_save_is_deterministic(self, tmp_path):
        g = small_grid()
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_token_grid(a, g)
        save_token_grid(b, g)
        assert a.read_bytes() == b.read_bytes()

    def test_load_rejects_missing_keys(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"tokens": [[0]], "vocab_size": 4}')
        with pytest.raises(ValueError):
            load_token_grid(p)

    def test_load_rejects_wrong_width(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(
            '{"frame_rate_hz": 50.0, "vocab_size": 4, "num_codebooks": 2, "tokens": [[0]]}'
        )
        with pytest.raises(ValueError):
            load_token_grid(p)

    def test_load_rejects_out_of_range_tokens(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(
            '{"frame_rate_hz": 50.0, "vocab_size": 4, "num_codebooks": 1, "tokens": [[4]]}'
        )
        with pytest.raises(ValueError):
            load_token_grid(p)
