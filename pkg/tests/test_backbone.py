import numpy as np
import pytest

from groupprompt.backbone import (Backbone, BackboneConfig, PromptBank, WindowAttention,
                                  patch_embed, window_attention_with_prompts)
from groupprompt.errors import ShapeError
from groupprompt.nn import Linear
from groupprompt.optim import Adam
from groupprompt.rng import Rng
from groupprompt.tensor import Tensor, grad_check

from conftest import leaf, weighted


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def window_oracle(tokens, prompts, attn, m):
    """Loop over windows; plain numpy attention on [window tokens; prompts]."""
    b, h, w, d = tokens.shape
    g = 0 if prompts is None else prompts.shape[1]
    heads = attn.heads
    dh = d // heads
    wqkv, bqkv = attn.qkv.weight.value, attn.qkv.bias.value
    wo, bo = attn.proj.weight.value, attn.proj.bias.value
    out = np.zeros_like(tokens)
    pout = np.zeros((b, g, d))
    n_win = (h // m) * (w // m)
    for i in range(b):
        for r in range(0, h, m):
            for c in range(0, w, m):
                x = tokens[i, r:r + m, c:c + m].reshape(m * m, d)
                if g:
                    x = np.concatenate([x, prompts[i]], axis=0)
                qkv = x @ wqkv + bqkv
                q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
                heads_out = []
                for hd in range(heads):
                    s = slice(hd * dh, (hd + 1) * dh)
                    p = _softmax(q[:, s] @ k[:, s].T / np.sqrt(dh))
                    heads_out.append(p @ v[:, s])
                y = np.concatenate(heads_out, axis=-1) @ wo + bo
                out[i, r:r + m, c:c + m] = y[:m * m].reshape(m, m, d)
                if g:
                    pout[i] += y[m * m:] / n_win
    return out, pout


class TestPatchEmbed:
    def test_token_count(self):
        tokens = patch_embed(Tensor(np.zeros((8, 8, 3))), Linear(Rng(0), 48, 16), 4)
        assert tokens.shape == (4, 16)

    def test_zero_image_zero_bias(self):
        proj = Linear(Rng(0), 48, 16)
        proj.bias.value[...] = 0.0
        assert not patch_embed(Tensor(np.zeros((8, 8, 3))), proj, 4).value.any()

    def test_identity_projection_reproduces_patch(self, nprng):
        proj = Linear(Rng(0), 48, 48)
        proj.weight.value[...] = np.eye(48)
        proj.bias.value[...] = 0.0
        image = np.zeros((8, 8, 3))
        patch = nprng.random((4, 4, 3))
        image[4:8, 0:4] = patch            # patch row 1, col 0 -> token 2 in row-major order
        tokens = patch_embed(Tensor(image), proj, 4).value
        np.testing.assert_array_equal(tokens[2], patch.reshape(-1))
        assert not np.delete(tokens, 2, axis=0).any()

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            patch_embed(Tensor(np.zeros((10, 8, 3))), Linear(Rng(0), 48, 4), 4)


class TestWindowAttention:
    def setup_method(self):
        self.attn = WindowAttention(Rng(5), 8, 2)

    def test_no_prompts_matches_loop_oracle(self, nprng):
        x = nprng.normal(size=(2, 4, 4, 8))
        out, p = window_attention_with_prompts(Tensor(x), None, self.attn, 2)
        ref, _ = window_oracle(x, None, self.attn, 2)
        assert p is None
        np.testing.assert_allclose(out.value, ref, atol=1e-12)

    def test_zero_prompts_bitwise_equal_to_prompt_free(self, nprng):
        x = Tensor(nprng.normal(size=(1, 4, 4, 8)))
        plain, _ = window_attention_with_prompts(x, None, self.attn, 2)
        empty, _ = window_attention_with_prompts(x, Tensor(np.zeros((1, 0, 8))), self.attn, 2)
        assert plain.value.tobytes() == empty.value.tobytes()

    def test_prompts_match_loop_oracle(self, nprng):
        x = nprng.normal(size=(2, 4, 4, 8))
        g = nprng.normal(size=(2, 3, 8))
        out, p = window_attention_with_prompts(Tensor(x), Tensor(g), self.attn, 2)
        ref, pref = window_oracle(x, g, self.attn, 2)
        np.testing.assert_allclose(out.value, ref, atol=1e-12)
        np.testing.assert_allclose(p.value, pref, atol=1e-12)

    def test_single_window_prompt_rows(self, nprng):
        keep = []
        x = Tensor(nprng.normal(size=(1, 4, 4, 8)))
        window_attention_with_prompts(x, Tensor(nprng.normal(size=(1, 2, 8))), self.attn, 4, keep=keep)
        prob = keep[0].value
        assert prob.shape[-2:] == (18, 18)
        np.testing.assert_allclose(prob[..., 16:, :].sum(-1), 1.0, atol=1e-12)

    def test_indivisible_windows(self):
        with pytest.raises(ShapeError):
            window_attention_with_prompts(Tensor(np.zeros((1, 6, 4, 8))), None, self.attn, 4)

    def test_shifted_windows_keep_token_order(self, nprng):
        x = Tensor(nprng.normal(size=(1, 8, 8, 8)))
        shifted, _ = window_attention_with_prompts(x, Tensor(nprng.normal(size=(1, 2, 8))),
                                                   self.attn, 4, shift=2)
        assert shifted.shape == x.shape

    def test_shift_mask_blocks_wrapped_regions(self, nprng):
        """A token's output ignores tokens that were rolled in from the far side."""
        x = nprng.normal(size=(1, 8, 8, 8))
        base, _ = window_attention_with_prompts(Tensor(x), None, self.attn, 4, shift=2)
        y = x.copy()
        y[0, 0, 0] += 5.0      # wraps into the bottom-right window after the roll
        moved, _ = window_attention_with_prompts(Tensor(y), None, self.attn, 4, shift=2)
        # top-left pixel shares its rolled window with (6..7, 6..7) only through the mask region
        np.testing.assert_array_equal(moved.value[0, 6:8, 6:8], base.value[0, 6:8, 6:8])

    def test_gradients(self, nprng):
        g = nprng.normal(size=(1, 2, 8))
        x = leaf(nprng.normal(size=(1, 4, 4, 8)))
        f = lambda v: weighted(window_attention_with_prompts(v, Tensor(g), self.attn, 2, shift=0)[0])
        assert grad_check(f, x) < 1e-4
        p = leaf(g)
        f = lambda v: weighted(window_attention_with_prompts(Tensor(x.value), v, self.attn, 2)[1])
        assert grad_check(f, p) < 1e-4


class TestBackbone:
    cfg = BackboneConfig(patch_size=4, embed_dim=8, stages=2, blocks_per_stage=2,
                         window_size=2, heads=2, shift_windows=True)

    def test_grid_arithmetic(self):
        cfg = BackboneConfig(patch_size=4, embed_dim=16, stages=2, window_size=4)
        out = Backbone(cfg, Rng(0))(Tensor(np.zeros((1, 32, 32, 3))))
        assert out.shape == (1, 4, 4, 16)

    def test_validate(self):
        with pytest.raises(ShapeError):
            BackboneConfig(window_size=4, stages=2).validate(48, 48)
        with pytest.raises(ShapeError):
            BackboneConfig(embed_dim=30, heads=4).validate(32, 32)

    def test_deterministic(self, nprng):
        img = nprng.random((2, 16, 16, 3))
        a = Backbone(self.cfg, Rng(3))(Tensor(img), Tensor(Rng(1).normal((4, 8))))
        b = Backbone(self.cfg, Rng(3))(Tensor(img), Tensor(Rng(1).normal((4, 8))))
        assert a.value.tobytes() == b.value.tobytes()

    def test_attention_rows_sum_to_one(self, nprng):
        keep = []
        Backbone(self.cfg, Rng(0))(Tensor(nprng.random((1, 16, 16, 3))), Tensor(nprng.normal(size=(3, 8))), keep)
        assert len(keep) == 4
        for prob in keep:
            np.testing.assert_allclose(prob.value.sum(-1), 1.0, atol=1e-12)

    def test_frozen_output_depends_on_prompts(self, nprng):
        net = Backbone(self.cfg, Rng(0))
        net.freeze()
        img = Tensor(nprng.random((1, 16, 16, 3)))
        prompts = nprng.normal(size=(3, 8))
        base = net(img, Tensor(prompts)).value
        bumped = prompts.copy()
        bumped[1, 2] += 1e-4
        diff = (net(img, Tensor(bumped)).value - base) / 1e-4
        assert np.abs(diff).max() > 1e-6

    def test_prompt_depth_zero_equals_no_prompts(self, nprng):
        cfg = BackboneConfig(patch_size=4, embed_dim=8, window_size=2, prompt_depth=0)
        net = Backbone(cfg, Rng(0))
        img = Tensor(nprng.random((1, 16, 16, 3)))
        a = net(img, Tensor(nprng.normal(size=(3, 8)))).value
        assert a.tobytes() == net(img, None).value.tobytes()

    def test_step_changes_only_prompts(self, nprng):
        net = Backbone(self.cfg, Rng(0))
        net.freeze()
        bank = PromptBank(Rng(1), 3, 8)
        before = [p.value.copy() for p in net.parameters()]
        opt = Adam(net.parameters() + bank.parameters(), lr=1e-2)
        loss = weighted(net(Tensor(nprng.random((1, 16, 16, 3))), bank.prompts))
        prompts_before = bank.prompts.value.copy()
        loss.backward()
        opt.step()
        for b, p in zip(before, net.parameters()):
            assert b.tobytes() == p.value.tobytes()
        assert np.abs(bank.prompts.value - prompts_before).max() > 0

    def test_gradient_through_prompts(self, nprng):
        net = Backbone(self.cfg, Rng(2))
        img = Tensor(nprng.random((1, 16, 16, 3)))
        p = leaf(nprng.normal(size=(2, 8)))
        assert grad_check(lambda v: weighted(net(img, v)), p) < 1e-4
