import math

import numpy as np
import pytest

from simulst import autodiff as ad
from simulst import data, model


def tiny_cfg(**kw):
    base = dict(
        d_feat=6,
        n_blocks=1,
        conv_lookahead=(0, 0, 1),
        transformer_layers_per_block=1,
        d_model=16,
        n_heads=2,
        ffn_dim=32,
        semantic_layers=1,
        decoder_layers=1,
        src_vocab_size=8,
        tgt_vocab_size=8,
        dropout=0.0,
        wait_k=2,
        stride_n=2,
    )
    base.update(kw)
    return model.ModelConfig(**base)


def tiny_corpus(n=6, seed=0, **kw):
    base = dict(
        vocab_size=5, feature_dim=6, frames_per_token=(2, 4), length_range=(2, 4),
        noise_std=0.05, seed=seed,
    )
    base.update(kw)
    return data.generate_synthetic_corpus(data.SyntheticTaskConfig(**base), n)


class TestConfig:
    def test_downsample_and_frame_ms(self):
        cfg = model.ModelConfig()
        assert cfg.downsample == 8
        assert cfg.output_frame_ms == 80

    def test_fingerprint_changes_with_config(self):
        a = model.ModelConfig().fingerprint()
        b = model.ModelConfig(d_model=128).fingerprint()
        assert a != b and len(a) == 16

    def test_bad_heads_rejected(self):
        with pytest.raises(ValueError):
            model.ModelConfig(d_model=30, n_heads=4)


class TestLookahead:
    def test_no_lookahead_is_zero_ms(self):
        cfg = model.ModelConfig(conv_lookahead=(0, 0, 0))
        assert model.effective_lookahead_ms(cfg) == 0

    def test_paper_architecture_is_140ms(self):
        cfg = model.ModelConfig()  # 3 blocks, lookahead on each block's third conv
        assert model.effective_lookahead_ms(cfg) == 140

    def test_single_conv_stack(self):
        cfg = model.ModelConfig(n_blocks=1, convs_per_block=2, conv_lookahead=(2, 0))
        assert model.effective_lookahead_ms(cfg) == 20


class TestDownsampling:
    def test_output_length_examples(self):
        cfg = model.ModelConfig()
        assert model.output_length(cfg, 16) == 2
        assert model.output_length(cfg, 17) == 3

    def test_encoder_output_length_matches(self):
        m = model.Model(tiny_cfg(n_blocks=2), seed=0)
        rng = np.random.default_rng(0)
        for t in (4, 5, 9, 16, 33):
            states, post = m.acoustic_encode(rng.normal(size=(t, 6)).astype(np.float32))
            want = model.output_length(m.cfg, t)
            assert states.shape == (want, 16)
            assert post.shape == (want, 9)
            np.testing.assert_allclose(post.data.sum(axis=1), 1.0, atol=1e-5)

    def test_too_short_input_rejected(self):
        m = model.Model(tiny_cfg(n_blocks=2), seed=0)
        with pytest.raises(ValueError):
            m.acoustic_encode(np.zeros((3, 6), dtype=np.float32))


class TestCausality:
    def test_acoustic_encoder_receptive_horizon(self):
        cfg = tiny_cfg()
        m = model.Model(cfg, seed=1)
        horizon = model.effective_lookahead_frames(cfg)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20, 6)).astype(np.float32)
        with ad.no_grad():
            base, _ = m.acoustic_encode(x)
            for t_out in range(base.shape[0]):
                last_needed = t_out * cfg.downsample + horizon
                if last_needed + 1 >= x.shape[0]:
                    continue
                x2 = x.copy()
                x2[last_needed + 1:] += 7.5
                pert, _ = m.acoustic_encode(x2)
                np.testing.assert_array_equal(base.data[t_out], pert.data[t_out])

    def test_bidirectional_flag_breaks_causality(self):
        cfg = tiny_cfg(unidirectional=False)
        m = model.Model(cfg, seed=1)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(20, 6)).astype(np.float32)
        with ad.no_grad():
            base, _ = m.acoustic_encode(x)
            x2 = x.copy()
            x2[-4:] += 7.5
            pert, _ = m.acoustic_encode(x2)
        assert not np.array_equal(base.data[0], pert.data[0])

    def test_semantic_encoder_causal(self):
        m = model.Model(tiny_cfg(), seed=3)
        rng = np.random.default_rng(3)
        s = rng.normal(size=(5, 16)).astype(np.float32)
        with ad.no_grad():
            base = m.semantic_encode(ad.Tensor(s))
            s2 = s.copy()
            s2[4] += 3.0
            pert = m.semantic_encode(ad.Tensor(s2))
        np.testing.assert_array_equal(base.data[:4], pert.data[:4])

    def test_zero_semantic_layers_is_positional_only(self):
        m = model.Model(tiny_cfg(semantic_layers=0), seed=0)
        s = np.ones((3, 16), dtype=np.float32)
        out = m.semantic_encode(ad.Tensor(s))
        pos = model.sinusoidal_positions(3, 16, np.float32)
        np.testing.assert_allclose(out.data, s + pos, atol=1e-6)


class TestCrossAttentionMask:
    def test_first_token_sees_k(self):
        mask = model.build_cross_attention_mask(3, 2, 1, 10)
        assert mask[0].sum() == 3

    def test_hand_case_counts(self):
        mask = model.build_cross_attention_mask(2, 2, 5, 6)
        np.testing.assert_array_equal(mask.sum(axis=1), [2, 2, 4, 4, 6])

    def test_wait_one_degenerate(self):
        mask = model.build_cross_attention_mask(1, 1, 4, 10)
        np.testing.assert_array_equal(mask.sum(axis=1), [1, 2, 3, 4])

    def test_infinite_k_saturates(self):
        mask = model.build_cross_attention_mask(model.WAIT_INF, 2, 3, 5)
        assert mask.all()

    def test_empty_source_rejected(self):
        with pytest.raises(ValueError):
            model.build_cross_attention_mask(1, 1, 3, 0)

    def test_monotone_budget_jumps_by_n(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            k = int(rng.integers(1, 6))
            n = int(rng.integers(1, 4))
            t_y = int(rng.integers(1, 12))
            s = int(rng.integers(1, 12))
            counts = model.build_cross_attention_mask(k, n, t_y, s).sum(axis=1)
            assert (np.diff(counts) >= 0).all()
            for t in range(t_y):
                assert counts[t] == min(n * (t // n) + k, s)


class TestForwardTrain:
    def test_losses_finite_and_diagnostics(self):
        corpus = tiny_corpus()
        m = model.Model(tiny_cfg(src_vocab_size=len(corpus.src_vocab),
                                 tgt_vocab_size=len(corpus.tgt_vocab)), seed=0)
        batch = data.make_batches(corpus, max_frames=200)[0]
        loss_st, loss_ctc, diag = m.forward_train(batch)
        assert np.isfinite(loss_st.item())
        assert np.isfinite(loss_ctc.item())
        assert diag["tokens"] > 0
        assert 0.0 <= diag["blank_fraction"] <= 1.0

    def test_alpha_zero_total_is_st_only(self):
        corpus = tiny_corpus()
        m = model.Model(tiny_cfg(ctc_loss_weight=0.0,
                                 src_vocab_size=len(corpus.src_vocab),
                                 tgt_vocab_size=len(corpus.tgt_vocab)), seed=0)
        batch = data.make_batches(corpus, max_frames=200)[0]
        loss_st, loss_ctc, _ = m.forward_train(batch)
        assert m.total_loss(loss_st, loss_ctc).item() == loss_st.item()

    def test_padding_does_not_change_loss(self):
        corpus = tiny_corpus()
        m = model.Model(tiny_cfg(src_vocab_size=len(corpus.src_vocab),
                                 tgt_vocab_size=len(corpus.tgt_vocab)), seed=0)
        batch = data.make_batches(corpus, max_frames=200)[0]
        ad.reset_tape()
        a = m.forward_train(batch)[0].item()
        padded = data.Batch(
            ids=batch.ids,
            features=np.concatenate([batch.features, np.zeros_like(batch.features)], axis=1),
            frame_lengths=batch.frame_lengths,
            source=np.concatenate([batch.source, np.full_like(batch.source, data.PAD)], axis=1),
            source_lengths=batch.source_lengths,
            target=np.concatenate([batch.target, np.full_like(batch.target, data.PAD)], axis=1),
            target_lengths=batch.target_lengths,
        )
        ad.reset_tape()
        b = m.forward_train(padded)[0].item()
        assert a == b

    def test_infeasible_transcripts_skipped(self):
        # 3-block model downsamples 8x; 2-4 frames/token makes transcripts too long
        corpus = tiny_corpus(n=10, length_range=(4, 4))
        m = model.Model(tiny_cfg(n_blocks=3, src_vocab_size=len(corpus.src_vocab),
                                 tgt_vocab_size=len(corpus.tgt_vocab)), seed=0)
        keep = [u for u in corpus if u.n_frames >= 8]
        assert keep
        batch = data.make_batches(keep, max_frames=400)[0]
        _, _, diag = m.forward_train(batch)
        assert diag["skipped"] > 0

    def test_saturated_mask_equals_full_sentence(self):
        corpus = tiny_corpus()
        kw = dict(src_vocab_size=len(corpus.src_vocab), tgt_vocab_size=len(corpus.tgt_vocab))
        m_inf = model.Model(tiny_cfg(wait_k=model.WAIT_INF, **kw), seed=0)
        m_big = model.Model(tiny_cfg(wait_k=99, **kw), seed=0)
        batch = data.make_batches(corpus, max_frames=200)[0]
        ad.reset_tape()
        a = m_inf.forward_train(batch)[0].item()
        ad.reset_tape()
        b = m_big.forward_train(batch)[0].item()
        assert a == pytest.approx(b, rel=1e-6)


class TestAblationVariants:
    @pytest.mark.parametrize("kw", [
        dict(use_shrink=False),
        dict(use_ctc=False, use_shrink=False),
        dict(gradual_downsample=False),
        dict(shrink_mode="drop_blank"),
        dict(shrink_mode="average"),
        dict(shrink_mode="argmax_frame"),
        dict(blank_penalty_mode="all_frames"),
        dict(unidirectional=False),
    ])
    def test_variant_trains_one_step(self, kw):
        corpus = tiny_corpus()
        m = model.Model(tiny_cfg(src_vocab_size=len(corpus.src_vocab),
                                 tgt_vocab_size=len(corpus.tgt_vocab), **kw), seed=0)
        batch = data.make_batches(corpus, max_frames=200)[0]
        ad.reset_tape()
        loss_st, loss_ctc, _ = m.forward_train(batch)
        total = m.total_loss(loss_st, loss_ctc)
        ad.backward(total)
        ad.adam_step(m.parameters(), ad.OptimizerState(), lr=1e-3)
        assert np.isfinite(total.item())

    def test_minus_gd_same_lookahead_and_length(self):
        cfg_gd = tiny_cfg(n_blocks=2)
        cfg_no = tiny_cfg(n_blocks=2, gradual_downsample=False)
        assert model.effective_lookahead_frames(cfg_gd) == model.effective_lookahead_frames(cfg_no)
        m = model.Model(cfg_no, seed=0)
        states, _ = m.acoustic_encode(np.random.default_rng(0).normal(size=(12, 6)).astype(np.float32))
        assert states.shape[0] == model.output_length(cfg_no, 12)


def test_loss_decreases_under_training():
    """200 optimizer steps on a fixed tiny batch cut the loss by >= 50%."""
    corpus = tiny_corpus(n=4, seed=9)
    cfg = tiny_cfg(src_vocab_size=len(corpus.src_vocab), tgt_vocab_size=len(corpus.tgt_vocab))
    m = model.Model(cfg, seed=9)
    batch = data.make_batches(corpus, max_frames=200)[0]
    state = ad.OptimizerState(base_lr=2e-3, warmup=50)
    first = None
    last = None
    for step in range(200):
        ad.reset_tape()
        loss_st, loss_ctc, _ = m.forward_train(batch)
        total = m.total_loss(loss_st, loss_ctc)
        ad.backward(total)
        lr = ad.inverse_sqrt_lr(state.step + 1, state.base_lr, state.warmup)
        ad.adam_step(m.parameters(), state, lr)
        if first is None:
            first = total.item()
        last = total.item()
    assert last <= 0.5 * first, (first, last)
