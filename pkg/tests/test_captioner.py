import math

import numpy as np
import pytest
from helpers import model_gradcheck, small_model

from qcap.captioner import (
    BOS,
    EOS,
    PAD,
    SPECIALS,
    UNK,
    CaptionModel,
    ModelConfig,
    Vocabulary,
    caption_log_likelihood,
    default_vocab,
    detokenize,
    export_attention,
    forward_loss,
    generate_caption,
    generate_captions,
    longest_caption_tokens,
    pad_batch,
    patchify,
    tokenize,
    train,
)
from qcap.checkpoint import load_checkpoint
from qcap.optim import OptimizerState, adamw_step
from qcap.template import ScoreVector, all_score_vectors, encode_scores
from qcap.tensor import Tensor, no_grad
from qcap.training import TrainConfig, TrainingDiverged, fit

WORKED = encode_scores(ScoreVector(4, 4, 2, 4))
CLEAN = encode_scores(ScoreVector(1, 1, None, 1))


@pytest.fixture
def images():
    return np.random.default_rng(0).random((2, 32, 32))


class TestVocabulary:
    def test_specials_and_size(self):
        v = default_vocab()
        assert tuple(v.tokens[:4]) == SPECIALS
        assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
        assert len(v) < 128
        assert len(set(v.tokens)) == len(v)
        assert all(v.index[t] == i for i, t in enumerate(v.tokens))

    def test_trivial_cases(self):
        assert tokenize("") == [BOS, EOS]
        assert tokenize("zzz") == [BOS, UNK, EOS]

    def test_round_trip_all_captions(self):
        v = default_vocab()
        for s in all_score_vectors():
            text = encode_scores(s)
            ids = v.encode(text)
            assert UNK not in ids
            assert v.decode(ids) == text

    def test_hyphenated_words_stay_whole(self):
        v = default_vocab()
        assert "well-seen" in v.index and "sub-optimal" in v.index
        assert detokenize(["a", ",", "b", ";", "c", ":"]) == "a, b; c:"

    def test_rejects_bad_specials(self):
        with pytest.raises(ValueError):
            Vocabulary(["a", "b", "c", "d"])


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.patch_size, cfg.embed_dim, cfg.n_heads, cfg.n_image_layers,
                cfg.n_text_encoder_layers, cfg.n_decoder_layers, cfg.max_seq_len) == (8, 128, 4, 4, 2, 2, 96)
        assert cfg.max_seq_len >= longest_caption_tokens()

    @pytest.mark.parametrize("kw", [dict(embed_dim=30, n_heads=4), dict(max_seq_len=10),
                                    dict(image_size=30)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw).validate()


class TestImageEncoder:
    def test_default_token_count(self):
        m = CaptionModel()
        out = m.encode_image(np.zeros((1, 64, 64)))
        assert out.shape == (1, 65, 128)

    def test_non_divisible_shape(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((1, 30, 32)), 8)

    def test_identical_images_identical_embeddings(self, images):
        m = small_model()
        a = m.encode_image(np.stack([images[0], images[0]])).data
        assert np.array_equal(a[0], a[1])

    def test_patch_shuffle_changes_output(self, images):
        m = small_model()
        img = images[0]
        blocks = img.reshape(4, 8, 4, 8).transpose(0, 2, 1, 3).reshape(16, 8, 8)
        shuffled = blocks[::-1].reshape(4, 4, 8, 8).transpose(0, 2, 1, 3).reshape(32, 32)
        a = m.encode_image(img[None]).data
        b = m.encode_image(shuffled[None]).data
        assert not np.allclose(a, b)
        # same multiset of patches, so only position embeddings distinguish them
        assert np.allclose(np.sort(patchify(img, 8).sum(axis=2)), np.sort(patchify(shuffled, 8).sum(axis=2)))


class TestForwardLoss:
    def test_initial_loss_near_uniform(self):
        m = CaptionModel()
        ids = pad_batch([m.vocab.encode(WORKED)])
        loss = forward_loss(m, np.random.default_rng(1).random((1, 64, 64)), ids).item()
        assert abs(loss - math.log(len(m.vocab))) < 0.5

    def test_gradient_reaches_every_parameter(self, images):
        m = small_model()
        ids = pad_batch([m.vocab.encode(WORKED), m.vocab.encode(CLEAN)])
        forward_loss(m, images, ids).backward()
        for name, p in m.named_parameters():
            assert p.grad is not None, name
        probe = m.image_encoder.patch_embed.weight.grad
        assert np.abs(probe).max() > 0
        for group in ("image_encoder.", "text_layers.", "decoder_layers."):
            assert any(np.abs(p.grad).max() > 0 for n, p in m.named_parameters() if n.startswith(group))

    def test_overlong_target(self, images):
        m = small_model()
        with pytest.raises(ValueError):
            forward_loss(m, images[:1], np.ones((1, 65), dtype=int))

    def test_full_model_gradcheck(self, images):
        errors, key_bias_grad = model_gradcheck(small_model(), images, [WORKED, CLEAN])
        assert len(errors) >= 20
        assert max(errors) <= 1e-5
        assert key_bias_grad < 1e-12


class TestProperties:
    def test_causality(self, images):
        m = small_model()
        ids = np.array(m.vocab.encode(WORKED)[:20])[None]
        with no_grad():
            base = m(images[:1], ids).data
            for j in (3, 10, 19):
                mutated = ids.copy()
                mutated[0, j] = (mutated[0, j] + 5) % len(m.vocab)
                out = m(images[:1], mutated).data
                np.testing.assert_allclose(out[0, :j], base[0, :j], rtol=0, atol=1e-12)
                assert not np.allclose(out[0, j:], base[0, j:])

    def test_image_grounding(self, images):
        m = small_model()
        ids = np.array(m.vocab.encode(WORKED))[None]
        img = images[0]
        perm = np.random.default_rng(3).permutation(16)
        blocks = img.reshape(4, 8, 4, 8).transpose(0, 2, 1, 3).reshape(16, 8, 8)[perm]
        shuffled = blocks.reshape(4, 4, 8, 8).transpose(0, 2, 1, 3).reshape(32, 32)
        with no_grad():
            assert not np.allclose(m(img[None], ids).data, m(shuffled[None], ids).data)

    def test_likelihood_matches_loss(self, images):
        m = small_model()
        rng = np.random.default_rng(5)
        vectors = all_score_vectors()
        for _ in range(10):
            caption = encode_scores(vectors[int(rng.integers(len(vectors)))])
            img = images[int(rng.integers(2))]
            ids = m.vocab.encode(caption)
            ll = caption_log_likelihood(m, img[None], caption)
            with no_grad():
                loss = forward_loss(m, img[None], pad_batch([ids])).item()
            assert ll <= 0
            assert ll == pytest.approx(-(len(ids) - 1) * loss, abs=1e-10)
            assert 0 < math.exp(ll / (len(ids) - 1)) <= 1

    def test_likelihood_rejects_unknown_words(self, images):
        with pytest.raises(ValueError):
            caption_log_likelihood(small_model(), images[:1], "zzz")

    def test_one_hot_model_has_zero_log_likelihood(self, images):
        m = small_model()
        m.head.weight.data[...] = 0.0
        m.head.bias.data[...] = 0.0
        m.head.bias.data[EOS] = 1e3
        gen = generate_caption(m, images[0])
        assert gen.ids == [BOS, EOS] and gen.text == ""
        assert caption_log_likelihood(m, images[:1], gen.text) == 0.0


class TestGeneration:
    def test_greedy_is_deterministic(self, images):
        m = small_model()
        a = generate_captions(m, images)
        b = generate_captions(m, images)
        assert [g.ids for g in a] == [g.ids for g in b]

    def test_truncation_flag(self, images):
        m = small_model()
        for g in generate_captions(m, images):
            assert len(g.ids) <= m.cfg.max_seq_len
            assert g.truncated == (g.ids[-1] != EOS)
            if g.truncated:
                assert len(g.ids) == m.cfg.max_seq_len

    def test_overfit_single_sample(self, images):
        m = small_model(dropout=0.0, embed_dim=32)
        ids = pad_batch([m.vocab.encode(WORKED)])
        params = m.parameters()
        state = OptimizerState.for_params(params, weight_decay=0.0)
        for _ in range(500):
            m.zero_grad()
            loss = forward_loss(m, images[:1], ids)
            loss.backward()
            adamw_step(params, state, 3e-3)
        assert forward_loss(m, images[:1], ids).item() < 0.01
        gen = generate_caption(m, images[0])
        assert gen.text == WORKED and not gen.truncated


class TestAttentionExport:
    def test_contracts(self, images):
        m = small_model()
        rec = export_attention(m, images[0], WORKED)
        n = len(m.vocab.encode(WORKED)) - 1
        self_w = np.array(rec["self_attention"])
        cross_w = np.array(rec["cross_attention"])
        assert self_w.shape == (n, n) and cross_w.shape == (n, 16)
        assert len(rec["tokens"]) == n
        assert np.all(self_w[np.triu_indices(n, 1)] == 0.0)
        np.testing.assert_allclose(self_w.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(cross_w.sum(axis=1), 1.0, atol=1e-9)
        heads = np.array(rec["self_attention_heads"])
        assert heads.shape == (m.cfg.n_heads, n, n)
        assert np.all(heads[:, np.triu(np.ones((n, n), bool), 1)] == 0.0)


class TestTraining:
    def _data(self, n=8):
        rng = np.random.default_rng(2)
        vectors = all_score_vectors()
        caps = [encode_scores(vectors[int(i)]) for i in rng.integers(len(vectors), size=n)]
        return rng.random((n, 32, 32)), caps

    def test_one_epoch_smoke(self):
        px, caps = self._data()
        m = small_model()
        ids = pad_batch([m.vocab.encode(c) for c in caps])
        with no_grad():
            before = forward_loss(m, px, ids).item()
        log = train(m, px, caps, TrainConfig(epochs=1, batch_size=2, lr_peak=1e-3), val=(px, caps))
        with no_grad():
            after = forward_loss(m, px, ids).item()
        assert after < before
        assert [e["epoch"] for e in log.epochs] == [0, 1]
        assert log.epochs[1]["val_loss"] < log.epochs[0]["val_loss"]

    def test_identical_seeds_identical_checkpoints(self, tmp_path):
        px, caps = self._data()
        for name in ("a", "b"):
            train(small_model(), px, caps, TrainConfig(epochs=2, batch_size=4), checkpoint_path=tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        train(small_model(), px, caps, TrainConfig(epochs=2, batch_size=4, seed=1), checkpoint_path=tmp_path / "c")
        assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()

    def test_checkpoint_round_trip(self, tmp_path, images):
        m = small_model()
        m.save(tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == b"IQCK"
        loaded = CaptionModel.load(tmp_path / "m.ckpt")
        ids = np.array(m.vocab.encode(WORKED))[None]
        with no_grad():
            assert np.array_equal(m(images[:1], ids).data, loaded(images[:1], ids).data)
        _, config, state = load_checkpoint(tmp_path / "m.ckpt")
        assert config["model"]["embed_dim"] == 16 and set(state) == set(m.state_dict())
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "m.ckpt", b"IQBL")

    def test_divergence_guard(self):
        m = small_model()

        def bad_loss(idx, rng):
            return Tensor(np.nan)

        with pytest.raises(TrainingDiverged):
            fit(m, 4, bad_loss, TrainConfig(epochs=1))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(small_model(), np.zeros((0, 32, 32)), [], TrainConfig(epochs=1))
