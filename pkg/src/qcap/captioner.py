"""Image-quality captioner: ViT image encoder, causal text encoder, cross-attending decoder.

Training maximizes the teacher-forced log-likelihood of the caption tokens
given the image; inference decodes greedily from BOS.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import CAPTIONER_MAGIC, load_checkpoint, save_checkpoint
from .data import augment
from .nn import Block, LayerNorm, Linear, Module, causal_mask, param
from .template import DESCRIPTIONS, HEADERS, LEXICON_VERSION, SEPARATOR, all_score_vectors, encode_scores
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainLog, evaluate_loss, fit

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

# words may contain inner hyphens; any other non-space character stands alone
_TOKEN_RE = re.compile(r"[A-Za-z0-9]+(?:-[A-Za-z0-9]+)*|[^\sA-Za-z0-9]")
_PUNCT = ":;,"


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class Vocabulary:
    """Closed word-level vocabulary over the caption lexicon."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError("special tokens must occupy ids 0-3")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_lexicon(cls) -> Vocabulary:
        words = set(_PUNCT) | set(SEPARATOR.strip())
        for text in list(HEADERS) + [d for table in DESCRIPTIONS.values() for d in table.values()]:
            words.update(split_words(text))
        return cls(list(SPECIALS) + sorted(words))

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [BOS] + [self.index.get(w, UNK) for w in split_words(text)] + [EOS]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i])
        return detokenize(words)


def detokenize(words: list[str]) -> str:
    text = " ".join(words)
    return re.sub(r" ([:;,])", r"\1", text)


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[int]:
    return (vocab or default_vocab()).encode(text)


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocab() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = Vocabulary.from_lexicon()
    return _DEFAULT_VOCAB


def longest_caption_tokens(vocab: Vocabulary | None = None) -> int:
    vocab = vocab or default_vocab()
    return max(len(vocab.encode(encode_scores(s))) for s in all_score_vectors())


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    n_heads: int = 4
    n_image_layers: int = 4
    n_text_encoder_layers: int = 2
    n_decoder_layers: int = 2
    max_seq_len: int = 96
    mlp_ratio: int = 4
    dropout: float = 0.1
    seed: int = 0

    def validate(self, vocab: Vocabulary | None = None):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.max_seq_len < longest_caption_tokens(vocab):
            raise ValueError("max_seq_len is shorter than the longest canonical caption")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W) -> (B, H*W/p^2, p^2) in row-major patch order."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[None]
    b, h, w = pixels.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    x = pixels.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


class ImageEncoder(Module):
    """Patch-embedding vision transformer with a prepended classification token."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.patch_size = cfg.patch_size
        self.n_patches = cfg.n_patches
        self.patch_embed = Linear(cfg.patch_size ** 2, d, rng)
        self.cls = param((1, 1, d), rng)
        self.pos = param((1, cfg.n_patches + 1, d), rng)
        self.blocks = [Block(d, cfg.n_heads, rng, mlp_ratio=cfg.mlp_ratio) for _ in range(cfg.n_image_layers)]
        self.ln = LayerNorm(d)

    def __call__(self, pixels: np.ndarray, rng=None, p: float = 0.0) -> Tensor:
        patches = patchify(pixels, self.patch_size)
        if patches.shape[1] != self.n_patches:
            raise ValueError(f"expected {self.n_patches} patches, got {patches.shape[1]}")
        b = patches.shape[0]
        # centre the [0, 1] window so inputs are roughly zero-mean
        x = self.patch_embed(Tensor((patches - 0.5) * 4.0))
        cls = self.cls + Tensor(np.zeros((b, 1, self.cls.shape[2])))
        x = T.concat([cls, x], axis=1) + self.pos
        for blk in self.blocks:
            x = blk(x, rng=rng, p=p)
        return self.ln(x)


class CaptionModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocabulary | None = None):
        self.cfg = cfg = cfg or ModelConfig()
        self.vocab = vocab = vocab or default_vocab()
        cfg.validate(vocab)
        rng = np.random.default_rng(cfg.seed)
        d = cfg.embed_dim
        self.image_encoder = ImageEncoder(cfg, rng)
        self.tok_embed = param((len(vocab), d), rng)
        self.pos_embed = param((cfg.max_seq_len, d), rng)
        self.text_layers = [Block(d, cfg.n_heads, rng, mlp_ratio=cfg.mlp_ratio)
                            for _ in range(cfg.n_text_encoder_layers)]
        self.decoder_layers = [Block(d, cfg.n_heads, rng, cross=True, mlp_ratio=cfg.mlp_ratio)
                               for _ in range(cfg.n_decoder_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, len(vocab), rng)

    def encode_image(self, pixels, rng=None) -> Tensor:
        return self.image_encoder(pixels, rng, self.cfg.dropout if rng is not None else 0.0)

    def decode(self, image_tokens: Tensor, input_ids: np.ndarray, rng=None) -> Tensor:
        """Logits (B, L, V) for each prefix of ``input_ids``."""
        ids = np.asarray(input_ids)
        if ids.ndim == 1:
            ids = ids[None]
        n = ids.shape[1]
        if n > self.cfg.max_seq_len:
            raise ValueError(f"sequence of {n} tokens exceeds max_seq_len {self.cfg.max_seq_len}")
        p = self.cfg.dropout if rng is not None else 0.0
        mask = causal_mask(n)
        # the decoder reads patch tokens only; the classification token is left to the baselines
        patches = image_tokens[:, 1:, :]
        x = T.embedding(self.tok_embed, ids) + self.pos_embed[:n]
        for blk in self.text_layers:
            x = blk(x, mask=mask, rng=rng, p=p)
        for blk in self.decoder_layers:
            x = blk(x, context=patches, mask=mask, rng=rng, p=p)
        return self.head(self.ln_f(x))

    def __call__(self, pixels, input_ids, rng=None) -> Tensor:
        return self.decode(self.encode_image(pixels, rng), input_ids, rng)

    def config_record(self) -> dict:
        return {"kind": "captioner", "model": asdict(self.cfg), "vocab": self.vocab.tokens,
                "lexicon_version": LEXICON_VERSION}

    def save(self, path):
        save_checkpoint(path, CAPTIONER_MAGIC, self.config_record(), self.state_dict())

    @classmethod
    def load(cls, path) -> CaptionModel:
        _, config, state = load_checkpoint(path, CAPTIONER_MAGIC)
        model = cls(ModelConfig(**config["model"]), Vocabulary(config["vocab"]))
        model.load_state_dict(state)
        return model


def pad_batch(sequences: list[list[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), pad, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, :len(s)] = s
    return out


def forward_loss(model: CaptionModel, pixels, target_ids, rng=None) -> Tensor:
    """Teacher-forced mean next-token NLL over non-pad targets."""
    ids = np.asarray(target_ids)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] > model.cfg.max_seq_len:
        raise ValueError(f"target of {ids.shape[1]} tokens exceeds max_seq_len {model.cfg.max_seq_len}")
    if ids.shape[1] < 2:
        raise ValueError("target needs at least BOS and one more token")
    logits = model(pixels, ids[:, :-1], rng)
    return T.next_token_nll(logits, ids[:, 1:], pad_id=PAD)


def caption_log_likelihood(model: CaptionModel, pixels, caption: str) -> float:
    """Summed log-probability of the caption tokens (and EOS) given the image."""
    ids = model.vocab.encode(caption)
    if UNK in ids:
        raise ValueError("caption contains out-of-vocabulary words")
    with no_grad():
        logits = model(pixels, np.asarray(ids[:-1])[None])
    return float(T.token_log_probs(logits.data[0], np.asarray(ids[1:])).sum())


@dataclass
class Generation:
    text: str
    ids: list[int]
    truncated: bool


def generate_captions(model: CaptionModel, pixels, batch_size: int = 50) -> list[Generation]:
    """Greedy decoding from BOS until EOS or ``max_seq_len`` tokens."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[None]
    results = []
    limit = model.cfg.max_seq_len
    with no_grad():
        for start in range(0, len(pixels), batch_size):
            img = model.encode_image(pixels[start:start + batch_size])
            b = img.shape[0]
            seq = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            while seq.shape[1] < limit and not done.all():
                nxt = model.decode(img, seq).data[:, -1].argmax(axis=-1)
                nxt[done] = PAD
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
                done |= nxt == EOS
            for row, finished in zip(seq, done):
                ids = [int(t) for t in row if t != PAD]
                results.append(Generation(model.vocab.decode(ids), ids, not bool(finished)))
    return results


def generate_caption(model: CaptionModel, pixels) -> Generation:
    return generate_captions(model, np.asarray(pixels)[None] if np.ndim(pixels) == 2 else pixels)[0]


def export_attention(model: CaptionModel, pixels, caption: str) -> dict:
    """Last decoder layer attention maps, averaged over heads and per head.

    Rows correspond to the decoder input positions (BOS followed by the
    caption tokens); cross-attention columns are image patches in row-major order.
    """
    ids = model.vocab.encode(caption)[:-1]
    with no_grad():
        model(pixels, np.asarray(ids)[None])
    last = model.decoder_layers[-1]
    self_w = last.attn.last_weights[0]
    cross_w = last.cross.last_weights[0]
    tokens = [model.vocab.tokens[i] for i in ids]
    return {
        "tokens": tokens,
        "patch_grid": [model.cfg.image_size // model.cfg.patch_size] * 2,
        "self_attention": self_w.mean(axis=0).tolist(),
        "cross_attention": cross_w.mean(axis=0).tolist(),
        "self_attention_heads": self_w.tolist(),
        "cross_attention_heads": cross_w.tolist(),
    }


def write_attention(record: dict, path):
    with open(path, "w") as fh:
        json.dump(record, fh)


def caption_batch_loss(model: CaptionModel, pixels: np.ndarray, token_ids: list[list[int]], use_augment: bool):
    """Mini-batch loss closure for ``training.fit``."""

    def batch_loss(idx, rng):
        px = pixels[idx]
        if use_augment and rng is not None:
            px = np.stack([augment(im, rng) for im in px])
        return forward_loss(model, px, pad_batch([token_ids[i] for i in idx]), rng)

    return batch_loss


def train(model: CaptionModel, pixels: np.ndarray, captions: list[str], cfg: TrainConfig,
          val: tuple[np.ndarray, list[str]] | None = None, checkpoint_path=None, on_epoch=None) -> TrainLog:
    """Fit the captioner; keeps the best-by-validation weights and optionally saves them."""
    if len(captions) == 0 or len(captions) != len(pixels):
        raise ValueError("need a nonempty dataset with one caption per image")
    ids = [model.vocab.encode(c) for c in captions]
    val_fn = None
    if val is not None and len(val[1]):
        v_ids = [model.vocab.encode(c) for c in val[1]]
        v_loss = caption_batch_loss(model, np.asarray(val[0]), v_ids, False)
        val_fn = lambda: evaluate_loss(v_loss, len(v_ids))  # noqa: E731
    out = fit(model, len(ids), caption_batch_loss(model, np.asarray(pixels), ids, cfg.augment), cfg,
              val_fn, on_epoch)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return out
