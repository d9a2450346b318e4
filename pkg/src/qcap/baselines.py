"""Image-only baselines sharing the captioner's image encoder.

* ViT-C: four categorical heads on the classification token (lesion head has an ABSENT class).
* ViT-R: four scalar heads; the lesion head adds a presence logit.
* CLIP-style: image and bag-of-words text towers scored against per-level prompts.
"""

from __future__ import annotations

import math
from dataclasses import asdict

import numpy as np

from . import tensor as T
from .captioner import CaptionModel, ImageEncoder, ModelConfig, Vocabulary, default_vocab
from .checkpoint import BASELINE_MAGIC, load_checkpoint, save_checkpoint
from .data import augment
from .nn import Linear, Module, param
from .template import ABSENT, DESCRIPTIONS, METRICS, ScoreVector
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainLog, evaluate_loss, fit

CATEGORICAL_CLASSES = (4, 4, 5, 4)
LESION = METRICS.index("lesion_conspicuity")
ABSENT_CLASS = 4


class Head(Module):
    """Two fully connected layers: d -> d/2 -> n_out."""

    def __init__(self, dim: int, n_out: int, rng):
        self.fc1 = Linear(dim, dim // 2, rng)
        self.fc2 = Linear(dim // 2, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadModel(Module):
    def __init__(self, mode: str = "categorical", cfg: ModelConfig | None = None):
        if mode not in ("categorical", "scalar"):
            raise ValueError(f"unknown head mode {mode!r}")
        self.mode = mode
        self.cfg = cfg = cfg or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        self.encoder = ImageEncoder(cfg, rng)
        outs = CATEGORICAL_CLASSES if mode == "categorical" else (1, 1, 2, 1)
        self.heads = [Head(cfg.embed_dim, k, rng) for k in outs]
        if mode == "scalar":
            # start regression outputs mid-scale
            for h in self.heads:
                h.fc2.bias.data[0] = 2.5

    def __call__(self, pixels, rng=None) -> list[Tensor]:
        p = self.cfg.dropout if rng is not None else 0.0
        cls = self.encoder(pixels, rng, p)[:, 0, :]
        return [h(cls) for h in self.heads]

    def config_record(self) -> dict:
        return {"kind": "vitc" if self.mode == "categorical" else "vitr", "model": asdict(self.cfg)}


def _require(model, mode):
    if not isinstance(model, MultiHeadModel) or model.mode != mode:
        raise ValueError(f"expected a {mode} MultiHeadModel")


def vitc_forward(model: MultiHeadModel, pixels) -> list[np.ndarray]:
    """Per-metric logits with shapes (B,4), (B,4), (B,5), (B,4)."""
    _require(model, "categorical")
    with no_grad():
        return [o.data for o in model(pixels)]


def vitc_predict(logits: list[np.ndarray]) -> list[ScoreVector]:
    cols = [lg.argmax(axis=-1) + 1 for lg in logits]
    out = []
    for row in zip(*cols):
        values = [int(v) for v in row]
        if values[LESION] == ABSENT_CLASS + 1:
            values[LESION] = ABSENT
        out.append(ScoreVector(*values))
    return out


def vitr_forward(model: MultiHeadModel, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Raw regression outputs (B, 4) and lesion presence logits (B,)."""
    _require(model, "scalar")
    with no_grad():
        outs = model(pixels)
    values = np.stack([o.data[:, 0] for o in outs], axis=1)
    return values, outs[LESION].data[:, 1]


def regression_to_score(x: float) -> int:
    """Round half up, then clamp to 1..4."""
    return int(min(4, max(1, math.floor(x + 0.5))))


def vitr_predict(values: np.ndarray, presence: np.ndarray) -> list[ScoreVector]:
    out = []
    for row, pres in zip(values, presence):
        scores = [regression_to_score(v) for v in row]
        if pres < 0:
            scores[LESION] = ABSENT
        out.append(ScoreVector(*scores))
    return out


# CLIP-style prompt scoring ---------------------------------------------------------

def expected_score(similarities) -> np.ndarray:
    """Sum_k k * softmax(sim)_k over levels k = 1..4 along the last axis."""
    s = np.asarray(similarities, dtype=np.float64)
    w = np.exp(s - s.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return w @ np.arange(1, s.shape[-1] + 1)


class ClipStyleModel(Module):
    """Image tower (shared encoder + projection) and bag-of-words text tower."""

    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocabulary | None = None,
                 scale: float = 10.0):
        self.cfg = cfg = cfg or ModelConfig()
        self.vocab = vocab or default_vocab()
        self.scale = scale
        rng = np.random.default_rng(cfg.seed)
        d = cfg.embed_dim
        self.encoder = ImageEncoder(cfg, rng)
        self.image_proj = Linear(d, d, rng)
        self.word_embed = param((len(self.vocab), d), rng)
        self.text_proj = Linear(d, d, rng)

    @classmethod
    def from_captioner(cls, captioner: CaptionModel) -> ClipStyleModel:
        """Initialize both towers from a trained captioner (projections start at identity)."""
        model = cls(captioner.cfg, captioner.vocab)
        own = dict(model.encoder.named_parameters())
        for name, p in captioner.image_encoder.named_parameters():
            own[name].data[...] = p.data
        model.word_embed.data[...] = captioner.tok_embed.data
        for proj in (model.image_proj, model.text_proj):
            proj.weight.data[...] = np.eye(proj.weight.shape[0])
            proj.bias.data[...] = 0.0
        return model

    def image_features(self, pixels, rng=None) -> Tensor:
        p = self.cfg.dropout if rng is not None else 0.0
        cls = self.encoder(pixels, rng, p)[:, 0, :]
        return T.l2_normalize(self.image_proj(cls))

    def text_features(self, prompts: list[str]) -> Tensor:
        """Mean word embedding per prompt (specials excluded), projected and unit-normalized."""
        ids = [self.vocab.encode(p)[1:-1] for p in prompts]
        bag = np.zeros((len(prompts), len(self.vocab)))
        for row, toks in enumerate(ids):
            for t in toks:
                bag[row, t] += 1.0 / len(toks)
        return T.l2_normalize(self.text_proj(Tensor(bag) @ self.word_embed))

    def config_record(self) -> dict:
        return {"kind": "clip", "model": asdict(self.cfg), "vocab": self.vocab.tokens, "scale": self.scale}


class PromptBank:
    """One prompt per (metric, score 1..4): the rubric description strings."""

    def __init__(self, prompts: dict[str, list[str]] | None = None):
        if prompts is None:
            prompts = {m: [DESCRIPTIONS[m][k] for k in (1, 2, 3, 4)] for m in METRICS}
        self.prompts = prompts
        self.embeddings: dict[str, np.ndarray] = {}

    def embed(self, model: ClipStyleModel) -> PromptBank:
        with no_grad():
            for metric, texts in self.prompts.items():
                self.embeddings[metric] = model.text_features(texts).data
        return self

    def similarities(self, metric: str, image_features: np.ndarray) -> np.ndarray:
        if metric not in self.prompts:
            raise KeyError(f"no prompts for metric {metric!r}")
        if metric not in self.embeddings:
            raise ValueError("prompt bank has not been embedded")
        return image_features @ self.embeddings[metric].T


def clip_style_score(model: ClipStyleModel, pixels, bank: PromptBank, metric: str) -> np.ndarray:
    """Expected score in [1, 4] per image."""
    with no_grad():
        feats = model.image_features(pixels).data
    return expected_score(model.scale * bank.similarities(metric, feats))


def clip_style_scores(model: ClipStyleModel, pixels, bank: PromptBank | None = None) -> np.ndarray:
    """(N, 4) expected scores for every metric, batched."""
    bank = (bank or PromptBank()).embed(model)
    pixels = np.asarray(pixels)
    out = []
    for start in range(0, len(pixels), 50):
        with no_grad():
            feats = model.image_features(pixels[start:start + 50]).data
        out.append(np.stack([expected_score(model.scale * bank.similarities(m, feats))
                             for m in METRICS], axis=1))
    return np.concatenate(out)


# losses and training ---------------------------------------------------------------

def score_targets(scores: list[ScoreVector]) -> np.ndarray:
    """(N, 4) float array, lesion ABSENT encoded as NaN."""
    return np.array([[np.nan if v is ABSENT else v for v in s.as_list()] for s in scores], dtype=float)


def _categorical_loss(model, px, y, rng):
    outs = model(px, rng)
    losses = []
    for k, out in enumerate(outs):
        col = y[:, k]
        target = np.where(np.isnan(col), ABSENT_CLASS, col - 1).astype(np.int64)
        losses.append(T.cross_entropy(out, target))
    return sum(losses[1:], losses[0]) * 0.25


def _scalar_loss(model, px, y, rng):
    outs = model(px, rng)
    losses = []
    for k, out in enumerate(outs):
        col = y[:, k]
        present = ~np.isnan(col)
        value = out[:, 0]
        if k == LESION:
            losses.append(T.bce_with_logits(out[:, 1], present.astype(float)))
            if present.any():
                losses.append(T.mse_loss(value, np.nan_to_num(col), mask=present))
        else:
            losses.append(T.mse_loss(value, col))
    return sum(losses[1:], losses[0]) * 0.25


def _clip_loss(model: ClipStyleModel, bank: PromptBank, px, y, rng):
    img = model.image_features(px, rng)
    losses = []
    for k, metric in enumerate(METRICS):
        col = y[:, k]
        present = ~np.isnan(col)
        if not present.any():
            continue
        txt = model.text_features(bank.prompts[metric])
        logits = (img @ txt.transpose()) * model.scale
        target = np.where(present, np.nan_to_num(col) - 1, 0).astype(np.int64)
        losses.append(T.cross_entropy(logits, target, mask=present))
    return sum(losses[1:], losses[0]) * (1.0 / len(losses))


def baseline_loss(model: Module, pixels, targets: np.ndarray, rng=None) -> Tensor:
    if isinstance(model, ClipStyleModel):
        return _clip_loss(model, PromptBank(), pixels, targets, rng)
    if isinstance(model, MultiHeadModel):
        fn = _categorical_loss if model.mode == "categorical" else _scalar_loss
        return fn(model, pixels, targets, rng)
    raise TypeError(f"not a baseline model: {type(model).__name__}")


def _batch_loss(model, pixels, targets, use_augment):
    def batch_loss(idx, rng):
        px = pixels[idx]
        if use_augment and rng is not None:
            px = np.stack([augment(im, rng) for im in px])
        return baseline_loss(model, px, targets[idx], rng)

    return batch_loss


def train_baseline(model: Module, pixels: np.ndarray, scores: list[ScoreVector], cfg: TrainConfig,
                   val: tuple[np.ndarray, list[ScoreVector]] | None = None, checkpoint_path=None,
                   on_epoch=None) -> TrainLog:
    if len(scores) == 0 or len(scores) != len(pixels):
        raise ValueError("need a nonempty dataset with one score vector per image")
    y = score_targets(scores)
    val_fn = None
    if val is not None and len(val[1]):
        v_loss = _batch_loss(model, np.asarray(val[0]), score_targets(val[1]), False)
        val_fn = lambda: evaluate_loss(v_loss, len(val[1]))  # noqa: E731
    out = fit(model, len(y), _batch_loss(model, np.asarray(pixels), y, cfg.augment), cfg, val_fn, on_epoch)
    if checkpoint_path is not None:
        save_baseline(model, checkpoint_path)
    return out


def save_baseline(model: Module, path):
    save_checkpoint(path, BASELINE_MAGIC, model.config_record(), model.state_dict())


def load_baseline(path) -> Module:
    _, config, state = load_checkpoint(path, BASELINE_MAGIC)
    cfg = ModelConfig(**config["model"])
    if config["kind"] == "clip":
        model = ClipStyleModel(cfg, Vocabulary(config["vocab"]), config["scale"])
    else:
        model = MultiHeadModel("categorical" if config["kind"] == "vitc" else "scalar", cfg)
    model.load_state_dict(state)
    return model


def predict_scores(model: Module, pixels, batch_size: int = 50) -> tuple[list[ScoreVector], np.ndarray]:
    """Discrete predictions and the continuous values used for correlation."""
    pixels = np.asarray(pixels)
    preds, raw = [], []
    for start in range(0, len(pixels), batch_size):
        px = pixels[start:start + batch_size]
        if isinstance(model, ClipStyleModel):
            vals = clip_style_scores(model, px)
            preds += [ScoreVector(*[regression_to_score(v) for v in row]) for row in vals]
        elif model.mode == "categorical":
            logits = vitc_forward(model, px)
            preds += vitc_predict(logits)
            # expected score under each head's softmax (lesion restricted to levels 1-4)
            vals = np.stack([expected_score(lg[:, :4]) for lg in logits], axis=1)
        else:
            vals, presence = vitr_forward(model, px)
            preds += vitr_predict(vals, presence)
        raw.append(vals)
    return preds, np.concatenate(raw)
