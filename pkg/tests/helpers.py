"""Shared fixtures-in-code for the captioner tests and the acceptance suite."""

import numpy as np

from qcap.captioner import CaptionModel, ModelConfig, forward_loss, pad_batch
from qcap.gradcheck import check_gradients

SMALL_CONFIG = dict(image_size=32, patch_size=8, embed_dim=16, n_heads=2, n_image_layers=1,
                    n_text_encoder_layers=1, n_decoder_layers=1, max_seq_len=64)


def small_model(**kw) -> CaptionModel:
    return CaptionModel(ModelConfig(**{**SMALL_CONFIG, **kw}))


def model_gradcheck(model: CaptionModel, images, captions, n_probes=30, seed=0):
    """Probe every parameter of the full captioner at a well-conditioned random point.

    At the 0.02 init many gradient entries are ~1e-8, below what central
    differences resolve, so weights are redrawn with std 0.3 (gains around 1).
    Key-projection biases shift every score in a softmax row equally, so their
    gradient is identically zero; they are returned separately instead of probed.
    Returns (relative errors, largest |grad| over key biases).
    """
    rng = np.random.default_rng(seed)
    named = dict(model.named_parameters())
    for name, p in named.items():
        p.data[...] = rng.normal(1.0 if name.endswith("gain") else 0.0, 0.3, p.shape)
    ids = pad_batch([model.vocab.encode(c) for c in captions])

    def loss():
        return forward_loss(model, images, ids)

    key_bias = [n for n in named if n.endswith("k.bias")]
    probed = [p for n, p in named.items() if n not in key_bias]
    errors = check_gradients(loss, probed, n_probes=n_probes, rng=rng)
    for p in probed:
        errors += check_gradients(loss, [p], n_probes=1, rng=rng)
    model.zero_grad()
    loss().backward()
    zero = max(float(np.abs(named[n].grad).max()) for n in key_bias)
    return errors, zero
